//! Synthetic stand-ins for the three task families: sentiment-style
//! classification, set-based inference, and sequence reversal.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::tokenizer::{self, Tokenizer};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskType {
    Cls,
    Nli,
    Gen,
}

impl TaskType {
    pub fn name(self) -> &'static str {
        match self {
            TaskType::Cls => "cls",
            TaskType::Nli => "nli",
            TaskType::Gen => "gen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_type: TaskType,
    pub prompt_prefix: String,
    /// Words the generator draws body tokens from (fillers for CLS, items for
    /// NLI, symbols for GEN).
    pub vocab_subset: Vec<String>,
    /// Inclusive body-length range (for NLI: premise set size range).
    pub min_len: usize,
    pub max_len: usize,
    pub labels: Vec<String>,
}

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl TaskSpec {
    pub fn default_for(task_type: TaskType) -> Self {
        match task_type {
            TaskType::Cls => TaskSpec {
                task_type,
                prompt_prefix: "classify:".into(),
                vocab_subset: strings(&tokenizer::FILLER_WORDS),
                min_len: 4,
                max_len: 12,
                labels: strings(&["positive", "negative"]),
            },
            TaskType::Nli => TaskSpec {
                task_type,
                prompt_prefix: "infer:".into(),
                vocab_subset: strings(&tokenizer::ITEM_WORDS[..20]),
                min_len: 2,
                max_len: 5,
                labels: strings(&["entailment", "contradiction", "neutral"]),
            },
            TaskType::Gen => TaskSpec {
                task_type,
                prompt_prefix: "reverse:".into(),
                vocab_subset: tokenizer::DIGIT_WORDS
                    .iter()
                    .chain(&tokenizer::LETTER_WORDS)
                    .map(|w| w.to_string())
                    .collect(),
                min_len: 4,
                max_len: 12,
                labels: Vec::new(),
            },
        }
    }
}

/// One prompted sample. `input_ids` starts with `[START]`; `target_ids` ends
/// with end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub task_id: usize,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// Prompted input text, without `[START]`.
    pub raw_input: String,
    pub raw_target: String,
}

/// The task specs in task-id order plus the shared tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub specs: Vec<TaskSpec>,
    pub tokenizer: Tokenizer,
}

impl Default for TaskSuite {
    fn default() -> Self {
        TaskSuite {
            specs: [TaskType::Cls, TaskType::Nli, TaskType::Gen]
                .into_iter()
                .map(TaskSpec::default_for)
                .collect(),
            tokenizer: Tokenizer::default(),
        }
    }
}

impl TaskSuite {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut prefixes = HashSet::new();
        for spec in &self.specs {
            if !prefixes.insert(&spec.prompt_prefix) {
                errs.push(format!("prompt prefix {:?} used twice", spec.prompt_prefix));
            }
            if spec.min_len == 0 || spec.min_len > spec.max_len {
                errs.push(format!(
                    "{}: bad length range {}..={}",
                    spec.task_type.name(),
                    spec.min_len,
                    spec.max_len
                ));
            }
            for w in std::iter::once(&spec.prompt_prefix)
                .chain(&spec.vocab_subset)
                .chain(&spec.labels)
            {
                match self.tokenizer.id(w) {
                    Ok(id) if id <= self.tokenizer.eos_id() => errs.push(format!(
                        "{}: reserved token {w:?} in task vocabulary",
                        spec.task_type.name()
                    )),
                    Ok(_) => {}
                    Err(_) => errs.push(format!("{}: {w:?} is not in the vocabulary", spec.task_type.name())),
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn task_id(&self, t: TaskType) -> Option<usize> {
        self.specs.iter().position(|s| s.task_type == t)
    }

    /// Hex SHA-256 over the specs and vocabulary; identifies the data format.
    pub fn fingerprint(&self) -> String {
        let payload = serde_json::json!({
            "specs": self.specs,
            "vocab": self.tokenizer.words(),
        });
        let digest = Sha256::digest(payload.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `[START] ⊕ prompt ⊕ body` and `target ⊕ eos`.
    pub fn format_with_prompt(&self, task_id: usize, body: &str, target: &str, max_seq_len: usize) -> Result<Example> {
        let spec = self
            .specs
            .get(task_id)
            .ok_or_else(|| Error::Routing(format!("no task with id {task_id}")))?;
        let raw_input = format!("{} {}", spec.prompt_prefix, body.trim());
        self.encode_pair(task_id, &raw_input, target, max_seq_len)
    }

    /// Builds an example from an already-prompted input string.
    pub fn encode_pair(
        &self,
        task_id: usize,
        raw_input: &str,
        raw_target: &str,
        max_seq_len: usize,
    ) -> Result<Example> {
        let t = &self.tokenizer;
        let mut input_ids = vec![t.start_id()];
        input_ids.extend(t.encode(raw_input)?);
        let mut target_ids = t.encode(raw_target)?;
        target_ids.push(t.eos_id());
        if input_ids.len() > max_seq_len || target_ids.len() > max_seq_len {
            return Err(Error::Input(format!(
                "example exceeds max_seq_len {max_seq_len}: input {} tokens, target {} tokens",
                input_ids.len(),
                target_ids.len()
            )));
        }
        Ok(Example {
            task_id,
            input_ids,
            target_ids,
            raw_input: raw_input.to_string(),
            raw_target: raw_target.to_string(),
        })
    }
}

/// Majority marker label for a CLS body.
pub fn cls_oracle(body: &str) -> &'static str {
    let (mut pos, mut neg) = (0, 0);
    for w in body.split_whitespace() {
        match w {
            "pos" => pos += 1,
            "neg" => neg += 1,
            _ => {}
        }
    }
    if pos > neg {
        "positive"
    } else {
        "negative"
    }
}

/// Set-relation label: entailment when `B ⊆ A`, contradiction when disjoint.
pub fn nli_oracle(premise: &[&str], hypothesis: &[&str]) -> &'static str {
    let a: BTreeSet<_> = premise.iter().collect();
    let b: BTreeSet<_> = hypothesis.iter().collect();
    if b.is_subset(&a) {
        "entailment"
    } else if a.is_disjoint(&b) {
        "contradiction"
    } else {
        "neutral"
    }
}

pub fn gen_oracle(body: &str) -> String {
    body.split_whitespace().rev().collect::<Vec<_>>().join(" ")
}

/// Answer from the per-task oracle for a prompted raw input, used to check
/// that generated data is separable.
pub fn oracle_answer(task_type: TaskType, raw_input: &str) -> String {
    let words: Vec<&str> = raw_input.split_whitespace().skip(1).collect();
    match task_type {
        TaskType::Cls => cls_oracle(&words.join(" ")).to_string(),
        TaskType::Nli => {
            let h = words.iter().position(|&w| w == "hypothesis:").unwrap_or(words.len());
            let premise = &words[1.min(h)..h];
            let hyp = if h < words.len() { &words[h + 1..] } else { &[][..] };
            nli_oracle(premise, hyp).to_string()
        }
        TaskType::Gen => gen_oracle(&words.join(" ")),
    }
}

fn sample_distinct<'a>(rng: &mut Rng, pool: &[&'a str], n: usize) -> Vec<&'a str> {
    pool.choose_multiple(rng, n).copied().collect()
}

/// `(body, target)` for one example with a requested label index.
fn sample_body(spec: &TaskSpec, label: usize, rng: &mut Rng) -> Result<(String, String)> {
    let pool: Vec<&str> = spec.vocab_subset.iter().map(String::as_str).collect();
    match spec.task_type {
        TaskType::Cls => {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let odd: Vec<usize> = [1, 3, 5].into_iter().filter(|&m| m <= len).collect();
            let markers = *odd
                .choose(rng)
                .ok_or_else(|| Error::Generation("CLS body too short for a marker".into()))?;
            let majority = rng.random_range(markers / 2 + 1..=markers);
            let (pos, neg) = if label == 0 {
                (majority, markers - majority)
            } else {
                (markers - majority, majority)
            };
            let mut words: Vec<&str> = std::iter::repeat_n("pos", pos)
                .chain(std::iter::repeat_n("neg", neg))
                .collect();
            words.extend((0..len - markers).map(|_| *pool.choose(rng).expect("non-empty filler pool")));
            words.shuffle(rng);
            let body = words.join(" ");
            let target = cls_oracle(&body).to_string();
            Ok((body, target))
        }
        TaskType::Nli => {
            let a_len = rng.random_range(spec.min_len..=spec.max_len);
            if pool.len() < a_len + 3 {
                return Err(Error::Generation("NLI item pool too small".into()));
            }
            let picked = sample_distinct(rng, &pool, a_len + 3);
            let (a, rest) = picked.split_at(a_len);
            let b: Vec<&str> = match label {
                0 => {
                    let k = rng.random_range(1..=a_len.min(3));
                    sample_distinct(rng, a, k)
                }
                1 => {
                    let k = rng.random_range(1..=3);
                    rest[..k].to_vec()
                }
                _ => {
                    let inside = rng.random_range(1..=a_len.min(2));
                    let outside = rng.random_range(1..=2usize);
                    let mut b = sample_distinct(rng, a, inside);
                    b.extend(&rest[..outside]);
                    b.shuffle(rng);
                    b
                }
            };
            let body = format!("premise: {} hypothesis: {}", a.join(" "), b.join(" "));
            Ok((body, nli_oracle(a, &b).to_string()))
        }
        TaskType::Gen => {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let words: Vec<&str> = (0..len)
                .map(|_| *pool.choose(rng).expect("non-empty symbol pool"))
                .collect();
            let body = words.join(" ");
            let target = gen_oracle(&body);
            Ok((body, target))
        }
    }
}

const MAX_ATTEMPTS: usize = 2000;

/// Generates `n_per_task` examples for each task, in task order. Inputs are
/// unique across the whole result and labels are assigned round-robin, so
/// each task is label-balanced within one example.
pub fn generate_dataset(suite: &TaskSuite, seed: u64, n_per_task: usize, max_seq_len: usize) -> Result<Vec<Example>> {
    if n_per_task == 0 {
        return Err(Error::Generation("n_per_task must be at least 1".into()));
    }
    suite.validate()?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_per_task * suite.specs.len());
    for (task_id, spec) in suite.specs.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("data/{}", spec.task_type.name()));
        let n_labels = spec.labels.len().max(1);
        for i in 0..n_per_task {
            let label = i % n_labels;
            let mut attempts = 0;
            let example = loop {
                let (body, target) = sample_body(spec, label, &mut rng)?;
                let ex = suite.format_with_prompt(task_id, &body, &target, max_seq_len)?;
                if seen.insert(ex.raw_input.clone()) {
                    break ex;
                }
                attempts += 1;
                if attempts >= MAX_ATTEMPTS {
                    return Err(Error::Generation(format!(
                        "could not draw {n_per_task} distinct {} examples (stuck at {i})",
                        spec.task_type.name()
                    )));
                }
            };
            out.push(example);
        }
    }
    Ok(out)
}

/// Disjoint train/test splits drawn from one generation pass.
pub fn generate_splits(
    suite: &TaskSuite,
    seed: u64,
    n_train_per_task: usize,
    n_test_per_task: usize,
    max_seq_len: usize,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let per_task = n_train_per_task + n_test_per_task;
    let all = generate_dataset(suite, seed, per_task, max_seq_len)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for chunk in all.chunks(per_task) {
        // Round-robin labels: a contiguous test block keeps labels balanced too.
        let (tr, te) = chunk.split_at(n_train_per_task);
        train.extend_from_slice(tr);
        test.extend_from_slice(te);
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_on_hand_cases() {
        assert_eq!(cls_oracle("pos pos neg"), "positive");
        assert_eq!(cls_oracle("neg the neg pos"), "negative");
        assert_eq!(nli_oracle(&["a", "b", "c"], &["a", "b"]), "entailment");
        assert_eq!(nli_oracle(&["a"], &["b"]), "contradiction");
        assert_eq!(nli_oracle(&["a", "b"], &["b", "c"]), "neutral");
        assert_eq!(gen_oracle("c a b"), "b a c");
    }

    #[test]
    fn prompt_format() {
        let suite = TaskSuite::default();
        let ex = suite.format_with_prompt(0, "pos neg pos", "positive", 64).unwrap();
        let t = &suite.tokenizer;
        assert_eq!(ex.input_ids[0], t.start_id());
        assert_eq!(ex.input_ids[1], t.id("classify:").unwrap());
        assert_eq!(*ex.target_ids.last().unwrap(), t.eos_id());
        assert_eq!(t.decode(&ex.input_ids[1..]), "classify: pos neg pos");
        assert!(matches!(
            suite.format_with_prompt(0, "pos neg pos the the", "positive", 4),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            suite.format_with_prompt(0, "pos walrus", "positive", 64),
            Err(Error::Tokenization(_))
        ));
    }

    #[test]
    fn generated_data_is_separable_balanced_and_deterministic() {
        let suite = TaskSuite::default();
        let a = generate_dataset(&suite, 5, 61, 64).unwrap();
        let b = generate_dataset(&suite, 5, 61, 64).unwrap();
        assert_eq!(a, b);
        for (task_id, spec) in suite.specs.iter().enumerate() {
            let exs: Vec<_> = a.iter().filter(|e| e.task_id == task_id).collect();
            assert_eq!(exs.len(), 61);
            for e in &exs {
                assert_eq!(oracle_answer(spec.task_type, &e.raw_input), e.raw_target);
            }
            if !spec.labels.is_empty() {
                let counts: Vec<usize> = spec
                    .labels
                    .iter()
                    .map(|l| exs.iter().filter(|e| &e.raw_target == l).count())
                    .collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{counts:?}");
            }
        }
        let c = generate_dataset(&suite, 6, 61, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn exhausted_space_is_a_generation_error() {
        let mut suite = TaskSuite::default();
        suite.specs[2].vocab_subset = vec!["0".into(), "1".into()];
        suite.specs[2].min_len = 4;
        suite.specs[2].max_len = 4;
        // Only 2^4 = 16 distinct bodies exist.
        assert!(matches!(generate_dataset(&suite, 1, 17, 64), Err(Error::Generation(_))));
        assert!(generate_dataset(&suite, 1, 16, 64).is_ok());
    }

    #[test]
    fn splits_are_disjoint() {
        let suite = TaskSuite::default();
        let (train, test) = generate_splits(&suite, 3, 20, 7, 64).unwrap();
        assert_eq!(train.len(), 60);
        assert_eq!(test.len(), 21);
        let seen: HashSet<_> = train.iter().map(|e| &e.raw_input).collect();
        assert!(test.iter().all(|e| !seen.contains(&e.raw_input)));
    }
}
