//! Accuracy, Rouge-L, composite score, dataset evaluation and task-weight export.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, TaskSuite, TaskType};
use crate::error::{Error, Result};
use crate::mta::Stage;
use crate::transformer::Model;

/// Examples decoded together per work item. Fixed so results never depend on
/// the thread count.
pub const EVAL_CHUNK: usize = 32;

/// Percentage of predictions equal to their gold string after trimming.
pub fn exact_match_accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} references",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty list".into()));
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref().trim() == g.as_ref().trim())
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (β = 1) between token lists, scaled to [0, 100].
pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(reference, hypothesis);
    if lcs == 0 {
        return 0.0;
    }
    // 2PR/(P+R) reduces to 2·lcs/(|ref|+|hyp|), which rounds the same either way round.
    100.0 * 2.0 * lcs as f64 / (reference.len() + hypothesis.len()) as f64
}

/// Rouge-L on whitespace-split strings.
pub fn rouge_l_str(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    rouge_l(&r, &h)
}

pub fn composite_score(cls: f64, nli: f64, gen: f64) -> f64 {
    (cls + nli + gen) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub cls: f64,
    pub nli: f64,
    pub gen: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub task: String,
    pub input: String,
    pub gold: String,
    pub prediction: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Scores,
    pub examples: Vec<ExampleRecord>,
}

/// Scores decoded predictions against their examples: accuracy for the
/// classification and inference families, mean Rouge-L for generation.
pub fn score_predictions(suite: &TaskSuite, examples: &[Example], predictions: &[String]) -> Result<EvalReport> {
    if examples.len() != predictions.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let mut family: [(f64, usize); 3] = [(0.0, 0); 3];
    let mut records = Vec::with_capacity(examples.len());
    for (ex, pred) in examples.iter().zip(predictions) {
        let spec = suite
            .specs
            .get(ex.task_id)
            .ok_or_else(|| Error::Evaluation(format!("unknown task id {}", ex.task_id)))?;
        let (slot, score) = match spec.task_type {
            TaskType::Cls => (0, exact_match_accuracy(&[pred], &[&ex.raw_target])?),
            TaskType::Nli => (1, exact_match_accuracy(&[pred], &[&ex.raw_target])?),
            TaskType::Gen => (2, rouge_l_str(&ex.raw_target, pred)),
        };
        family[slot].0 += score;
        family[slot].1 += 1;
        records.push(ExampleRecord {
            task: spec.task_type.name().to_string(),
            input: ex.raw_input.clone(),
            gold: ex.raw_target.clone(),
            prediction: pred.clone(),
            score,
        });
    }
    let mut means = [0.0; 3];
    for (i, t) in [TaskType::Cls, TaskType::Nli, TaskType::Gen].into_iter().enumerate() {
        let (sum, n) = family[i];
        if n == 0 {
            return Err(Error::Evaluation(format!("dataset has no {} examples", t.name())));
        }
        means[i] = sum / n as f64;
    }
    Ok(EvalReport {
        scores: Scores {
            cls: means[0],
            nli: means[1],
            gen: means[2],
            composite: composite_score(means[0], means[1], means[2]),
        },
        examples: records,
    })
}

/// Greedy-decodes every example under its own task id and scores the result.
pub fn evaluate(
    model: &Model,
    suite: &TaskSuite,
    data: &[Example],
    stage: Stage,
    max_new: usize,
) -> Result<EvalReport> {
    let decoded: Vec<Vec<Vec<usize>>> = data
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let inputs: Vec<(&[usize], usize)> = chunk.iter().map(|e| (e.input_ids.as_slice(), e.task_id)).collect();
            model.greedy_decode_batch(&inputs, stage, max_new)
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<String> = decoded
        .iter()
        .flatten()
        .map(|ids| suite.tokenizer.decode_output(ids))
        .collect();
    score_predictions(suite, data, &predictions)
}

/// Writes `task_weights_layer{i}.csv` per MTA layer: a header of adapter
/// indices, then one row of `softmax_T(W[t])` per task type.
pub fn export_task_weights(model: &Model, dir: &Path) -> Result<Vec<PathBuf>> {
    if !model.has_mta() {
        return Err(Error::Export("model has no MTA layers".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (layer_idx, layer) in model.mta_layers() {
        let rows = layer.task_weight_distribution(model.params())?;
        let path = dir.join(format!("task_weights_layer{layer_idx}.csv"));
        let export_err = |e: csv::Error| Error::Export(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(export_err)?;
        w.write_record((0..layer.config().n_adapters).map(|i| i.to_string()))
            .map_err(export_err)?;
        for row in &rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(export_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a task-weight CSV back into rows.
pub fn read_task_weights(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Export(format!("{}: {e}", path.display())),
    })?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Export(e.to_string()))?;
            rec.iter()
                .map(|f| f.parse::<f64>().map_err(|e| Error::Export(format!("{f:?}: {e}"))))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, oracle_answer};
    use crate::transformer::ModelConfig;

    #[test]
    fn accuracy_examples() {
        assert_eq!(exact_match_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 100.0);
        assert_eq!(exact_match_accuracy(&["positive"], &["negative"]).unwrap(), 0.0);
        assert_eq!(
            exact_match_accuracy(&["a", "b", "c", "x"], &["a", "b", "c", "d"]).unwrap(),
            75.0
        );
        assert_eq!(exact_match_accuracy(&[" a "], &["a"]).unwrap(), 100.0);
        let empty: [&str; 0] = [];
        assert!(matches!(
            exact_match_accuracy(&empty, &empty),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn rouge_hand_cases() {
        assert_eq!(rouge_l_str("a b c", "a b c"), 100.0);
        assert!((rouge_l_str("the cat sat", "the cat") - 80.0).abs() < 1e-9);
        assert_eq!(rouge_l_str("a b", "c d"), 0.0);
        assert_eq!(rouge_l_str("", "c d"), 0.0);
        assert_eq!(rouge_l_str("a", ""), 0.0);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_score(100.0, 100.0, 100.0), 100.0);
        assert_eq!(composite_score(0.0, 0.0, 60.0), 20.0);
    }

    #[test]
    fn oracle_predictions_score_100() {
        let suite = TaskSuite::default();
        let data = generate_dataset(&suite, 1, 10, 64).unwrap();
        let preds: Vec<String> = data
            .iter()
            .map(|e| oracle_answer(suite.specs[e.task_id].task_type, &e.raw_input))
            .collect();
        let rep = score_predictions(&suite, &data, &preds).unwrap();
        assert_eq!(rep.scores.composite, 100.0);
        assert_eq!(rep.examples.len(), data.len());
    }

    #[test]
    fn missing_family_is_named() {
        let suite = TaskSuite::default();
        let data: Vec<Example> = generate_dataset(&suite, 1, 4, 64)
            .unwrap()
            .into_iter()
            .filter(|e| suite.specs[e.task_id].task_type != TaskType::Nli)
            .collect();
        let preds = vec![String::new(); data.len()];
        match score_predictions(&suite, &data, &preds) {
            Err(Error::Evaluation(m)) => assert!(m.contains("nli"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_covers_dataset() {
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let model = Model::build(cfg, 0).unwrap();
        let suite = TaskSuite::default();
        let data = generate_dataset(&suite, 3, 12, 64).unwrap();
        let a = evaluate(&model, &suite, &data, Stage::One, 8).unwrap();
        let b = evaluate(&model, &suite, &data, Stage::One, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.examples.len(), data.len());
        for s in [a.scores.cls, a.scores.nli, a.scores.gen, a.scores.composite] {
            assert!((0.0..=100.0).contains(&s));
        }
    }

    #[test]
    fn fresh_export_matches_closed_form() {
        let model = Model::build(ModelConfig::default(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_task_weights(&model, dir.path()).unwrap();
        assert_eq!(paths.len(), 1);
        assert!(paths[0].ends_with("task_weights_layer1.csv"));
        let header = fs::read_to_string(&paths[0]).unwrap();
        assert!(header.starts_with("0,1,2\n"));
        let rows = read_task_weights(&paths[0]).unwrap();
        // softmax([1/3, 1/3, 2/3] / 0.3) evaluated independently
        let e = (1.0f64 / 0.9).exp();
        let big = e / (e + 2.0);
        let small = 1.0 / (e + 2.0);
        for (t, row) in rows.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, &v) in row.iter().enumerate() {
                let want = if a == t { big } else { small };
                assert!((v - want).abs() < 1e-12, "{v} vs {want}");
            }
        }
        assert!((big - 0.6030).abs() < 1e-4 && (small - 0.1985).abs() < 1e-4);
    }

    #[test]
    fn export_without_mta_fails() {
        let cfg = ModelConfig {
            mta_layer_indices: vec![],
            ..ModelConfig::default()
        };
        let model = Model::build(cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_task_weights(&model, dir.path()), Err(Error::Export(_))));
    }
}
