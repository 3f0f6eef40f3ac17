//! Run configuration file: model, MTA, training and data settings in one
//! JSON document. Every field has a default and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_splits, read_meta, read_split, Example, TaskSuite};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::train::TrainConfig;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train_per_task: usize,
    pub n_test_per_task: usize,
    /// Directory holding `train.jsonl` / `test.jsonl`; generated in memory when absent.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train_per_task: 2000,
            n_test_per_task: 200,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Top-level seed; data, init, batching and dropout seeds derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Train and test splits plus the suite that produced them.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub suite: TaskSuite,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub fingerprint: String,
}

impl RunConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.train.violations());
        if self.data.n_train_per_task == 0 {
            v.push("data.n_train_per_task must be at least 1".into());
        }
        if self.data.n_test_per_task == 0 {
            v.push("data.n_test_per_task must be at least 1".into());
        }
        let suite = TaskSuite::default();
        if self.model.vocab_size != suite.tokenizer.vocab_size() {
            v.push(format!(
                "model.vocab_size is {} but the task vocabulary has {} words",
                self.model.vocab_size,
                suite.tokenizer.vocab_size()
            ));
        }
        if self.model.mta.num_task_types != suite.specs.len() {
            v.push(format!(
                "model.mta.num_task_types is {} but the task suite has {} task types",
                self.model.mta.num_task_types,
                suite.specs.len()
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    /// Reads the configured dataset directory, or generates splits from the
    /// data seed when none is set.
    pub fn datasets(&self) -> Result<Datasets> {
        let suite = TaskSuite::default();
        let max_len = self.model.max_seq_len;
        let (train, test) = match &self.data.dir {
            Some(dir) => {
                let meta = read_meta(dir)?;
                if meta.fingerprint != suite.fingerprint() {
                    return Err(Error::Config(vec![format!(
                        "dataset {} was generated by a different task suite",
                        dir.display()
                    )]));
                }
                (
                    read_split(dir, "train", &suite, max_len)?,
                    read_split(dir, "test", &suite, max_len)?,
                )
            }
            None => generate_splits(
                &suite,
                self.data_seed(),
                self.data.n_train_per_task,
                self.data.n_test_per_task,
                max_len,
            )?,
        };
        let fingerprint = suite.fingerprint();
        Ok(Datasets {
            suite,
            train,
            test,
            fingerprint,
        })
    }
}
