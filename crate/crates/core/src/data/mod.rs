//! Synthetic multi-task data: tokenizer, prompted task generators, JSONL files.

pub mod jsonl;
pub mod tasks;
pub mod tokenizer;

pub use jsonl::{read_jsonl, read_meta, read_split, write_dataset, write_jsonl, DatasetMeta};
pub use tasks::{
    cls_oracle, gen_oracle, generate_dataset, generate_splits, nli_oracle, oracle_answer, Example, TaskSpec, TaskSuite,
    TaskType,
};
pub use tokenizer::Tokenizer;
