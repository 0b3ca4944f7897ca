//! Verifiable-reward fine-tuning toolkit: response grammar, rule-based
//! detection and classification rewards, a GRPO optimizer over tabular
//! policies, a toy environment, and COCO-style detection evaluation.

pub mod data_io;
pub mod eval;
pub mod grammar;
pub mod grpo;
pub mod reward;
pub mod toy;
