pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod kv;
pub mod masking;
pub mod metrics;
pub mod optim;
pub mod presets;
pub mod pretrain;
pub mod schedule;
pub mod seeding;
pub mod tokenizer;

pub use error::{Error, Result};
