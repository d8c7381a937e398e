//! Desk-scale toolkit for multi-label emotion text classification.
//!
//! The pipeline: train a byte-pair tokenizer, pretrain a small decoder-only
//! Transformer or mLSTM language model, finetune it with a sigmoid
//! classification head plus an auxiliary language-modeling loss, calibrate
//! per-category decision thresholds on a held-out split, and evaluate with
//! multi-label F1 and Jaccard metrics. An active-learning scorer selects
//! unlabeled examples that rebalance class distributions for the next
//! labeling batch.

pub mod active_learning;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod tokenizer;
pub mod training;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
