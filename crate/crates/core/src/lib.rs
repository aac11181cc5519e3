//! Toy n-gram laboratory for LLM watermark radioactivity under distillation,
//! watermark stealing, and the removal attacks built on it.

pub mod attacks;
pub mod base;
pub mod config;
pub mod detect;
pub mod error;
pub mod hashing;
pub mod lm;
pub mod pipeline;
pub mod schemes;
pub mod steal;

pub use base::{Dist, LogitVec, SeedPath, TokenId, TokenSeq, Vocab};
pub use error::{Error, Result};
