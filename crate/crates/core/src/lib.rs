//! Contrastive training of a small disentangling network on top of frozen
//! text-encoder embeddings, using style-augmented prompt pairs, plus the
//! evaluation and synthetic-identifiability tooling around it.

pub mod causalsim;
pub mod config;
pub mod dnet;
pub mod embstore;
pub mod error;
pub mod evalkit;
pub mod fsio;
pub mod ndcore;
pub mod optim;
pub mod pairgrad;
pub mod promptgen;
pub mod trainer;

pub use error::{Error, Result};
