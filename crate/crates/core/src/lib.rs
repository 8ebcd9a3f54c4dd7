//! Cost-aware evasion attacks and defenses for tabular binary classifiers.
//!
//! The crate models tabular feature spaces with per-feature change costs,
//! searches for low-cost adversarial examples with best-first graph search,
//! and hardens models with projection-based adversarial training. See the
//! workspace README for the end-to-end tooling built on top.

pub mod advtrain;
pub mod cost;
pub mod domain;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod projection;
pub mod scenario;
pub mod search;
pub mod synth;

pub use error::{Error, Result};
