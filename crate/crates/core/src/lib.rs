//! Query-enhanced knowledge-intensive conversation at desk scale.
//!
//! A shared conditional sequence model writes a search query from the
//! dialogue context, a BM25 plus rerank selector finds knowledge for it, and
//! the same model writes the response from that knowledge. Training
//! marginalizes the response likelihood over candidate queries, so no query
//! labels are needed.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod config;
pub mod corpus;
pub mod error;
pub mod index;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod selector;
pub mod synth;
pub mod trainer;
pub mod training_loop;

pub use error::{Error, Result};

pub type FbgModel = model::Fbg<f64>;
pub type FbgModel32 = model::Fbg<f32>;
pub type DefaultSelector<'a> = selector::Selector<'a, f64>;
pub type Instance = trainer::TrainingInstance<f64>;
pub type Outcome = training_loop::RunOutcome<f64>;
