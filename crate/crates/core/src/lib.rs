//! Two-phase explanation generation for false statements: generate correct
//! instantiations of the statement, then prompt a language model with them
//! to explain what is wrong.
//!
//! Module map:
//! * [`corpus`] loads ComVE, e-SNLI and OMCS data;
//! * [`gateway`] is the single access point to language-model capabilities;
//! * [`icl`] and [`cgmh`] produce instantiations (phase I);
//! * [`retrieve`] provides the retrieval and random baselines;
//! * [`explain`] renders phase II prompts and collects explanations;
//! * [`metrics`] scores explanations against references;
//! * [`evalsvc`] runs blind human evaluation sessions;
//! * [`pipeline`] wires everything into reproducible runs.

pub mod cgmh;
pub mod corpus;
pub mod evalsvc;
pub mod explain;
pub mod gateway;
pub mod icl;
pub mod instantiation;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod retrieve;
pub mod scalar;
pub mod text;

pub use scalar::Scalar;

/// Default floating-point scalar for scores and embeddings.
pub type Real = f64;
/// ROUGE-1/2/L at the default precision.
pub type Rouge = metrics::RougeScores<Real>;
/// Single-precision ROUGE, for memory-bound sweeps.
pub type Rouge32 = metrics::RougeScores<f32>;
/// Exact agreement statistic; `fleiss_kappa::<Kappa>` avoids rounding.
pub type Kappa = num_rational::Ratio<i128>;
