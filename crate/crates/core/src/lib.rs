//! Multi-objective image retrieval: lexical satisfaction vectors prune the
//! corpus, a per-subquery vision adapter scores the survivors, and a grid of
//! scalarizations recovers the Pareto set.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub mod generation;
pub mod joint;
pub mod query;
pub mod sparse;
pub mod tensor;
pub mod text;

pub use adapter::{adapter_forward, AdapterConfig, AdapterParams};
pub use corpus::{load_corpus, Corpus, FeatureMatrix, FeatureSource, ImageRecord};
pub use dense::{rank_dense, DenseScore, ScoreTable, SubqueryScorer};
pub use error::{Error, Result};
pub use generation::{build_prompt, GenerationPrompt, MllmClient};
pub use joint::{joint_retrieve, pareto_oracle, JointOptions, ParetoResult, WeightVector};
pub use query::{Query, Subquery};
pub use sparse::SatisfactionVector;
pub use text::MatchOptions;
