//! Scores posts against questionnaire items by embedding similarity, factors
//! the item scores, and runs group profiles, joining forecasts and
//! trajectories on the factor scores. Generic over `f32`/`f64`; the aliases
//! below fix the scalar to [`Real`].

// `!(a > b)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod container;
pub mod corpus;
pub mod efa;
pub mod embedder;
pub mod error;
pub mod forecast;
mod fsutil;
pub mod itembank;
pub mod linalg;
pub mod profiles;
pub mod scalar;
pub mod scorer;
pub mod synth;
pub mod text;
pub mod trend;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
pub use scalar::Scalar;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Scalar used by the pipeline.
pub type Real = f64;

pub type Matrix = linalg::Matrix<Real>;
pub type CorrelationMatrix = efa::CorrelationMatrix<Real>;
pub type EfaModel = efa::EfaModel<Real>;
pub type FactorScoreMatrix = efa::FactorScoreMatrix<Real>;
pub type GroupProfile = profiles::GroupProfile<Real>;
pub type LabeledFeatureSet = forecast::LabeledFeatureSet<Real>;
pub type LogisticModel = forecast::LogisticModel<Real>;
pub type AucCurve = forecast::AucCurve<Real>;
pub type Composite = trend::Composite<Real>;
pub type TrajectorySeries = trend::TrajectorySeries<Real>;

pub type MatrixF32 = linalg::Matrix<f32>;
pub type EfaModelF32 = efa::EfaModel<f32>;
pub type FactorScoreMatrixF32 = efa::FactorScoreMatrix<f32>;
