//! The `e11` pipeline driver: configuration, stage execution, manifests and
//! report emission.

// `!(a > b)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod exit;
pub mod report;
pub mod stages;
pub mod workspace;

pub use config::{Loaded, Overrides, PipelineConfig};
pub use exit::{Failure, Kind};
pub use report::{emit_report, ReportKind};
pub use stages::run_stage;
pub use workspace::Stage;
