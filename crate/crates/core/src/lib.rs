//! Desk-scale laboratory for image/video gradient conflict under
//! frame-budgeted video fine-tuning.
//!
//! * [`objectives`]: quadratic image objective and the budget-parameterised
//!   stochastic video gradient field.
//! * [`analysis`]: alignment, step-size bounds and the threshold and
//!   minimal-budget verifiers.
//! * [`trainer`]: multi-step gradient simulation under frame-budget policies.
//! * [`allocator`]: per-sample frame-budget allocation (rule-based,
//!   embedding similarity, remote predictor).
//! * [`pipeline`]: experiment configs, orchestration and report files.

pub mod allocator;
pub mod analysis;
pub mod budget;
pub mod error;
pub mod linalg;
pub mod objectives;
pub mod pipeline;
pub mod stream;
pub mod synth;
pub mod trainer;

pub use budget::{BudgetSet, FrameBudget};
pub use error::{Error, Result};
pub use objectives::{AlphaSchedule, ConflictModel, ConflictModelConfig, NoiseModel, ParamVector, QuadraticObjective};

/// Crate version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
