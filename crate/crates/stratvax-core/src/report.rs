//! Machine-readable warnings shared across modules.

use serde::{Deserialize, Serialize};

/// A non-fatal condition encountered during estimation. Warnings never change
/// results silently: each records what was adjusted and by how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    /// Stable machine-readable code (e.g. `"monotonicity_clamp"`).
    pub code: String,
    /// Human-readable detail.
    pub message: String,
}

impl Warning {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Warning {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

/// Warning codes used by this crate.
pub mod codes {
    /// Empirical monotonicity violation: `ρ̄₀ < ρ̄₁`; Protected mass clamped to 0.
    pub const MONOTONICITY_CLAMP: &str = "monotonicity_clamp";
    /// Trimming fraction fell outside `[0,1]` and was clamped.
    pub const TRIM_CLAMP: &str = "trim_clamp";
    /// IRLS did not reach the score tolerance within the iteration cap.
    pub const NON_CONVERGENCE: &str = "non_convergence";
    /// A fitted probability was truncated away from 0 or 1.
    pub const PREDICTION_TRUNCATED: &str = "prediction_truncated";
    /// Joint monotone fit produced a positive vaccine coefficient; clamped to 0.
    pub const MONOTONE_COEF_CLAMP: &str = "monotone_coef_clamp";
    /// A bootstrap replicate was redrawn or abandoned due to an empty cell.
    pub const BOOTSTRAP_RETRY: &str = "bootstrap_retry";
    /// A replication-study replicate failed estimation and was excluded.
    pub const REPLICATE_FAILED: &str = "replicate_failed";
    /// An empirical cell needed by a statistic was empty.
    pub const EMPTY_CELL: &str = "empty_cell";
}
