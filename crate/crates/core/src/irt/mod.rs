//! Two-parameter logistic item response model.

mod calibrate;
mod estimate;
mod model;

pub use calibrate::{calibrate, CalibrationConfig, CalibrationResult, ItemFlag, IterationRecord};
pub use estimate::{estimate_abilities, AbilityFlag, AbilityVector};
pub use model::{gradient, icc, log_likelihood, Bounds, Gradient, ItemParameters, SCALE};
