//! Early detection of students at risk of failing a final examination.
//!
//! The pipeline calibrates a two-parameter logistic IRT model on weekly
//! test responses, follows each student's cumulative ability estimate
//! unit by unit, and predicts the exam outcome from the outcomes of the
//! students with the closest ability trajectories.

pub mod error;
pub mod eval;
pub mod irt;
pub mod knn;
pub mod pipeline;
pub mod response_data;
pub mod synth;
pub mod trends;

pub use error::{Error, Result};
