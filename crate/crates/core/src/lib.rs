//! Distance-conditioned model averaging for discrete choice.
//!
//! Heterogeneous sub-models (nested/multinomial logit, decision field theory,
//! a softmax MLP and Newton-boosted trees) are estimated on an inner distance
//! band. A gate network conditioned on trip distance then learns how much
//! weight each sub-model deserves, including outside the band the sub-models
//! saw, and the averaged predictions are evaluated per distance segment.

pub mod averaging;
pub mod choice;
pub mod data;
pub mod dft;
pub mod error;
pub mod harness;
pub mod ml;
pub mod nn;
pub mod optim;
pub mod par;
pub mod seed;
pub mod table;

pub use error::{Error, Result};
pub use par::Exec;
