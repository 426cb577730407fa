//! InfoMamba: a selective diagonal state-space model fused with a
//! concept-bottleneck global filter, plus diagnostics that measure when a
//! diagonal SSM can stand in for causal softmax attention.

pub mod attention;
pub mod autodiff;
pub mod boundary;
pub mod concept;
pub mod error;
pub mod experiments;
pub mod extended;
pub mod fusion;
pub mod linalg;
pub mod losses;
pub mod numerics;
pub mod snapshot;
pub mod ssm;

pub use error::{Error, Result};
pub use numerics::{RealMatrix, SeededRng};
