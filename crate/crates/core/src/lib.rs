//! Self-interpretable link prediction on continuous-time dynamic graphs.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod confounders;
pub mod diagnostics;
pub mod error;
pub mod explain;
pub mod extract;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod ood;
pub mod params;
pub mod planted;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SigError};
pub use params::{ParamId, ParameterSet};
pub use tensor::Tensor;
