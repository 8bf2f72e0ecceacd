//! Pooled testing of Bernoulli samples: simulation over random integer
//! partitions, large-deviation rate functions, prevalence estimation from
//! pool positivity and exact oracles for all of them.

pub mod error;
pub mod ext;
pub mod measures;
pub mod optimize;
pub mod partitions;
pub mod rates;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
pub use ext::ExtReal;
pub use measures::{BinaryMeasure, PoolHistogram, PoolLaw, PoolType};
pub use optimize::{ContractionProblem, ContractionSolution, SolveStatus};
pub use partitions::Partition;
pub use rates::{CgfVariant, RateParams};
pub use simulate::{PoolingMode, SimConfig, TrialRecord};
pub use verify::ConvergenceRow;
