//! Numerical verification: a small dense network trained sequentially and
//! through a partition plan, with gradient checks and a seeded random suite.

pub mod data;
pub mod matrix;
pub mod net;
pub mod partitioned;
pub mod suite;

pub use matrix::{Matrix, MatrixParseError};
pub use net::{Activation, Batch, LossKind, TinyNet, TrainConfig, VerifyError};
pub use partitioned::{train_partitioned, PartitionedOptions, PartitionedRun};
pub use suite::{random_instance, run_suite, SuiteOptions, SuiteReport};
