pub mod active_set;
pub mod cli;
pub mod diff;
pub mod generators;
pub mod kkt;
pub mod linalg;
pub mod metrics;
pub mod oracles;
pub mod problem;
pub mod solvers;
pub mod sparse;
