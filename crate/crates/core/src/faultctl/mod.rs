//! Fault-injection harness behind the `phoenix` command line: scenario
//! files, the shadow oracle, the workload runner and benchmarks.

pub mod bench;
pub mod offline;
pub mod oracle;
pub mod runner;
pub mod scenario;

pub use offline::{inject, verify_store, Finding, VerifyReport};
pub use oracle::{Effect, ImageShadow, LogicalOracle, LogicalState};
pub use runner::{CrashImage, RunReport, Runner};
pub use scenario::{CrashPoint, Mix, Scenario};
