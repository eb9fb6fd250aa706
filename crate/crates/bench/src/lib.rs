//! Benchmark harness: point generators, the run driver and report output.

pub mod dist;
pub mod report;
pub mod run;

pub use dist::{generate_points, DistKind, Distribution};
pub use report::{emit_report, Format, RunReport};
pub use run::{run_benchmark, Args};
