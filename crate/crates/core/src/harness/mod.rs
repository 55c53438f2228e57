//! Workload generation, file formats and the simulation driver.

pub mod sim;
pub mod workload;
pub mod xml;

pub use sim::{compare, run, run_observed, RunOptions, RunResult, RunSummary, SimError};
pub use workload::{generate, ArrivalModel, LaxityDist, WorkloadSpec};
pub use xml::{read_workload_xml, write_workload_xml, XmlError};
