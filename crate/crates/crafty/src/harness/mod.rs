//! Workloads, crash fuzzing, and reporting.

pub mod bank;
pub mod btree;
pub mod fuzz;
pub mod report;
pub mod run;
