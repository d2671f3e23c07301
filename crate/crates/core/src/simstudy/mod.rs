//! Simulation studies: data generation, replication and summaries.

pub mod dgp;
pub mod runner;
pub mod summary;

pub use runner::{read_raw_csv, run_replications, write_raw_csv, RawRow, Study, StudyConfig};
pub use summary::{format_table, summarize, write_summary_csv, SummaryRow};
