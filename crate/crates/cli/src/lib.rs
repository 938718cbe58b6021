//! Command-line front end: configuration, task execution, records and
//! reports.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod record;
pub mod run;

use thiserror::Error;

use record::{Check, ErrorRecord, ResultRecord, SCHEMA_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("invalid configuration: {}", .0.join("; "))]
    ConfigInvalid(Vec<String>),
    #[error("task failed: {0}")]
    TaskFailed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::TaskFailed(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid(_) => "ConfigInvalid",
            CliError::TaskFailed(_) => "TaskFailed",
            CliError::Io(_) => "Io",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            schema_version: SCHEMA_VERSION,
            kind: self.kind().to_string(),
            message: self.to_string(),
            violations: match self {
                CliError::ConfigInvalid(v) => v.clone(),
                _ => vec![],
            },
        }
    }
}

fn check_line(c: &Check) -> String {
    format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)
}

/// Human-readable summary of a record: one PASS/FAIL line per check and a
/// tally.
pub fn emit_report(record: &ResultRecord) -> String {
    let mut out = format!("task {} (seed {})\n", record.task, record.seed);
    for c in &record.checks {
        out.push_str(&check_line(c));
        out.push('\n');
    }
    let failed = record.checks.iter().filter(|c| !c.passed).count();
    out.push_str(&format!("{} checks, {} failed", record.checks.len(), failed));
    if !record.tables.is_empty() {
        out.push_str(&format!("; tables: {}", record.tables.join(", ")));
    }
    out.push('\n');
    out
}
