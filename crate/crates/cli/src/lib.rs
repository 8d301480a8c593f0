//! Config-driven driver for the four experiment kinds (dense/sparse STL,
//! dense MTL, LOMT) and their reports.

pub mod config;
pub mod pipeline;
pub mod report;

use std::path::Path;

use serde_json::json;

pub use config::{load, ConfigError, ExperimentConfig, ExperimentKind, LoadedConfig};
pub use pipeline::{run, Step};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_ALL_ZERO: i32 = 4;

/// Maps an error chain onto the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<lomt_core::Error>() {
            return match e {
                lomt_core::Error::Divergence { .. } => EXIT_DIVERGENCE,
                lomt_core::Error::AllZeroPattern => EXIT_ALL_ZERO,
                lomt_core::Error::UnknownTask(_) | lomt_core::Error::DuplicateTask(_) | lomt_core::Error::UnknownTap(_) => {
                    EXIT_CONFIG
                }
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

/// Machine-readable failure description.
pub fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let code = exit_code(err);
    let kind = match code {
        EXIT_CONFIG => "config",
        EXIT_DIVERGENCE => "divergence",
        EXIT_ALL_ZERO => "all-zero-sparsity",
        _ => "failure",
    };
    let field = err
        .chain()
        .find_map(|c| c.downcast_ref::<ConfigError>())
        .map(|c| c.field.clone());
    json!({
        "exit_code": code,
        "kind": kind,
        "field": field,
        "message": format!("{err:#}"),
    })
}

/// Writes `error.json` into `dir` if it can; failures here are ignored.
pub fn write_error_record(dir: &Path, err: &anyhow::Error) {
    if std::fs::create_dir_all(dir).is_ok() {
        let mut text = serde_json::to_string_pretty(&error_record(err)).unwrap_or_default();
        text.push('\n');
        let _ = std::fs::write(dir.join("error.json"), text);
    }
}
