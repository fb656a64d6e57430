use std::io::Write;

use serde::Serialize;

use crate::config::{ExperimentConfig, Format};
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct JsonReport<'a, R: Serialize> {
    schema_version: u32,
    tool: String,
    command: &'a str,
    config: &'a ExperimentConfig,
    rows: &'a [R],
}

fn tool() -> String {
    format!("axcv {}", env!("CARGO_PKG_VERSION"))
}

/// Render tabular rows. CSV output starts with `#` comment lines holding the
/// schema version and the full configuration.
pub fn render_rows<R: Serialize>(cfg: &ExperimentConfig, rows: &[R]) -> CliResult<Vec<u8>> {
    match cfg.format {
        Format::Json => render_json(&JsonReport {
            schema_version: SCHEMA_VERSION,
            tool: tool(),
            command: &cfg.command,
            config: cfg,
            rows,
        }),
        Format::Csv => {
            let mut out = Vec::new();
            writeln!(out, "# schema_version: {SCHEMA_VERSION}")?;
            writeln!(out, "# tool: {}", tool())?;
            writeln!(out, "# command: {}", cfg.command)?;
            writeln!(out, "# rng: {}", cfg.rng)?;
            writeln!(out, "# config: {}", to_json_line(cfg)?)?;
            let mut w = csv::Writer::from_writer(&mut out);
            for row in rows {
                w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
            }
            w.flush()?;
            drop(w);
            Ok(out)
        }
    }
}

pub fn render_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn to_json_line<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string(value).map_err(|e| CliError::Io(e.to_string()))
}

pub fn header(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "tool": tool(),
        "command": cfg.command,
        "config": cfg,
    })
}

/// Write a finished report to `--out` or standard output.
pub fn emit(cfg: &ExperimentConfig, bytes: &[u8]) -> CliResult<()> {
    match &cfg.out {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}
