//! JSON report envelope: run metadata (timestamps, wall times) lives in the
//! header; everything under `body` is deterministic for a fixed config and
//! seed, so reports can be compared byte for byte.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Serialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub timestamp_unix: u64,
    pub config: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtimes_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    pub header: Header,
    pub body: T,
}

pub fn header(config: &str, seed: u64) -> Header {
    Header {
        tool: "aqx".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config: config.into(),
        seed,
        runtimes_s: None,
    }
}

pub fn write_json<T: Serialize>(path: &Path, report: &Report<T>) -> Result<()> {
    let text = serde_json::to_string_pretty(report).context("serializing report")?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Resolve an output path against the optional output-directory override.
pub fn out_path(path: &Path) -> std::path::PathBuf {
    match std::env::var_os("AQX_OUTPUT_DIR") {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Write simple CSV rows (no quoting needed for numeric traces).
pub fn write_csv(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut text = columns.join(",");
    text.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
