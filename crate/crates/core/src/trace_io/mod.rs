//! Files: traces (line-delimited JSON), run configs (flat TOML) and reports (JSON).

mod config;
mod traces;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use config::{
    load_config, load_policies_config, load_synth_config, save_config, PoliciesConfig, PolicyKind, RunConfig,
    WeightKind, DEFAULT_LAMBDA, DEFAULT_PATIENCE, DEFAULT_QUORUM, DEFAULT_TAU,
};
pub use traces::{
    load_traces, read_traces, save_traces, write_traces, Mode, TraceFileHeader, TraceReader, TraceRecord,
    FORMAT_VERSION,
};

use crate::error::{Error, Result};

/// Write through a temporary file in the target directory and rename it into
/// place, so a failed write never leaves a partial file at `path`.
pub(crate) fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Save any report as pretty-printed JSON.
pub fn save_report<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = report_to_string(report)?;
    write_atomic(path.as_ref(), |w| w.write_all(text.as_bytes()))
}

pub fn report_to_string<T: Serialize>(report: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Domain(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn load_report<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}
