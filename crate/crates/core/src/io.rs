//! CSV output with a trailing provenance comment, written atomically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::tensor::Tensor;

/// Identifies the run a CSV came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl CsvMeta {
    pub fn comment(&self) -> String {
        format!("# config_hash={}, seed={}", self.config_hash, self.seed)
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Renders header, rows and the metadata comment line.
pub fn render_csv<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>], meta: &CsvMeta) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|c| c.as_ref()))?;
    }
    let mut bytes = w.into_inner().map_err(|e| e.into_error())?;
    bytes.extend_from_slice(meta.comment().as_bytes());
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>], meta: &CsvMeta) -> Result<()> {
    write_atomic(path, &render_csv(header, rows, meta)?)
}

/// Samples as one row per point with columns `x0, x1, …`.
pub fn write_samples(path: &Path, samples: &Tensor<f64>, dim: usize, meta: &CsvMeta) -> Result<()> {
    let header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = samples.iter_rows().map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
    write_csv(path, &header, &rows, meta)
}

/// Reads a CSV written by [`write_csv`], skipping the comment line.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
