//! Machine-readable run reports: what went in, what came out, and digests
//! of both. Reports carry no timestamps so repeated runs are byte-identical.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_digest: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub metrics: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// `path` relative to `base` when it lies underneath, else as given.
fn display_path(path: &Path, base: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    rel.to_string_lossy().replace('\\', "/")
}

fn digests(paths: &[PathBuf], base: &Path) -> Result<Vec<FileDigest>> {
    let mut out = paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: display_path(p, base),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out.dedup();
    Ok(out)
}

impl RunReport {
    pub fn new(command: impl Into<String>, config_digest: String) -> Self {
        Self {
            tool: "cdistool",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config_digest,
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: serde_json::Value::Object(Default::default()),
        }
    }

    /// Hashes `inputs` and `outputs` and writes the report to `path`.
    /// File paths are recorded relative to the report's directory.
    pub fn write(mut self, inputs: &[PathBuf], outputs: &[PathBuf], path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let canon_base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        let canon = |ps: &[PathBuf]| -> Vec<PathBuf> {
            ps.iter().map(|p| std::fs::canonicalize(p).unwrap_or_else(|_| p.clone())).collect()
        };
        self.inputs = digests(&canon(inputs), &canon_base)?;
        self.outputs = digests(&canon(outputs), &canon_base)?;
        let text = serde_json::to_string_pretty(&self).expect("report serializes") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
