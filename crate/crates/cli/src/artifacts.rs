//! Artifact plumbing: atomic writes, in-progress markers, and error-mapped
//! wrappers around the core file formats. Everything written here is
//! byte-stable so identical re-runs produce identical files.

use std::path::{Path, PathBuf};

use sliver_core::windowing::{read_samples, write_samples, LabeledSample};

use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Writes via a temp file and renames, so a crash never leaves a truncated
/// artifact under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic_with(path, |tmp| {
        std::fs::write(tmp, bytes).map_err(|e| io_err(tmp, e))
    })
}

/// Like [`write_atomic`] for writers that need a path (core's file writers).
pub fn write_atomic_with(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut name = path
        .file_name()
        .ok_or_else(|| CliError::Runtime(format!("not a file path: {}", path.display())))?
        .to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    match write(&tmp) {
        Ok(()) => std::fs::rename(&tmp, path).map_err(|e| io_err(path, e)),
        Err(e) => {
            std::fs::remove_file(&tmp).ok();
            Err(e)
        }
    }
}

/// Marks a subcommand's output as in progress. The marker is removed only on
/// success; a leftover marker means the directory holds incomplete output.
pub struct IncompleteMarker {
    path: PathBuf,
}

impl IncompleteMarker {
    pub fn start(out_dir: &Path, subcommand: &str) -> Result<IncompleteMarker, CliError> {
        let path = out_dir.join(format!(".{subcommand}.incomplete"));
        std::fs::write(&path, b"").map_err(|e| io_err(&path, e))?;
        Ok(IncompleteMarker { path })
    }

    pub fn finish(self) -> Result<(), CliError> {
        std::fs::remove_file(&self.path).map_err(|e| io_err(&self.path, e))
    }
}

pub fn write_labels(path: &Path, samples: &[LabeledSample]) -> Result<(), CliError> {
    write_atomic_with(path, |tmp| write_samples(tmp, samples).map_err(|e| io_err(tmp, e)))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledSample>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; run `sliver label` for that paradigm first",
            path.display()
        )));
    }
    read_samples(path).map_err(|e| io_err(path, e))
}
