//! Atomic file replacement and the run-directory lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers see either the old or the new contents.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let ctx = || path.display().to_string();
    let mut f = File::create(&tmp).map_err(CliError::io(ctx()))?;
    f.write_all(bytes).map_err(CliError::io(ctx()))?;
    f.sync_all().map_err(CliError::io(ctx()))?;
    drop(f);
    fs::rename(&tmp, path).map_err(CliError::io(ctx()))
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn holder_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

impl RunLock {
    /// Takes `dir/.lock`. A lock left by a process that no longer exists
    /// is taken over.
    pub fn acquire(dir: &Path) -> Result<RunLock, CliError> {
        let path = dir.join(".lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(CliError::io(path.display().to_string()))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if !holder_alive(pid) => {
                            let _ = fs::remove_file(&path);
                        }
                        _ => return Err(CliError::Locked(dir.display().to_string())),
                    }
                }
                Err(e) => return Err(CliError::io(path.display().to_string())(e)),
            }
        }
        Err(CliError::Locked(dir.display().to_string()))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
