//! Single-writer rule for run directories: a `.lock` file created
//! exclusively and holding the owner's pid. A lock whose owner process no
//! longer exists is stale and may be taken over.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{PipelineError, Result};

pub const LOCK_FILE: &str = ".lock";

#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| PipelineError::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if !is_stale(&path) {
                        return Err(PipelineError::Locked(dir.to_path_buf()));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(PipelineError::io(&path, e)),
            }
        }
        Err(PipelineError::Locked(dir.to_path_buf()))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Only decidable where `/proc` exists; elsewhere every lock is live.
fn is_stale(path: &Path) -> bool {
    if !Path::new("/proc/self").exists() {
        return false;
    }
    match fs::read_to_string(path).ok().and_then(|s| s.trim().parse::<u32>().ok()) {
        Some(pid) => !Path::new(&format!("/proc/{pid}")).exists(),
        // Unreadable or half-written: the owner may still be writing it.
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_holder_is_rejected_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(first);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn lock_of_a_dead_process_is_taken_over() {
        if !Path::new("/proc/self").exists() {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        // Pid beyond the kernel's maximum never exists.
        fs::write(dir.path().join(LOCK_FILE), "4294967295").unwrap();
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
