use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

/// A set of output files written to temporaries and renamed into place together.
///
/// Dropping the set without [`OutputSet::commit`] deletes the temporaries, so a failed
/// command leaves no partial outputs behind.
pub struct OutputSet {
    dir: PathBuf,
    pending: Vec<(PathBuf, PathBuf)>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            pending: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let target = self.path(name);
        let tmp = self.dir.join(format!(".{name}.tmp-{}", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        self.pending.push((tmp.clone(), target.clone()));
        f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
        Ok(target)
    }

    /// Renames every staged file into place. On failure, files already moved are removed.
    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let pending = std::mem::take(&mut self.pending);
        let mut done = Vec::with_capacity(pending.len());
        for (i, (tmp, target)) in pending.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, target) {
                for t in &done {
                    let _ = fs::remove_file(t);
                }
                for (rest, _) in &pending[i..] {
                    let _ = fs::remove_file(rest);
                }
                return Err(CliError::io(target, e));
            }
            done.push(target.clone());
        }
        Ok(done)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = fs::remove_file(tmp);
        }
    }
}
