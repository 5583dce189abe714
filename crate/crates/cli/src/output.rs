//! Output bookkeeping: every file a command writes is recorded so that a
//! failing run can remove what it already produced.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use conesrecon::io::write_atomic;

/// A failed stage and its cause.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.message)
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

pub trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T, E: fmt::Display> Stage<T> for std::result::Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| Failure { stage: name, message: e.to_string() })
    }
}

#[derive(Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    /// Creates `dir` if needed; a directory created here is removed again on
    /// failure.
    pub fn dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            fs::create_dir_all(dir).stage("output")?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes).map_err(|e| Failure { stage: "output", message: format!("{}: {e}", path.display()) })?;
        self.files.push(path.to_path_buf());
        Ok(())
    }

    pub fn discard(self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

/// Sibling file `stem.suffix` of `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}
