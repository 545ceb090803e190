//! Output directory handling. Inputs are never overwritten.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub struct OutDir {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: &Path, inputs: &[&Path]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs
            .iter()
            .map(|p| fs::canonicalize(p).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes through a temporary sibling and a rename.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Ok(existing) = fs::canonicalize(&path) {
            if self.inputs.contains(&existing) {
                bail!(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!("refusing to overwrite input file {}", path.display()),
                ));
            }
        }
        let tmp = self.path(&format!(".{name}.partial"));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}
