//! Output staging: a command writes into a hidden sibling directory and
//! only moves its files into `--out` once everything succeeded.

use std::path::{Path, PathBuf};

use anyhow::Context;
use randgan::data::io::atomic_write;

use crate::config::RunConfig;

pub const SNAPSHOT: &str = "resolved_config.json";

pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
    done: bool,
}

impl Staging {
    pub fn begin(out: &Path) -> anyhow::Result<Self> {
        let name = out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let parent = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
        let dir = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            dir,
            done: false,
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes the config snapshot and moves every staged entry into place,
    /// replacing entries of the same name.
    pub fn commit(mut self, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
        atomic_write(&self.path(SNAPSHOT), cfg.to_json()?.as_bytes())?;
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))?;
        let mut entries: Vec<_> = std::fs::read_dir(&self.dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let target = self.out.join(e.file_name());
            if target.is_dir() {
                std::fs::remove_dir_all(&target)?;
            } else if target.exists() {
                std::fs::remove_file(&target)?;
            }
            std::fs::rename(e.path(), &target)
                .with_context(|| format!("cannot move output to {}", target.display()))?;
        }
        std::fs::remove_dir_all(&self.dir)?;
        self.done = true;
        Ok(self.out.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}
