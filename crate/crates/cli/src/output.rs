use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use reschroma::Grid;

/// Files of one run, held in memory until the run has succeeded.
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn add_grid(&mut self, name: impl Into<PathBuf>, g: &Grid) {
        self.add(name, g.to_binary());
    }

    /// Writes a CSV through a closure that fills a `Vec<u8>` sink.
    pub fn add_csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Writes every file under `dir`. On failure, removes whatever this call
    /// created, including `dir` itself when it did not exist before.
    pub fn commit(&self, dir: &Path) -> anyhow::Result<()> {
        let existed = dir.exists();
        let mut created: Vec<PathBuf> = Vec::new();
        let mut created_dirs: Vec<PathBuf> = Vec::new();
        let result = (|| -> anyhow::Result<()> {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, bytes) in &self.files {
                let path = dir.join(name);
                if let Some(parent) = path.parent() {
                    if !parent.exists() {
                        fs::create_dir_all(parent)
                            .with_context(|| format!("creating {}", parent.display()))?;
                        created_dirs.push(parent.to_path_buf());
                    }
                }
                fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
                created.push(path);
            }
            Ok(())
        })();
        if result.is_err() {
            for p in &created {
                let _ = fs::remove_file(p);
            }
            for d in created_dirs.iter().rev() {
                let _ = fs::remove_dir(d);
            }
            if !existed {
                let _ = fs::remove_dir(dir);
            }
        }
        result
    }
}
