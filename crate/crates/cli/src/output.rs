//! Output directories that appear only when a command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use hvq_core::{HvqError, Result};

/// A scratch directory next to the final destination. Files are written into
/// it and moved into place by [`Staging::commit`]; dropping it uncommitted
/// removes everything that was written.
pub struct Staging {
    dir: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        let parent = target
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| HvqError::io(parent, e))?;
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let dir = parent.join(format!(".{name}.staging{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| HvqError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| HvqError::io(&dir, e))?;
        Ok(Staging {
            dir,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    /// Root of the staging area; `path()/x` ends up at `target/x`.
    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Moves every staged file to the same relative path under the target,
    /// replacing files that already exist there.
    pub fn commit(mut self) -> Result<()> {
        if !self.target.exists() {
            fs::rename(&self.dir, &self.target).map_err(|e| HvqError::io(&self.target, e))?;
        } else {
            move_tree(&self.dir, &self.target)?;
            fs::remove_dir_all(&self.dir).map_err(|e| HvqError::io(&self.dir, e))?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn move_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| HvqError::io(to, e))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(from)
        .map_err(|e| HvqError::io(from, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for src in entries {
        let dst = to.join(src.file_name().expect("directory entry has a name"));
        if src.is_dir() {
            move_tree(&src, &dst)?;
        } else {
            fs::rename(&src, &dst).map_err(|e| HvqError::io(&dst, e))?;
        }
    }
    Ok(())
}
