use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Files produced under an output directory, listed in its `MANIFEST`.
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of `rel` under the root, with parent directories created.
    pub fn path(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    /// Records a file that has been written.
    pub fn record(&mut self, path: impl Into<PathBuf>) {
        self.files.push(path.into());
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.record(p.clone());
        Ok(p)
    }

    /// Writes `MANIFEST`: one `path<TAB>bytes` line per produced file,
    /// relative to the root when inside it.
    pub fn finish(mut self) -> Result<()> {
        self.files.sort();
        self.files.dedup();
        let mut text = String::new();
        for f in &self.files {
            let bytes = std::fs::metadata(f).map_err(|e| Error::io(f, e))?.len();
            let shown = f.strip_prefix(&self.root).unwrap_or(f);
            text.push_str(&format!("{}\t{bytes}\n", shown.display()));
        }
        let p = self.root.join("MANIFEST");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}
