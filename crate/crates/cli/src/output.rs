//! Output directory bookkeeping: every file goes through [`OutDir`] so the
//! run manifest can list it with its size.

use std::fs;
use std::path::{Path, PathBuf};

use featclip::Error;
use serde::Serialize;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    files: &'a [FileEntry],
}

pub struct OutDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Error> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, Error> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let bytes = contents.as_ref();
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.record(name, bytes.len() as u64);
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, Error> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Registers files written by someone else under `sub`, e.g. a saved dataset.
    pub fn record_tree(&mut self, sub: &str) -> Result<(), Error> {
        let dir = self.path(sub);
        let mut names: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let p = dir.join(&name);
            let len = fs::metadata(&p).map_err(|e| io_err(&p, e))?.len();
            self.record(&format!("{sub}/{name}"), len);
        }
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: u64) {
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry { path: name.to_string(), bytes });
    }

    /// Writes the run manifest. It lists every other file; its own size is
    /// not known until it is written.
    pub fn finish(self, command: &str, config: &impl Serialize) -> Result<PathBuf, Error> {
        let manifest = RunManifest { command, config, files: &self.files };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.path(RUN_MANIFEST);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
