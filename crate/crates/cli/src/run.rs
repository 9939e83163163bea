//! Run directories: every artifact a command writes, plus a manifest.

use std::path::{Path, PathBuf};

use eit_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

pub struct RunDir {
    root: PathBuf,
    command: String,
    header: String,
    config: RunConfig,
    artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    artifacts: Vec<ArtifactEntry>,
}

#[derive(Serialize)]
struct ArtifactEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            header: config.header(command),
            config: config.clone(),
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    /// Absolute path for `rel`, creating parent directories and recording
    /// it as an artifact.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        if !self.artifacts.iter().any(|p| p == Path::new(rel)) {
            self.artifacts.push(PathBuf::from(rel));
        }
        Ok(path)
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(rel)?;
        std::fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }

    /// `<name>.txt` with the config header, and `<name>.csv` if given.
    pub fn report(&mut self, name: &str, text: &str, csv: Option<&str>) -> Result<()> {
        let body = format!("{}\n{text}", self.header);
        self.write(&format!("{name}.txt"), &body)?;
        if let Some(csv) = csv {
            self.write(&format!("{name}.csv"), csv)?;
        }
        Ok(())
    }

    pub fn write_json<S: Serialize>(&mut self, rel: &str, value: &S) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes");
        self.write(rel, &(text + "\n"))
    }

    /// Writes the manifest: the command, its config and a digest per artifact.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.artifacts.sort();
        let mut entries = Vec::with_capacity(self.artifacts.len());
        for rel in &self.artifacts {
            let path = self.root.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| io_error(&path, e))?;
            entries.push(ArtifactEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: format!("{:x}", Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            command: &self.command,
            config: &self.config,
            artifacts: entries,
        };
        let path = self.root.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
