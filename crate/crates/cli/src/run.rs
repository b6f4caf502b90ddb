//! Run directories, their manifests, and the shared results file.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swimdiff::{Error, Result};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// Full command line of the invocation.
    pub argv: Vec<String>,
    /// Resolved configuration snapshot.
    pub config: serde_json::Value,
    pub version: String,
    pub status: RunStatus,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

pub fn version_stamp() -> String {
    format!(
        "swimdiff {} (checkpoint format {})",
        env!("CARGO_PKG_VERSION"),
        swimdiff::trainer::FORMAT_VERSION
    )
}

/// Short content address of a serializable value plus extra key material.
pub fn content_id<T: Serialize>(value: &T, extra: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(value).expect("serializable"));
    for e in extra {
        h.update(e);
    }
    hex::encode(h.finalize())[..12].to_string()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Makes `dir` ready for a fresh run. An existing non-empty directory is
/// refused unless `force` is set, in which case it is removed first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.is_dir() && fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    } else if dir.exists() && !dir.is_dir() {
        return Err(Error::Config(format!("{} exists and is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(dir: &Path, command: &str, config: serde_json::Value, force: bool) -> Result<Self> {
        prepare_output_dir(dir, force)?;
        let run_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| command.to_string());
        let run = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                run_id,
                command: command.to_string(),
                argv: std::env::args().collect(),
                config,
                version: version_stamp(),
                status: RunStatus::Running,
                artifacts: Vec::new(),
            },
        };
        run.write()?;
        Ok(run)
    }

    pub fn id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn add_artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        self.manifest.artifacts.push(rel.to_string_lossy().into_owned());
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(RUN_MANIFEST);
        let tmp = self.dir.join("run.json.tmp");
        let json = serde_json::to_vec_pretty(&self.manifest).expect("serializable");
        fs::write(&tmp, json).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Seals the manifest; it is not written again after this.
    pub fn finish(mut self, status: RunStatus) -> Result<RunManifest> {
        self.manifest.status = status;
        self.write()?;
        Ok(self.manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    pub dataset: String,
    pub checkpoint: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn append_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    for r in records {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}
