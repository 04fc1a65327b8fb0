//! Run manifests: the resolved command and config plus file digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use immunofuse_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cli::Command;
use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "immunofuse-manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, recorded_as: PathBuf) -> Result<FileDigest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileDigest {
            path: recorded_as,
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub command: Command,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Absolute input paths.
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: Command, config: RunConfig, seeds: BTreeMap<String, u64>) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command,
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_inputs(&mut self, files: &[PathBuf]) -> Result<()> {
        for f in files {
            self.inputs.push(FileDigest::of(f, f.clone())?);
        }
        Ok(())
    }

    /// Digests every regular file under `out` except the manifest itself.
    pub fn collect_outputs(&mut self, out: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(out, &mut files)?;
        files.sort();
        self.outputs = files
            .into_iter()
            .filter_map(|p| {
                let rel = p.strip_prefix(out).ok()?.to_path_buf();
                (rel != Path::new(MANIFEST_FILE)).then_some((p, rel))
            })
            .map(|(p, rel)| FileDigest::of(&p, rel))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        immunofuse_core::eval::report::write_json(&out.join(MANIFEST_FILE), self)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::data(format!("{}: not a run manifest", path.display())));
        }
        Ok(m)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
