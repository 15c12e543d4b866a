use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Result;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::{input_error, write_json};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Versions {
    funcgraph: &'static str,
    checkpoint: u32,
    prompts: u32,
}

/// Record of one invocation. Holds no timestamps or output paths, so
/// identical runs produce identical manifests.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    parameters: &'a BTreeMap<String, serde_json::Value>,
    config: &'a Config,
    inputs: Vec<InputHash>,
    versions: Versions,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f =
        std::fs::File::open(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Collects the parameters and inputs of a run.
#[derive(Debug, Default)]
pub struct RunRecord {
    parameters: BTreeMap<String, serde_json::Value>,
    inputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn param(&mut self, key: &str, value: impl Serialize) {
        self.parameters.insert(
            key.to_string(),
            serde_json::to_value(value).expect("serializable parameter"),
        );
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn inputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.inputs.extend(paths);
    }

    pub fn write(mut self, out_dir: &Path, command: &str, config: &Config) -> Result<()> {
        self.inputs.sort();
        self.inputs.dedup();
        let inputs = self
            .inputs
            .par_iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command,
            parameters: &self.parameters,
            config,
            inputs,
            versions: Versions {
                funcgraph: env!("CARGO_PKG_VERSION"),
                checkpoint: funcgraph::graph::CHECKPOINT_VERSION,
                prompts: funcgraph::relations::PROMPT_VERSION,
            },
        };
        write_json(&out_dir.join(RUN_MANIFEST), &manifest)
    }
}
