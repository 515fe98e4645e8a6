//! Per-command provenance records.
//!
//! A manifest lives at `R/manifests/<command>[.<key>].json` and lists the
//! content hash of every input and output (paths relative to the run
//! directory `R`), the effective config, a fingerprint of the settings the
//! command depends on, the seeds and the wall time. A command is up to date
//! when its fingerprint, input hashes and output hashes all match.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xct_core::util::{sha256_file, sha256_hex, write_atomic};

use crate::error::{CliError, CliResult};

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub key: Option<String>,
    /// Effective config, TOML.
    pub config: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::MissingInputs(vec![format!("{} ({e})", path.display())]))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// The run directory of one experiment.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

/// What a command declares before doing any work.
#[derive(Debug, Clone)]
pub struct StepSpec {
    pub command: &'static str,
    pub key: Option<String>,
    /// Relative input paths.
    pub inputs: Vec<String>,
    /// Settings the outputs depend on; hashed into the fingerprint.
    pub settings: serde_json::Value,
    pub seeds: Vec<u64>,
}

/// A command that passed its input checks and is about to write.
pub struct OpenStep {
    spec: StepSpec,
    fingerprint: String,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

pub enum Begin {
    UpToDate,
    Run(OpenStep),
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        RunDir { root }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self, command: &str, key: Option<&str>) -> PathBuf {
        let name = match key {
            Some(k) => format!("{command}.{k}.json"),
            None => format!("{command}.json"),
        };
        self.root.join(MANIFEST_DIR).join(name)
    }

    /// Every manifest in the run directory, sorted by file name.
    pub fn manifests(&self) -> CliResult<Vec<Manifest>> {
        let dir = self.root.join(MANIFEST_DIR);
        let Ok(entries) = fs::read_dir(&dir) else {
            return Ok(Vec::new());
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Manifest::load(p)).collect()
    }

    /// Checks inputs, then decides whether the command must run.
    ///
    /// Missing inputs are reported together. An input whose hash differs
    /// from the one recorded by the manifest that produced it is a
    /// provenance error.
    pub fn begin(&self, spec: StepSpec, force: bool) -> CliResult<Begin> {
        let missing: Vec<String> = spec
            .inputs
            .iter()
            .filter(|rel| !self.path(rel).is_file())
            .map(|rel| self.path(rel).display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CliError::MissingInputs(missing));
        }
        let mut recorded: BTreeMap<String, (String, String)> = BTreeMap::new();
        for m in self.manifests()? {
            let producer = match &m.key {
                Some(k) => format!("{}.{k}", m.command),
                None => m.command.clone(),
            };
            for (path, hash) in m.outputs {
                recorded.insert(path, (hash, producer.clone()));
            }
        }
        let mut inputs = BTreeMap::new();
        for rel in &spec.inputs {
            let hash = sha256_file(&self.path(rel))?;
            if let Some((want, producer)) = recorded.get(rel) {
                if *want != hash {
                    return Err(CliError::Provenance(format!(
                        "{rel} has hash {hash} but the {producer} manifest recorded {want}; rerun {producer} or restore the file"
                    )));
                }
            }
            inputs.insert(rel.clone(), hash);
        }
        let fingerprint = sha256_hex(
            serde_json::to_string(&serde_json::json!({
                "command": spec.command,
                "key": spec.key,
                "settings": spec.settings,
                "seeds": spec.seeds,
            }))
            .expect("settings serialize")
            .as_bytes(),
        );
        if !force && self.is_current(&spec, &fingerprint, &inputs)? {
            return Ok(Begin::UpToDate);
        }
        Ok(Begin::Run(OpenStep {
            spec,
            fingerprint,
            inputs,
            started: Instant::now(),
        }))
    }

    fn is_current(&self, spec: &StepSpec, fingerprint: &str, inputs: &BTreeMap<String, String>) -> CliResult<bool> {
        let path = self.manifest_path(spec.command, spec.key.as_deref());
        if !path.is_file() {
            return Ok(false);
        }
        let m = Manifest::load(&path)?;
        if m.fingerprint != fingerprint || m.inputs != *inputs {
            return Ok(false);
        }
        for (rel, hash) in &m.outputs {
            let p = self.path(rel);
            if !p.is_file() || sha256_file(&p)? != *hash {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Hashes the outputs and writes the manifest atomically.
    pub fn finish(&self, step: OpenStep, outputs: &[String], config_toml: &str) -> CliResult<Manifest> {
        let mut hashed = BTreeMap::new();
        for rel in outputs {
            hashed.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let m = Manifest {
            command: step.spec.command.to_string(),
            key: step.spec.key.clone(),
            config: config_toml.to_string(),
            fingerprint: step.fingerprint,
            seeds: step.spec.seeds,
            inputs: step.inputs,
            outputs: hashed,
            wall_time_s: step.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write_atomic(&self.manifest_path(&m.command, m.key.as_deref()), text.as_bytes())?;
        Ok(m)
    }
}
