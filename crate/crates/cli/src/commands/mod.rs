//! Command implementations. Every command declares its inputs and the
//! settings it depends on, then either reports "up-to-date" or runs and
//! records a manifest.

mod analysis;
mod data;
mod models;

use std::path::{Path, PathBuf};

use serde::Serialize;
use xct_core::actstore::NormStats;
use xct_core::corpus::{load_minimal_pairs, pack_sequences, Corpus, MinimalPair, Subtask, Vocab, SENTENCE_END};
use xct_core::toylm::Checkpoint;

use crate::config::{ExperimentConfig, RUN_ROOT_ENV};
use crate::error::{CliError, CliResult};
use crate::manifest::{Begin, Manifest, RunDir, StepSpec};
use crate::{Command, GlobalArgs, SourceArgs};

pub const VOCAB_FILE: &str = "corpus/vocab.tsv";
pub const LM_CORPUS: &str = "corpus/lm.txt";
pub const EXTRACT_CORPUS: &str = "corpus/extract.txt";
pub const EVAL_CORPUS: &str = "corpus/eval.txt";
pub const NORMS_FILE: &str = "acts/norms.json";
pub const POSITIONS_FILE: &str = "acts/positions.tsv";
/// Slice label of the attribution table over every pair.
pub const ALL_SLICE: &str = "all";

pub fn pairs_file(subtask: Subtask) -> String {
    format!("pairs/{}.tsv", subtask.name())
}

pub fn checkpoint_file(id: &str) -> String {
    format!("lm/{id}.xclm")
}

pub fn checkpoint_meta_file(id: &str) -> String {
    format!("lm/{id}.meta.json")
}

pub fn shard_file(id: &str) -> String {
    format!("acts/{id}.xact")
}

/// Directory name of a crosscoder over `sources`.
pub fn crosscoder_name(sources: &[String]) -> String {
    sources.join("-")
}

pub fn crosscoder_file(name: &str, seed: u64) -> String {
    format!("xc/{name}/seed{seed}/crosscoder.xccx")
}

pub fn attribution_file(name: &str, seed: u64, slice: &str) -> String {
    format!("attr/{name}/seed{seed}/{slice}.tsv")
}

/// Effective configuration and run directory for one invocation.
pub struct Session {
    pub config: ExperimentConfig,
    pub run: RunDir,
    pub force: bool,
}

impl Session {
    pub fn open(global: &GlobalArgs) -> CliResult<Self> {
        let mut config = match &global.config {
            None => ExperimentConfig::default(),
            Some(p) if p.extension().is_some_and(|e| e == "json") => {
                let m = Manifest::load(p)?;
                ExperimentConfig::parse(&m.config).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            Some(p) => ExperimentConfig::load(p)?,
        };
        config.apply_overrides(&global.sets)?;
        if let Some(id) = &global.run_id {
            config.run_id = id.clone();
        }
        if let Some(root) = &global.output_root {
            config.output_root = root.clone();
        } else if let Some(root) = std::env::var_os(RUN_ROOT_ENV) {
            config.output_root = PathBuf::from(root);
        }
        if let Some(seeds) = &global.seeds {
            config.seeds = seeds.clone();
        }
        config.validate()?;
        let run = RunDir::new(config.output_root.join(&config.run_id));
        Ok(Session { config, run, force: global.force })
    }

    /// The session config with a command's `--sources` applied.
    fn with_sources(&self, args: &SourceArgs) -> CliResult<Session> {
        let mut config = self.config.clone();
        if let Some(s) = &args.sources {
            config.crosscoder.sources = s.clone();
            config.validate()?;
        }
        Ok(Session { config, run: self.run.clone(), force: self.force })
    }

    /// Runs `body` unless the manifest shows the outputs are current. `body`
    /// returns the relative paths it wrote.
    fn step(&self, spec: StepSpec, body: impl FnOnce() -> CliResult<Vec<String>>) -> CliResult<()> {
        let label = match &spec.key {
            Some(k) => format!("{} [{k}]", spec.command),
            None => spec.command.to_string(),
        };
        match self.run.begin(spec, self.force)? {
            Begin::UpToDate => {
                println!("{label}: up-to-date");
                Ok(())
            }
            Begin::Run(open) => {
                let outputs = body()?;
                let m = self.run.finish(open, &outputs, &self.config.to_toml())?;
                println!("{label}: wrote {} file(s) in {:.1}s", m.outputs.len(), m.wall_time_s);
                Ok(())
            }
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run.path(rel)
    }

    fn vocab(&self) -> CliResult<Vocab> {
        let p = self.path(VOCAB_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| io_error(&p, e))?;
        Ok(Vocab::from_tsv(&text)?)
    }

    fn sequences(&self, rel: &str, vocab: &Vocab) -> CliResult<Vec<Vec<u32>>> {
        let p = self.path(rel);
        let text = std::fs::read_to_string(&p).map_err(|e| io_error(&p, e))?;
        let eos = vocab
            .id(SENTENCE_END)
            .ok_or_else(|| CliError::Config(format!("vocabulary lacks the sentence end {SENTENCE_END:?}")))?;
        let corpus = Corpus::from_text(&text, eos)?;
        Ok(pack_sequences(&corpus, self.config.lm.context_len, vocab.bos(), vocab.pad())?)
    }

    fn pairs(&self) -> CliResult<Vec<MinimalPair>> {
        let mut out = Vec::new();
        for t in Subtask::ALL {
            out.extend(load_minimal_pairs(&self.path(&pairs_file(t)))?);
        }
        Ok(out)
    }

    fn checkpoints(&self, ids: &[String]) -> CliResult<Vec<Checkpoint>> {
        ids.iter().map(|id| Ok(Checkpoint::load(&self.path(&checkpoint_file(id)))?)).collect()
    }

    fn norms(&self, sources: &[String]) -> CliResult<Vec<NormStats>> {
        let p = self.path(NORMS_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| io_error(&p, e))?;
        let all: Vec<NormStats> =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        sources
            .iter()
            .map(|s| {
                all.iter()
                    .find(|n| n.source == *s)
                    .cloned()
                    .ok_or_else(|| CliError::MissingInputs(vec![format!("norm record for {s} in {}", p.display())]))
            })
            .collect()
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<String> {
        xct_core::util::write_atomic(&self.path(rel), bytes)?;
        Ok(rel.to_string())
    }

    fn write_json(&self, rel: &str, value: &impl Serialize) -> CliResult<String> {
        let mut text = serde_json::to_string_pretty(value).expect("value serializes");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingInputs(vec![path.display().to_string()])
    } else {
        CliError::Core(xct_core::Error::Io { path: path.to_path_buf(), source: e })
    }
}

fn settings(value: impl Serialize) -> serde_json::Value {
    serde_json::to_value(value).expect("settings serialize")
}

pub fn dispatch(session: &Session, command: &Command) -> CliResult<()> {
    match command {
        Command::GenCorpus => data::gen_corpus(session),
        Command::GenPairs => data::gen_pairs(session),
        Command::TrainLm => models::train_lm(session),
        Command::Extract => models::extract(session),
        Command::TrainXc(a) => models::train_xc(&session.with_sources(a)?),
        Command::EvalXc(a) => models::eval_xc(&session.with_sources(a)?),
        Command::Attribute(a) => analysis::attribute(&session.with_sources(a)?),
        Command::Validate(a) => analysis::validate(&session.with_sources(a)?),
        Command::Report(a) => analysis::report(&session.with_sources(a)?),
        Command::ShowConfig => {
            print!("{}", session.config.to_toml());
            Ok(())
        }
        Command::Pipeline(a) => {
            let s = session.with_sources(a)?;
            data::gen_corpus(&s)?;
            data::gen_pairs(&s)?;
            models::train_lm(&s)?;
            models::extract(&s)?;
            models::train_xc(&s)?;
            models::eval_xc(&s)?;
            analysis::attribute(&s)?;
            analysis::validate(&s)?;
            analysis::report(&s)
        }
    }
}
