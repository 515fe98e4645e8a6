//! Experiment configuration: one TOML file with a section per pipeline
//! stage. Precedence is flag > environment > file > built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xct_core::analysis::{SimilarityMeasure, SimilarityPosition};
use xct_core::attribution::IGConfig;
use xct_core::corpus::{GrammarSpec, Lexicon, Template};
use xct_core::dictcore::TrainHP;
use xct_core::toylm::{LmConfig, OptimizerSettings};

use crate::error::{CliError, CliResult};

pub const RUN_ROOT_ENV: &str = "XCT_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub output_root: PathBuf,
    /// Crosscoder training seeds; one crosscoder per seed.
    pub seeds: Vec<u64>,
    pub grammar: GrammarSection,
    pub lm: LmSection,
    pub extract: ExtractSection,
    pub crosscoder: CrosscoderSection,
    pub attribution: AttributionSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarSection {
    /// Grammar seed: fixes the held-out prefixes. The LM, extraction and
    /// evaluation corpora mix it with streams 1, 2 and 3.
    pub seed: u64,
    pub holdout: bool,
    /// Tokens generated for LM training.
    pub lm_tokens: usize,
    /// Tokens generated for activation extraction.
    pub extract_tokens: usize,
    /// Tokens generated for crosscoder evaluation and top-activation mining.
    pub eval_tokens: usize,
    pub pairs_per_subtask: usize,
    pub pair_seed: u64,
    /// Replaces the built-in lexicon when present.
    pub lexicon: Option<Lexicon>,
    /// Replaces the built-in templates when present.
    pub templates: Option<Vec<Template>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mid_layer: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_seqs: usize,
    /// Optimizer steps at which checkpoints are written, besides step 0.
    pub schedule: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractSection {
    /// Checkpoints to extract in addition to the crosscoder sources.
    pub checkpoints: Vec<String>,
    pub n_tokens: usize,
    pub norm_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrosscoderSection {
    pub sources: Vec<String>,
    /// Seed of the minibatch shuffle, mixed with each crosscoder seed.
    pub shuffle_seed: u64,
    /// Sequences of the evaluation corpus used by eval-xc.
    pub eval_sequences: usize,
    #[serde(flatten)]
    pub hp: TrainHP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionSection {
    /// Also compute exact zero-ablation IE for every feature.
    pub with_exact: bool,
    #[serde(flatten)]
    pub ig: IGConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    pub window: usize,
    pub tau: f64,
    pub similarity_position: SimilarityPosition,
    pub similarity_measure: SimilarityMeasure,
    pub top_k: usize,
    /// Features per source compared in the IG-vs-exact check.
    pub oracle_top: usize,
    pub ablation_k: usize,
    pub top_sequences: usize,
    pub evolution_n: usize,
    /// Sequences of the evaluation corpus scanned for top activations.
    pub scan_sequences: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "default".into(),
            output_root: PathBuf::from("runs"),
            seeds: vec![124, 153, 6582],
            grammar: GrammarSection::default(),
            lm: LmSection::default(),
            extract: ExtractSection::default(),
            crosscoder: CrosscoderSection::default(),
            attribution: AttributionSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl Default for GrammarSection {
    fn default() -> Self {
        GrammarSection {
            seed: 0,
            holdout: true,
            lm_tokens: 420_000,
            extract_tokens: 560_000,
            eval_tokens: 20_000,
            pairs_per_subtask: 50,
            pair_seed: 100,
            lexicon: None,
            templates: None,
        }
    }
}

impl Default for LmSection {
    fn default() -> Self {
        let opt = OptimizerSettings::default();
        LmSection {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            context_len: 64,
            mid_layer: 2,
            seed: 0,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            batch_seqs: opt.batch_seqs,
            schedule: vec![25, 35, 50, 71, 100, 141, 200, 283, 400, 566, 800],
        }
    }
}

impl Default for ExtractSection {
    fn default() -> Self {
        ExtractSection {
            checkpoints: Vec::new(),
            n_tokens: 500_000,
            norm_sample: 10_000,
        }
    }
}

impl Default for CrosscoderSection {
    fn default() -> Self {
        CrosscoderSection {
            sources: vec!["step283".into(), "step800".into()],
            shuffle_seed: 5,
            eval_sequences: 200,
            hp: TrainHP {
                lr: 1e-3,
                steps: 600,
                dict_size: 512,
                log_every: 10,
                ..TrainHP::default()
            },
        }
    }
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection {
            with_exact: true,
            ig: IGConfig::default(),
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            window: 1,
            tau: 0.1,
            similarity_position: SimilarityPosition::FinalToken,
            similarity_measure: SimilarityMeasure::Cosine,
            top_k: 10,
            oracle_top: 50,
            ablation_k: 10,
            top_sequences: 10,
            evolution_n: 5,
            scan_sequences: 300,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInputs(vec![format!("{} ({e})", path.display())]))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Parses a config and rejects keys no field consumed.
    pub fn parse(text: &str) -> Result<Self, String> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let config: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        let known: toml::Table = toml::from_str(&config.to_toml()).expect("config round-trips");
        let mut unknown = Vec::new();
        unknown_keys(&raw, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(format!("unknown key(s): {}", unknown.join(", ")));
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides; the value is parsed as a TOML
    /// literal, falling back to a bare string.
    pub fn apply_overrides(&mut self, sets: &[String]) -> CliResult<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {set:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, path) = parts.split_last().expect("split yields one part");
            let mut table = &mut doc;
            for p in path {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| CliError::Config(format!("override {key}: {p} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        *self = Self::parse(&toml::to_string(&doc).expect("table serializes"))
            .map_err(|e| CliError::Config(format!("override: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad(format!("run_id {:?} must be a non-empty file name", self.run_id));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(2..=3).contains(&self.crosscoder.sources.len()) {
            return bad(format!("crosscoder.sources lists {} checkpoints; 2 or 3 required", self.crosscoder.sources.len()));
        }
        let known = self.checkpoint_ids();
        for s in self.crosscoder.sources.iter().chain(&self.extract.checkpoints) {
            if !known.contains(s) {
                return bad(format!("checkpoint {s} is not on the LM schedule; known: {}", known.join(", ")));
            }
        }
        if self.grammar.pairs_per_subtask == 0 {
            return bad("grammar.pairs_per_subtask must be positive".into());
        }
        self.lm_config(1).validate()?;
        self.crosscoder.hp.validate()?;
        self.attribution.ig.validate()?;
        Ok(())
    }

    pub fn grammar_spec(&self) -> GrammarSpec {
        let mut spec = GrammarSpec::default();
        spec.seed = self.grammar.seed;
        spec.holdout = self.grammar.holdout;
        if let Some(l) = &self.grammar.lexicon {
            spec.lexicon = l.clone();
        }
        if let Some(t) = &self.grammar.templates {
            spec.templates = t.clone();
        }
        spec
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            n_layers: self.lm.n_layers,
            d_model: self.lm.d_model,
            n_heads: self.lm.n_heads,
            vocab_size,
            context_len: self.lm.context_len,
            mid_layer: self.lm.mid_layer,
            seed: self.lm.seed,
        }
    }

    pub fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            lr: self.lm.lr,
            beta1: self.lm.beta1,
            beta2: self.lm.beta2,
            eps: self.lm.eps,
            batch_seqs: self.lm.batch_seqs,
        }
    }

    /// Ids of every checkpoint train-lm writes, step 0 first.
    pub fn checkpoint_ids(&self) -> Vec<String> {
        std::iter::once(0)
            .chain(self.lm.schedule.iter().copied().filter(|&s| s > 0))
            .map(|s| format!("step{s}"))
            .collect()
    }

    /// Checkpoints extract writes shards for, in first-mention order.
    pub fn extract_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in self.crosscoder.sources.iter().chain(&self.extract.checkpoints) {
            if !ids.contains(s) {
                ids.push(s.clone());
            }
        }
        ids
    }
}

fn unknown_keys(raw: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in raw {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(r), Some(toml::Value::Table(kn))) => unknown_keys(r, kn, &path, out),
            _ => {}
        }
    }
}
