//! Declarative pipeline: a JSON configuration names the stages to run and their settings.
//!
//! Stages communicate through files in the output directory, so each one can also be run on
//! its own (the CLI subcommands do exactly that):
//!
//! | stage            | reads                                   | writes                                                   |
//! |------------------|-----------------------------------------|----------------------------------------------------------|
//! | `train-ngram`    | corpus                                  | `vocab.txt`, `ngram_{forward,backward,unigram}.json`     |
//! | `augment`        | corpus                                  | `augmented.txt`                                          |
//! | `score`          | corpus, models / backend                | `records.csv`                                            |
//! | `measures`       | `records.csv`                           | `scores.csv`, `correlations.csv`                         |
//! | `extract-frames` | corpus                                  | `frames.jsonl`, `frames_report.json`                     |
//! | `features`       | `frames.jsonl`, models, lexical data    | `rows.csv`                                               |
//! | `fit`            | `fit.input` (default `rows.csv`)        | `fit.json`, optionally `bootstrap.json`                  |
//! | `compare`        | `fit.input`                             | `compare.json`, `compare.txt`                            |
//! | `simulate`       | `simulate` section                      | `sim_corpus.jsonl`, `sim_rows.csv`, `ground_truth.json`  |
//!
//! A stage's files are buffered and written only once the whole stage has succeeded, so a
//! failure never leaves partial output behind. After a successful run `manifest.json` lists
//! every file produced with its SHA-256.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_corpus, AugmentOptions};
use crate::corpus::{Corpus, ErrorCategory, LoadOptions, Vocabulary};
use crate::error::{Error, Result};
use crate::frames::{
    assemble_all, extract_frames, filter_by_category, parse_frames_jsonl, write_frames_jsonl,
    write_rows_csv, AssembleOptions, FeatureSources, MissingPolicy,
};
use crate::gateway::{
    read_records_csv, write_records_csv, BackwardSource, Gateway, GatewayOptions, HttpBackend,
    InfillOrder, ResponseCache, StdioBackend,
};
use crate::measures::{correlation_matrix, score_rows, write_scores_csv, MeasureSet};
use crate::ngram::{Direction, NGramConfig, NGramModel};
use crate::noisy::{EmbeddingTable, PhoneticFeatureTable, PronLexicon};
use crate::stats::{
    bootstrap_ci, build_design, compare, fit_lmm_random_intercept, fit_logistic_weighted,
    fit_ols_weighted, DesignSpec, FitResult, LmmOptions, LogisticOptions, ModelKind, Table,
};
use crate::synth::{run_simulation, SimulationConfig, POLICY_FEATURES};
use crate::{TOY_CORPUS, TOY_EMBEDDINGS, TOY_LEXICON};

/// File name of the run manifest inside the output directory.
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainNgram,
    Augment,
    Score,
    Measures,
    ExtractFrames,
    Features,
    Fit,
    Compare,
    Simulate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::TrainNgram,
        Stage::Augment,
        Stage::Score,
        Stage::Measures,
        Stage::ExtractFrames,
        Stage::Features,
        Stage::Fit,
        Stage::Compare,
        Stage::Simulate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainNgram => "train-ngram",
            Stage::Augment => "augment",
            Stage::Score => "score",
            Stage::Measures => "measures",
            Stage::ExtractFrames => "extract-frames",
            Stage::Features => "features",
            Stage::Fit => "fit",
            Stage::Compare => "compare",
            Stage::Simulate => "simulate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Where conditional probabilities come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    /// In-process n-gram models from this directory (the output directory when `None`).
    NGram(Option<PathBuf>),
    Http(String),
    Stdio(String),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "ngram" => Ok(BackendSpec::NGram(None)),
            Some(("ngram", dir)) if !dir.is_empty() => {
                Ok(BackendSpec::NGram(Some(PathBuf::from(dir))))
            }
            Some(("http", url)) if !url.is_empty() => Ok(BackendSpec::Http(url.to_string())),
            Some(("stdio", cmd)) if !cmd.is_empty() => Ok(BackendSpec::Stdio(cmd.to_string())),
            _ => Err(Error::InvalidArgument(format!(
                "backend {s:?} is not ngram, ngram:<dir>, http:<url> or stdio:<command>"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// JSONL corpus; the bundled toy corpus when absent.
    pub path: Option<PathBuf>,
    pub lowercase: bool,
    /// Abort on malformed lines instead of skipping them.
    pub strict: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: None,
            lowercase: true,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramStageConfig {
    pub order: usize,
    pub alpha: f64,
    pub min_count: u64,
    pub speaker_tags: bool,
    /// Train on the fluent rendering of each utterance (reparanda, fillers and repetitions
    /// removed), so a recorded error does not inflate its own in-context probability.
    pub fluent: bool,
}

impl Default for NgramStageConfig {
    fn default() -> Self {
        NgramStageConfig {
            order: 3,
            alpha: 0.1,
            min_count: 1,
            speaker_tags: false,
            fluent: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub infill_order: InfillOrder,
    pub backward: BackwardSource,
    /// HTTP request timeout in seconds.
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub swap_prob: f64,
    pub speaker_tags: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            swap_prob: 0.5,
            speaker_tags: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesConfig {
    /// Word vectors (word2vec/fastText text format); bundled toy vectors when absent.
    pub embeddings: Option<PathBuf>,
    /// `word<TAB>segments` pronunciations; bundled toy lexicon when absent.
    pub lexicon: Option<PathBuf>,
    /// Segment feature table; the bundled table when absent.
    pub phonetic_features: Option<PathBuf>,
    /// Keep only frames of these categories (all frames when empty).
    pub categories: Vec<ErrorCategory>,
    pub noise_var: f64,
    pub phonetic_noise: bool,
    pub missing: MissingPolicy,
    pub subsample: Option<usize>,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        let a = AssembleOptions::default();
        FeaturesConfig {
            embeddings: None,
            lexicon: None,
            phonetic_features: None,
            categories: Vec::new(),
            noise_var: a.noise_var,
            phonetic_noise: a.phonetic_noise,
            missing: a.missing,
            subsample: a.subsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_sims: usize,
    pub level: f64,
    /// Column whose distinct values are the resampling units (every row its own unit when
    /// absent).
    pub unit: Option<String>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_sims: crate::stats::DEFAULT_N_SIMS,
            level: 0.95,
            unit: Some("frame_id".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub model: ModelKind,
    /// CSV table, relative to the output directory unless absolute.
    pub input: String,
    pub response: String,
    pub terms: Vec<String>,
    /// Grouping column for the random-intercept model.
    pub group: Option<String>,
    /// Drop rows whose `is_repair` column is `true` (the production target is not a choice).
    pub exclude_repair: bool,
    pub standardize: bool,
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            model: ModelKind::Logistic,
            input: "rows.csv".into(),
            response: "produced".into(),
            terms: POLICY_FEATURES.iter().map(|s| s.to_string()).collect(),
            group: None,
            exclude_repair: true,
            standardize: false,
            bootstrap: None,
        }
    }
}

/// Nested model comparison on the `fit` input, model and response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub small: Vec<String>,
    pub big: Vec<String>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let big: Vec<String> = POLICY_FEATURES.iter().map(|s| s.to_string()).collect();
        CompareConfig {
            small: big.iter().filter(|t| *t != "cond_pmi").cloned().collect(),
            big,
        }
    }
}

pub fn default_stages() -> Vec<Stage> {
    vec![
        Stage::TrainNgram,
        Stage::Augment,
        Stage::Score,
        Stage::Measures,
        Stage::ExtractFrames,
        Stage::Features,
        Stage::Fit,
        Stage::Compare,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Reject unknown keys (otherwise they are logged and ignored).
    pub strict: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
    pub stages: Vec<Stage>,
    pub corpus: CorpusConfig,
    pub ngram: NgramStageConfig,
    /// `ngram`, `ngram:<dir>`, `http:<url>` or `stdio:<command>`.
    pub backend: String,
    pub gateway: GatewayConfig,
    pub augment: AugmentConfig,
    pub features: FeaturesConfig,
    pub fit: FitConfig,
    pub compare: CompareConfig,
    pub simulate: Option<SimulationConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            strict: true,
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: 0,
            stages: default_stages(),
            corpus: CorpusConfig::default(),
            ngram: NgramStageConfig::default(),
            backend: "ngram".into(),
            gateway: GatewayConfig::default(),
            augment: AugmentConfig::default(),
            features: FeaturesConfig::default(),
            fit: FitConfig::default(),
            compare: CompareConfig::default(),
            simulate: None,
        }
    }
}

/// Deserializes `text`, reporting type errors and (under `strict`) unknown keys with their
/// dotted path. Unknown keys are returned when not strict.
pub fn parse_json_config<T: DeserializeOwned>(
    text: &str,
    strict: bool,
) -> Result<(T, Vec<String>)> {
    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let mut record = |p: serde_ignored::Path<'_>| unknown.push(p.to_string());
    let value: T =
        serde_path_to_error::deserialize(serde_ignored::Deserializer::new(&mut de, &mut record))
            .map_err(|e| Error::Config {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
    de.end().map_err(|e| Error::Config {
        path: ".".into(),
        message: e.to_string(),
    })?;
    if strict {
        if let Some(first) = unknown.first() {
            return Err(Error::Config {
                path: first.clone(),
                message: "unknown configuration key".into(),
            });
        }
    }
    Ok((value, unknown))
}

impl PipelineConfig {
    /// Parses a configuration; the document's own `strict` key (default true) decides how
    /// unknown keys are treated.
    pub fn parse(text: &str) -> Result<Self> {
        let strict = serde_json::from_str::<serde_json::Value>(text)
            .map_err(|e| Error::Config {
                path: ".".into(),
                message: e.to_string(),
            })?
            .get("strict")
            .and_then(serde_json::Value::as_bool)
            .unwrap_or(true);
        let (config, unknown): (PipelineConfig, _) = parse_json_config(text, strict)?;
        for key in unknown {
            log::warn!("ignoring unknown configuration key {key}");
        }
        config.validate()?;
        Ok(config)
    }

    /// Loads a configuration file; relative paths inside it are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = PipelineConfig::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.corpus.path,
            &mut self.features.embeddings,
            &mut self.features.lexicon,
            &mut self.features.phonetic_features,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Ok(BackendSpec::NGram(Some(dir))) = self.backend.parse() {
            if dir.is_relative() {
                self.backend = format!("ngram:{}", base.join(dir).display());
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if let Err(e) = self.backend.parse::<BackendSpec>() {
            return bad("backend", e.to_string());
        }
        if self.ngram.order == 0 {
            return bad("ngram.order", "must be at least 1".into());
        }
        if !(self.ngram.alpha > 0.0 && self.ngram.alpha.is_finite()) {
            return bad("ngram.alpha", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augment.swap_prob) {
            return bad("augment.swap_prob", "must lie in [0, 1]".into());
        }
        if !(self.features.noise_var >= 0.0 && self.features.noise_var.is_finite()) {
            return bad("features.noise_var", "must be non-negative".into());
        }
        if let Some(b) = &self.fit.bootstrap {
            if b.n_sims == 0 {
                return bad("fit.bootstrap.n_sims", "must be at least 1".into());
            }
            if !(b.level > 0.0 && b.level < 1.0) {
                return bad("fit.bootstrap.level", "must lie in (0, 1)".into());
            }
        }
        if self.fit.model == ModelKind::LmmRi && self.fit.group.is_none() {
            return bad(
                "fit.group",
                "the random-intercept model needs a grouping column".into(),
            );
        }
        if self.stages.contains(&Stage::Simulate) && self.simulate.is_none() {
            return bad(
                "simulate",
                "the simulate stage needs a simulate section".into(),
            );
        }
        Ok(())
    }
}

/// A failed run: configuration problems exit with 2, stage failures with 1.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration at {path}: {message}")]
    Config { path: String, message: String },
    #[error("stage {stage} failed")]
    Stage {
        stage: Stage,
        #[source]
        source: Error,
    },
    #[error(transparent)]
    Other(Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => 2,
            _ => 1,
        }
    }
}

impl From<Error> for PipelineError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { path, message } => PipelineError::Config { path, message },
            other => PipelineError::Other(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub bytes: u64,
    pub stage: Stage,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifests serialize") + "\n"
    }
}

/// Files produced by one stage, held in memory until the stage succeeds.
#[derive(Debug, Default)]
struct StageOutput {
    files: Vec<(String, Vec<u8>)>,
}

impl StageOutput {
    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("partial{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Executes configured stages against one output directory.
pub struct Pipeline {
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    /// Runs `config.stages` in order and writes the manifest.
    pub fn run(&self) -> std::result::Result<Manifest, PipelineError> {
        self.run_stages(&self.config.stages)
    }

    /// Runs `stages` in order. Files of completed stages are kept when a later stage fails;
    /// the manifest is only written (merged with any existing one) when all succeed.
    pub fn run_stages(&self, stages: &[Stage]) -> std::result::Result<Manifest, PipelineError> {
        let dir = &self.config.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Other(Error::io(dir, e)))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs)
            .build()
            .map_err(|e| {
                PipelineError::Other(Error::InvalidArgument(format!("worker pool: {e}")))
            })?;
        let mut manifest = std::fs::read_to_string(self.out(MANIFEST))
            .ok()
            .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
            .filter(|m| m.seed == self.config.seed)
            .unwrap_or_default();
        manifest.seed = self.config.seed;
        for &stage in stages {
            log::info!("running stage {stage}");
            let output = pool
                .install(|| self.run_stage(stage))
                .map_err(|source| match source {
                    Error::Config { path, message } => PipelineError::Config { path, message },
                    source => PipelineError::Stage { stage, source },
                })?;
            for (name, bytes) in &output.files {
                write_atomic(&self.out(name), bytes)
                    .map_err(|source| PipelineError::Stage { stage, source })?;
                manifest.files.insert(
                    name.clone(),
                    ManifestEntry {
                        sha256: sha256_hex(bytes),
                        bytes: bytes.len() as u64,
                        stage,
                    },
                );
            }
        }
        write_atomic(&self.out(MANIFEST), manifest.to_json().as_bytes())
            .map_err(PipelineError::Other)?;
        Ok(manifest)
    }

    fn run_stage(&self, stage: Stage) -> Result<StageOutput> {
        match stage {
            Stage::TrainNgram => self.train_ngram(),
            Stage::Augment => self.augment(),
            Stage::Score => self.score(),
            Stage::Measures => self.measures(),
            Stage::ExtractFrames => self.extract_frames(),
            Stage::Features => self.features(),
            Stage::Fit => self.fit(),
            Stage::Compare => self.compare(),
            Stage::Simulate => self.simulate(),
        }
    }

    fn corpus(&self) -> Result<Corpus> {
        let options = LoadOptions {
            strict: self.config.corpus.strict,
            lowercase: self.config.corpus.lowercase,
        };
        let (corpus, report) = match &self.config.corpus.path {
            Some(p) => Corpus::load(p, &options)?,
            None => Corpus::parse_jsonl(TOY_CORPUS, &options)?,
        };
        if !report.skipped.is_empty() {
            log::warn!("skipped {} malformed corpus lines", report.skipped.len());
        }
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(corpus)
    }

    fn train_ngram(&self) -> Result<StageOutput> {
        let c = &self.config.ngram;
        let full = self.corpus()?;
        // The vocabulary covers every recorded word, errors included.
        let vocab = Arc::new(Vocabulary::build_with(&full, c.min_count, c.speaker_tags)?);
        let corpus = if c.fluent { full.fluent() } else { full };
        let mut out = StageOutput::default();
        out.add("vocab.txt", vocab.export());
        for (name, order, direction) in [
            ("ngram_forward.json", c.order, Direction::Forward),
            ("ngram_backward.json", c.order, Direction::Backward),
            ("ngram_unigram.json", 1, Direction::Forward),
        ] {
            let mut cfg = NGramConfig::new(order, c.alpha, direction);
            cfg.speaker_tags = c.speaker_tags;
            out.add(
                name,
                NGramModel::train(&corpus, vocab.clone(), cfg)?.to_json(),
            );
        }
        Ok(out)
    }

    fn augment(&self) -> Result<StageOutput> {
        let corpus = self.corpus()?;
        let options = AugmentOptions {
            seed: self.config.seed,
            swap_prob: self.config.augment.swap_prob,
            speaker_tags: self.config.augment.speaker_tags,
        };
        let mut out = StageOutput::default();
        out.add(
            "augmented.txt",
            augment_corpus(&corpus, &options)?.to_text(),
        );
        Ok(out)
    }

    fn model(&self, dir: &Path, name: &str) -> Result<NGramModel> {
        NGramModel::load(dir.join(name))
    }

    fn unigram(&self) -> Result<NGramModel> {
        let spec: BackendSpec = self.config.backend.parse()?;
        let dir = match &spec {
            BackendSpec::NGram(Some(d)) => d.clone(),
            _ => self.config.out_dir.clone(),
        };
        self.model(&dir, "ngram_unigram.json")
    }

    fn gateway(&self, vocab: &Vocabulary) -> Result<Gateway> {
        let options = GatewayOptions {
            infill_order: self.config.gateway.infill_order,
            backward: self.config.gateway.backward,
            jobs: self.config.jobs,
            speaker_tags: self.config.ngram.speaker_tags,
            ..GatewayOptions::default()
        };
        let cache = ResponseCache::from_env()?;
        let timeout = Duration::from_secs(self.config.gateway.timeout_secs.unwrap_or(30));
        match self.config.backend.parse::<BackendSpec>()? {
            BackendSpec::NGram(dir) => {
                let dir = dir.unwrap_or_else(|| self.config.out_dir.clone());
                let fwd = Arc::new(self.model(&dir, "ngram_forward.json")?);
                let bwd = Arc::new(self.model(&dir, "ngram_backward.json")?);
                Gateway::ngram(fwd, Some(bwd), options, cache)
            }
            BackendSpec::Http(url) => {
                Ok(
                    Gateway::new(Arc::new(HttpBackend::new(&url, timeout)), options, cache)?
                        .with_vocabulary(vocab),
                )
            }
            BackendSpec::Stdio(cmd) => {
                Ok(
                    Gateway::new(Arc::new(StdioBackend::spawn(&cmd)?), options, cache)?
                        .with_vocabulary(vocab),
                )
            }
        }
    }

    fn score(&self) -> Result<StageOutput> {
        let corpus = self.corpus()?;
        let unigram = self.unigram()?;
        let gateway = self.gateway(unigram.vocab())?;
        let report = gateway.batch_score_corpus(&corpus, &unigram)?;
        if report.records.is_empty() && !report.failures.is_empty() {
            return Err(report_failure(&report.failures));
        }
        let mut csv = Vec::new();
        write_records_csv(&report.records, &mut csv)?;
        let mut out = StageOutput::default();
        out.add("records.csv", csv);
        Ok(out)
    }

    fn measures(&self) -> Result<StageOutput> {
        let records = read_records_csv(self.out("records.csv"))?;
        let rows = score_rows(&records)?;
        let sets: Vec<MeasureSet> = rows
            .iter()
            .map(|r| {
                MeasureSet::from_logprobs(
                    r.logp_unigram,
                    r.logp_forward,
                    r.logp_backward,
                    r.logp_bidirectional,
                )
            })
            .collect::<Result<_>>()?;
        let mut scores = Vec::new();
        write_scores_csv(&rows, &mut scores)?;
        let mut corr = Vec::new();
        correlation_matrix(&sets).write_csv(&mut corr)?;
        let mut out = StageOutput::default();
        out.add("scores.csv", scores);
        out.add("correlations.csv", corr);
        Ok(out)
    }

    fn extract_frames(&self) -> Result<StageOutput> {
        let corpus = self.corpus()?;
        let (frames, report) = extract_frames(&corpus);
        let mut jsonl = Vec::new();
        write_frames_jsonl(&frames, &mut jsonl)?;
        let mut out = StageOutput::default();
        out.add("frames.jsonl", jsonl);
        out.add_json("frames_report.json", &report)?;
        Ok(out)
    }

    fn features(&self) -> Result<StageOutput> {
        let fc = &self.config.features;
        let frames = parse_frames_jsonl(&read_text(&self.out("frames.jsonl"))?)?;
        let frames = if fc.categories.is_empty() {
            frames
        } else {
            filter_by_category(frames, &fc.categories)
        };
        if frames.is_empty() {
            return Err(Error::InvalidArgument(
                "no substitution frames to featurize".into(),
            ));
        }
        let unigram = self.unigram()?;
        let vocab = unigram.vocab().clone();
        let gateway = self.gateway(&vocab)?;
        let embeddings = match &fc.embeddings {
            Some(p) => EmbeddingTable::load(p)?,
            None => EmbeddingTable::parse(TOY_EMBEDDINGS)?,
        };
        let table = match &fc.phonetic_features {
            Some(p) => PhoneticFeatureTable::load(p)?,
            None => PhoneticFeatureTable::bundled(),
        };
        let lexicon = match &fc.lexicon {
            Some(p) => PronLexicon::load(p, &table)?,
            None => PronLexicon::parse(TOY_LEXICON, &table)?,
        };
        let src = FeatureSources {
            gateway: &gateway,
            unigram: &unigram,
            vocab: &vocab,
            embeddings: &embeddings,
            lexicon: &lexicon,
            features: &table,
        };
        let options = AssembleOptions {
            noise_var: fc.noise_var,
            phonetic_noise: fc.phonetic_noise,
            seed: self.config.seed,
            missing: fc.missing,
            subsample: fc.subsample,
        };
        let (rows, failed) = assemble_all(&frames, &src, &options)?;
        if rows.is_empty() {
            return Err(report_failure(&failed));
        }
        let mut csv = Vec::new();
        write_rows_csv(&rows, &mut csv)?;
        let mut out = StageOutput::default();
        out.add("rows.csv", csv);
        Ok(out)
    }

    fn fit_table(&self) -> Result<Table> {
        let fc = &self.config.fit;
        let path = if Path::new(&fc.input).is_absolute() {
            PathBuf::from(&fc.input)
        } else {
            self.out(&fc.input)
        };
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let table = Table::from_csv(file)?;
        if fc.exclude_repair && table.names().any(|n| n == "is_repair") {
            table.filter_eq("is_repair", "false")
        } else {
            Ok(table)
        }
    }

    fn fit(&self) -> Result<StageOutput> {
        let fc = &self.config.fit;
        let table = self.fit_table()?;
        let fit = fit_model(&table, fc, &fc.terms, None)?;
        let mut out = StageOutput::default();
        out.add("fit.json", fit.to_json() + "\n");
        if let Some(bc) = &fc.bootstrap {
            let units = unit_index(&table, bc.unit.as_deref())?;
            let result = bootstrap_ci(
                |w| fit_model(&table, fc, &fc.terms, Some(w)),
                &units,
                bc.n_sims,
                self.config.seed,
                bc.level,
            )?;
            out.add_json("bootstrap.json", &result)?;
        }
        Ok(out)
    }

    fn compare(&self) -> Result<StageOutput> {
        let fc = &self.config.fit;
        let cc = &self.config.compare;
        let table = self.fit_table()?;
        let small = fit_model(&table, fc, &cc.small, None)?;
        let big = fit_model(&table, fc, &cc.big, None)?;
        let report = compare(&small, &big)?;
        let mut out = StageOutput::default();
        out.add_json("compare.json", &report)?;
        out.add("compare.txt", report.to_text());
        Ok(out)
    }

    fn simulate(&self) -> Result<StageOutput> {
        let sc = self.config.simulate.as_ref().ok_or_else(|| Error::Config {
            path: "simulate".into(),
            message: "missing".into(),
        })?;
        let (corpus, sim) = run_simulation(sc)?;
        let mut csv = Vec::new();
        write_rows_csv(&sim.rows, &mut csv)?;
        let mut out = StageOutput::default();
        out.add("sim_corpus.jsonl", corpus.to_jsonl());
        out.add("sim_rows.csv", csv);
        out.add_json("ground_truth.json", &sim.truth)?;
        Ok(out)
    }
}

fn report_failure(failures: &[(usize, String)]) -> Error {
    match failures.first() {
        Some((i, msg)) => Error::InvalidArgument(format!("all items failed; first ({i}): {msg}")),
        None => Error::InvalidArgument("nothing to process".into()),
    }
}

/// Dense unit index per row from the distinct values of `column` (row index when `None`).
fn unit_index(table: &Table, column: Option<&str>) -> Result<Vec<usize>> {
    match column {
        None => Ok((0..table.n_rows()).collect()),
        Some(c) => {
            let mut ids: indexmap::IndexMap<&str, usize> = indexmap::IndexMap::new();
            let raw = table.column(c)?.raw();
            Ok(raw
                .iter()
                .map(|v| {
                    let next = ids.len();
                    *ids.entry(v.as_str()).or_insert(next)
                })
                .collect())
        }
    }
}

/// Fits `fit.model` with `terms` on `table`, optionally with frequency weights.
pub fn fit_model(
    table: &Table,
    fit: &FitConfig,
    terms: &[String],
    weights: Option<&[f64]>,
) -> Result<FitResult> {
    let mut spec = DesignSpec::new(terms);
    spec.standardize = fit.standardize;
    let design = build_design(table, &spec)?;
    let y = table.numeric(&fit.response)?;
    match fit.model {
        ModelKind::Ols => fit_ols_weighted(&design, y, weights),
        ModelKind::Logistic => {
            fit_logistic_weighted(&design, y, weights, &LogisticOptions::default())
        }
        ModelKind::LmmRi => {
            if weights.is_some() {
                return Err(Error::InvalidArgument(
                    "frequency weights are not supported by the random-intercept model".into(),
                ));
            }
            let column = fit.group.as_deref().ok_or_else(|| Error::Config {
                path: "fit.group".into(),
                message: "missing".into(),
            })?;
            let groups = table.column(column)?.raw();
            fit_lmm_random_intercept(&design, y, groups, &LmmOptions::default())
        }
    }
}

/// Outcome of one built-in consistency check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast internal consistency checks on the bundled toy corpus: normalization of the n-gram
/// conditionals and infill distributions, the two conditional-PMI identities, likelihood-ratio
/// arithmetic, feature edit distance unit cases and augmentation determinism.
pub fn selfcheck() -> Vec<SelfCheck> {
    use crate::measures::pmi_symmetry_check;
    use crate::ngram::log_sum_exp;
    use crate::noisy::phonetic_distance;
    use crate::stats::lrt_from_loglik;

    let mut checks = Vec::new();
    let mut record = |name: &'static str, outcome: Result<(bool, String)>| {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, e.to_string()));
        checks.push(SelfCheck {
            name,
            passed,
            detail,
        });
    };

    let trained =
        Corpus::parse_jsonl(TOY_CORPUS, &LoadOptions::default()).and_then(|(corpus, _)| {
            let vocab = Arc::new(Vocabulary::build(&corpus, 1)?);
            let model =
                NGramModel::train(&corpus, vocab, NGramConfig::new(3, 0.1, Direction::Forward))?;
            Ok((corpus, model))
        });
    let (corpus, model) = match trained {
        Ok(t) => t,
        Err(e) => {
            record("toy model", Err(e));
            return checks;
        }
    };
    let utt = &corpus.utterances()[2];
    let ids = model.vocab().encode(&utt.tokens);

    record("forward normalization", {
        let mut worst = 0.0f64;
        for t in 0..=ids.len() {
            let lps: Vec<f64> = model
                .support()
                .iter()
                .map(|&w| model.cond_logprob(w, &ids[..t]))
                .collect();
            worst = worst.max((log_sum_exp(&lps).exp() - 1.0).abs());
        }
        Ok((worst < 1e-9, format!("max |sum - 1| = {worst:.2e}")))
    });
    record("infill normalization", {
        let mut worst = 0.0f64;
        for t in 0..ids.len() {
            let dist = model.infill_distribution(&ids[..t], &ids[t + 1..]);
            worst = worst.max((log_sum_exp(&dist).exp() - 1.0).abs());
        }
        Ok((worst < 1e-9, format!("max |sum - 1| = {worst:.2e}")))
    });
    record(
        "conditional PMI identity",
        (|| {
            let mut worst = 0.0f64;
            for t in 0..utt.len() {
                let (lhs, rhs) = pmi_symmetry_check(&model, utt, t)?;
                worst = worst.max((lhs - rhs).abs());
            }
            Ok((worst < 1e-9, format!("max difference {worst:.2e}")))
        })(),
    );
    record(
        "likelihood-ratio arithmetic",
        (|| {
            let a = lrt_from_loglik(0.0, 2551.95, 1)?;
            let b = lrt_from_loglik(0.0, 41.06, 1)?;
            let ok = (a.chi2 - 5103.9).abs() < 5e-3 && (b.chi2 - 82.12).abs() < 5e-3;
            Ok((ok, format!("chi2 = {:.2}, {:.2}", a.chi2, b.chi2)))
        })(),
    );
    record(
        "feature edit distance",
        (|| {
            let table = PhoneticFeatureTable::bundled();
            let a = table.matrix(&["a"])?;
            let ab = table.matrix(&["a", "b"])?;
            let (p, b) = (table.matrix(&["p"])?, table.matrix(&["b"])?);
            let same = phonetic_distance(&ab, &ab);
            let insert = phonetic_distance(&a, &ab);
            let voicing = phonetic_distance(&p, &b);
            let ok = same == 0.0 && insert == 1.0 && (voicing - 1.0 / 22.0).abs() < 1e-12;
            Ok((
                ok,
                format!("identity {same}, insertion {insert}, p/b {voicing:.4}"),
            ))
        })(),
    );
    record(
        "augmentation determinism",
        (|| {
            let options = AugmentOptions {
                seed: 7,
                ..AugmentOptions::default()
            };
            let first = augment_corpus(&corpus, &options)?.to_text();
            let second = augment_corpus(&corpus, &options)?.to_text();
            Ok((first == second, format!("{} records", corpus.len())))
        })(),
    );
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_specs() {
        assert_eq!(
            "ngram".parse::<BackendSpec>().unwrap(),
            BackendSpec::NGram(None)
        );
        assert_eq!(
            "ngram:/m".parse::<BackendSpec>().unwrap(),
            BackendSpec::NGram(Some(PathBuf::from("/m")))
        );
        assert_eq!(
            "http://h:1".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("//h:1".into())
        );
        assert_eq!(
            "stdio:python3 s.py".parse::<BackendSpec>().unwrap(),
            BackendSpec::Stdio("python3 s.py".into())
        );
        assert!("grpc:x".parse::<BackendSpec>().is_err());
        assert!("http:".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = PipelineConfig::parse(r#"{"ngram": {"ordr": 2}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "ngram.ordr"),
            other => panic!("{other:?}"),
        }
        let lenient = PipelineConfig::parse(r#"{"strict": false, "ngram": {"ordr": 2}}"#).unwrap();
        assert_eq!(lenient.ngram.order, 3);
    }

    #[test]
    fn type_errors_report_their_path() {
        match PipelineConfig::parse(r#"{"fit": {"bootstrap": {"n_sims": "many"}}}"#).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "fit.bootstrap.n_sims"),
            other => panic!("{other:?}"),
        }
        match PipelineConfig::parse(r#"{"stages": ["score", "plot"]}"#).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "stages[1]"),
            other => panic!("{other:?}"),
        }
        match PipelineConfig::parse(r#"{"augment": {"swap_prob": 2}}"#).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "augment.swap_prob"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_round_trip() {
        let text = serde_json::to_string(&PipelineConfig::default()).unwrap();
        assert_eq!(
            PipelineConfig::parse(&text).unwrap(),
            PipelineConfig::default()
        );
        for stage in Stage::ALL {
            assert_eq!(stage.name().parse::<Stage>().unwrap(), stage);
        }
    }

    #[test]
    fn selfcheck_passes() {
        for c in selfcheck() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn exit_codes() {
        let config: PipelineError = Error::Config {
            path: "x".into(),
            message: "y".into(),
        }
        .into();
        assert_eq!(config.exit_code(), 2);
        let stage = PipelineError::Stage {
            stage: Stage::Fit,
            source: Error::EmptyCorpus,
        };
        assert_eq!(stage.exit_code(), 1);
        assert!(stage.to_string().contains("stage fit failed"));
    }
}
