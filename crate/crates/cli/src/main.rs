//! `ctxpred` command-line driver.
//!
//! Every subcommand runs one pipeline stage against the output directory; `run` executes the
//! stages listed in the configuration. Flags override the corresponding configuration keys.
//! Exit status: 0 on success, 1 when a stage fails, 2 for invalid configuration or usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxpred::corpus::ErrorCategory;
use ctxpred::gateway::{serve_lines, NGramBackend, ScoreServer, ScoringBackend};
use ctxpred::pipeline::{
    parse_json_config, selfcheck, BootstrapConfig, Pipeline, PipelineConfig, PipelineError, Stage,
};
use ctxpred::stats::ModelKind;
use ctxpred::synth::{ProviderKind, SimulationConfig};
use ctxpred::{Error, NGramModel};

#[derive(Parser, Debug)]
#[command(
    name = "ctxpred",
    version,
    about = "Past- and future-context predictability toolkit"
)]
struct Cli {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scoring backend: ngram, ngram:<dir>, http:<url> or stdio:<command>.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage listed in the configuration.
    Run,
    /// Train forward, backward and unigram n-gram models.
    TrainNgram(TrainArgs),
    /// Write the fill-in-the-middle training file.
    Augment(AugmentArgs),
    /// Score every corpus token under all four contexts.
    Score(CorpusArg),
    /// Derive PMI measures and their correlations from the scored records.
    Measures,
    /// Extract substitution-error frames from annotated disfluencies.
    ExtractFrames(CorpusArg),
    /// Build per-candidate regression rows for every frame.
    Features(FeaturesArgs),
    /// Fit a regression model.
    Fit(FitArgs),
    /// Compare nested models by likelihood ratio and BIC.
    Compare(CompareArgs),
    /// Simulate substitution errors from a known speaker policy.
    Simulate(SimulateArgs),
    /// Run the built-in consistency checks.
    Selfcheck,
    /// Serve n-gram models over the scoring protocol.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct CorpusArg {
    /// JSONL corpus (the bundled toy corpus when omitted).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    speaker_tags: bool,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    swap_prob: Option<f64>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Keep only frames of this category (repeatable).
    #[arg(long = "category")]
    categories: Vec<String>,
    #[arg(long)]
    noise_var: Option<f64>,
    #[arg(long)]
    no_phonetic_noise: bool,
    #[arg(long)]
    subsample: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Ols,
    LmmRi,
    Logistic,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Ols => ModelKind::Ols,
            ModelArg::LmmRi => ModelKind::LmmRi,
            ModelArg::Logistic => ModelKind::Logistic,
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Input CSV (relative to the output directory).
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Design terms, comma-separated (`a`, `a:b`, `a*b`).
    #[arg(long, value_delimiter = ',')]
    terms: Option<Vec<String>>,
    /// Bootstrap resamples for percentile intervals.
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    small: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    big: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProviderArg {
    Independent,
    Pipeline,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation configuration JSON (overrides the `simulate` section).
    #[arg(long)]
    sim_config: Option<PathBuf>,
    #[arg(long)]
    n_utts: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Directory holding `ngram_forward.json` and `ngram_backward.json`.
    #[arg(long)]
    models: PathBuf,
    /// Answer line-delimited JSON on stdin/stdout.
    #[arg(long, conflicts_with = "http", required_unless_present = "http")]
    stdio: bool,
    /// Listen for `POST /score` on this address (`host:port`).
    #[arg(long)]
    http: Option<String>,
    /// Exit after this many HTTP requests.
    #[arg(long)]
    max_requests: Option<usize>,
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        PipelineError::from(e).into()
    }
}

fn usage(message: String) -> Failure {
    Failure {
        code: 2,
        error: anyhow::anyhow!(message),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn absolute(p: PathBuf) -> PathBuf {
    if p.is_relative() {
        std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
    } else {
        p
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let mut c = PipelineConfig::default();
            c.resolve_paths(&std::env::current_dir().unwrap_or_default());
            c
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        if let Some(sim) = &mut config.simulate {
            sim.seed = seed;
        }
    }
    if let Some(b) = &cli.backend {
        config.backend = b.clone();
    }
    if let Some(d) = &cli.out_dir {
        config.out_dir = absolute(d.clone());
    }
    if let Some(j) = cli.jobs {
        config.jobs = j;
    }
    Ok(config)
}

fn set_corpus(config: &mut PipelineConfig, arg: &CorpusArg) {
    if let Some(p) = &arg.corpus {
        config.corpus.path = Some(absolute(p.clone()));
    }
}

fn set_model(config: &mut PipelineConfig, m: &ModelArgs) {
    let fit = &mut config.fit;
    if let Some(k) = m.model {
        fit.model = k.into();
    }
    if let Some(i) = &m.input {
        fit.input = i.clone();
    }
    if let Some(r) = &m.response {
        fit.response = r.clone();
    }
    if m.group.is_some() {
        fit.group = m.group.clone();
    }
    fit.standardize |= m.standardize;
}

fn parse_category(s: &str) -> Result<ErrorCategory, Failure> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Selfcheck => return run_selfcheck(),
        Command::Serve(args) => return serve(args),
        _ => {}
    }
    let mut config = load_config(&cli)?;
    let stage = match &cli.command {
        Command::Run => None,
        Command::TrainNgram(a) => {
            set_corpus(&mut config, &a.corpus);
            let n = &mut config.ngram;
            n.order = a.order.unwrap_or(n.order);
            n.alpha = a.alpha.unwrap_or(n.alpha);
            n.min_count = a.min_count.unwrap_or(n.min_count);
            n.speaker_tags |= a.speaker_tags;
            Some(Stage::TrainNgram)
        }
        Command::Augment(a) => {
            set_corpus(&mut config, &a.corpus);
            config.augment.swap_prob = a.swap_prob.unwrap_or(config.augment.swap_prob);
            Some(Stage::Augment)
        }
        Command::Score(a) => {
            set_corpus(&mut config, a);
            Some(Stage::Score)
        }
        Command::Measures => Some(Stage::Measures),
        Command::ExtractFrames(a) => {
            set_corpus(&mut config, a);
            Some(Stage::ExtractFrames)
        }
        Command::Features(a) => {
            let f = &mut config.features;
            if let Some(p) = &a.embeddings {
                f.embeddings = Some(absolute(p.clone()));
            }
            if let Some(p) = &a.lexicon {
                f.lexicon = Some(absolute(p.clone()));
            }
            if !a.categories.is_empty() {
                f.categories = a
                    .categories
                    .iter()
                    .map(|c| parse_category(c))
                    .collect::<Result<_, _>>()?;
            }
            f.noise_var = a.noise_var.unwrap_or(f.noise_var);
            f.phonetic_noise &= !a.no_phonetic_noise;
            if a.subsample.is_some() {
                f.subsample = a.subsample;
            }
            Some(Stage::Features)
        }
        Command::Fit(a) => {
            set_model(&mut config, &a.model);
            if let Some(t) = &a.terms {
                config.fit.terms = t.clone();
            }
            if let Some(n) = a.bootstrap {
                let b = config
                    .fit
                    .bootstrap
                    .get_or_insert_with(BootstrapConfig::default);
                b.n_sims = n;
            }
            Some(Stage::Fit)
        }
        Command::Compare(a) => {
            set_model(&mut config, &a.model);
            if let Some(t) = &a.small {
                config.compare.small = t.clone();
            }
            if let Some(t) = &a.big {
                config.compare.big = t.clone();
            }
            Some(Stage::Compare)
        }
        Command::Simulate(a) => {
            let mut sim = match &a.sim_config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Failure {
                        code: 1,
                        error: anyhow::anyhow!("{}: {e}", path.display()),
                    })?;
                    parse_json_config::<SimulationConfig>(&text, true)?.0
                }
                None => config
                    .simulate
                    .clone()
                    .unwrap_or_else(|| default_simulation(config.seed)),
            };
            if let Some(seed) = cli.seed {
                sim.seed = seed;
            }
            sim.n_utts = a.n_utts.unwrap_or(sim.n_utts);
            sim.temperature = a.temperature.unwrap_or(sim.temperature);
            if let Some(p) = a.provider {
                sim.provider = match p {
                    ProviderArg::Independent => ProviderKind::Independent,
                    ProviderArg::Pipeline => ProviderKind::Pipeline,
                };
            }
            config.simulate = Some(sim);
            Some(Stage::Simulate)
        }
        Command::Selfcheck | Command::Serve(_) => unreachable!("handled above"),
    };
    if let Some(s) = stage {
        config.stages = vec![s];
    }
    let pipeline = Pipeline::new(config)?;
    let manifest = pipeline.run()?;
    for (name, entry) in &manifest.files {
        if pipeline.config().stages.contains(&entry.stage) {
            println!(
                "{}  {}",
                entry.sha256,
                pipeline.config().out_dir.join(name).display()
            );
        }
    }
    Ok(())
}

fn default_simulation(seed: u64) -> SimulationConfig {
    serde_json::from_value(serde_json::json!({ "n_utts": 1000, "seed": seed }))
        .expect("default simulation config deserializes")
}

fn run_selfcheck() -> Result<(), Failure> {
    let checks = selfcheck();
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Failure {
            code: 1,
            error: anyhow::anyhow!("{failed} of {} self-checks failed", checks.len()),
        });
    }
    Ok(())
}

fn load_backend(dir: &Path) -> Result<NGramBackend, Error> {
    let fwd = NGramModel::load(dir.join("ngram_forward.json"))?;
    let bwd_path = dir.join("ngram_backward.json");
    let bwd = if bwd_path.exists() {
        Some(NGramModel::load(bwd_path)?)
    } else {
        None
    };
    NGramBackend::new(Arc::new(fwd), bwd.map(Arc::new))
}

fn serve(args: &ServeArgs) -> Result<(), Failure> {
    let backend = load_backend(&args.models)?;
    if args.stdio {
        let stdin = std::io::stdin();
        serve_lines(&backend, stdin.lock(), std::io::stdout().lock())?;
        return Ok(());
    }
    let addr = args
        .http
        .as_deref()
        .expect("clap requires --http without --stdio");
    let server = ScoreServer::bind(addr)?;
    println!(
        "listening on http://{} ({})",
        server.local_addr(),
        backend.model_id()
    );
    server.serve(&backend, args.max_requests)?;
    Ok(())
}
