//! Command-line entry points.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::{CorpusScope, EngineConfig};
use crate::engine::{Engine, SessionOutcome, SessionResult};
use crate::evaluation::{evaluate_run, full_corpus, load_dataset, MHQAInstance};
use crate::llm::{
    ChatBackend, GatewayError, RecordingBackend, RemoteBackend, RemoteConfig, ReplayBackend,
    ScriptedBackend,
};
use crate::prompting::ExemplarSet;
use crate::retriever::Corpus;
use crate::scorer::{
    write_training_data, LexicalRelevance, RelevanceModel, RemoteRelevance, RemoteRelevanceConfig,
};
use crate::training::sample_training_data;

#[derive(Debug, Parser)]
#[command(
    name = "hopqa",
    version,
    about = "Iterative multi-hop question answering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one question over a JSONL corpus.
    Ask(AskArgs),
    /// Run and score a dataset in the distractor format.
    Eval(EvalArgs),
    /// Write scorer training data sampled from reasoning sessions.
    Sample(SampleArgs),
    /// Run sessions while saving every model call to cassettes.
    Record(RecordArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Remote,
    Replay,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RelevanceKind {
    Lexical,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Pool,
    Full,
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// TOML file with engine settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Answer-vote threshold in (0, 1].
    #[arg(long)]
    pub theta: Option<f64>,
    /// Iterations before the answer is forced.
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Plannings sampled per iteration.
    #[arg(long)]
    pub choices: Option<usize>,
    /// Initial sampling temperature.
    #[arg(long)]
    pub tp0: Option<f64>,
    /// Temperature step when every candidate query repeats an executed one.
    #[arg(long = "delta-tp")]
    pub delta_tp: Option<f64>,
    /// Temperature cap.
    #[arg(long = "tp-max")]
    pub tp_max: Option<f64>,
    /// Clustering radius for duplicate queries.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Carried into the config snapshot for the scorer trainer.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Retrieve from each instance's own documents or from all of them.
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
    /// Replacement few-shot exemplar file.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "remote")]
    pub backend: BackendKind,
    /// Cassette file (ask) or directory of `<id>.jsonl` cassettes (dataset commands).
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    /// Mock script: a JSON array of completion batches.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Chat-completions URL for the remote backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long = "api-key-env")]
    pub api_key_env: Option<String>,
    #[arg(long, value_enum, default_value = "lexical")]
    pub relevance: RelevanceKind,
    /// Scoring service URL for `--relevance remote`.
    #[arg(long = "relevance-url")]
    pub relevance_url: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AskArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, short)]
    pub question: String,
    #[arg(long, default_value = "trace.jsonl")]
    pub trace: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for the report, traces and config snapshot.
    #[arg(long, default_value = "eval-out")]
    pub out: PathBuf,
    /// Evaluate only the first N instances.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training-data file to write.
    #[arg(long, default_value = "training.jsonl")]
    pub out: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["corpus", "dataset"]))]
pub struct RecordArgs {
    #[arg(long, requires = "question")]
    pub corpus: Option<PathBuf>,
    #[arg(long, short)]
    pub question: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Cassette file, or a directory when recording a dataset.
    #[arg(long = "to")]
    pub to: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

type CliResult<T> = Result<T, CliError>;

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ask(args) => cmd_ask(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Sample(args) => cmd_sample(&args),
        Command::Record(args) => cmd_record(&args),
    }
}

impl EngineArgs {
    pub fn resolve(&self) -> CliResult<EngineConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
            None => EngineConfig::default(),
        };
        macro_rules! apply {
            ($flag:expr => $field:ident) => {
                if let Some(v) = $flag {
                    config.$field = v;
                }
            };
        }
        apply!(self.theta => theta);
        apply!(self.max_iters => max_iterations);
        apply!(self.choices => choices);
        apply!(self.tp0 => initial_temperature);
        apply!(self.delta_tp => temperature_step);
        apply!(self.tp_max => max_temperature);
        apply!(self.eps => eps);
        apply!(self.alpha => alpha);
        if let Some(scope) = self.scope {
            config.corpus_scope = match scope {
                ScopeArg::Pool => CorpusScope::Pool,
                ScopeArg::Full => CorpusScope::Full,
            };
        }
        config
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }

    pub fn exemplars(&self) -> CliResult<ExemplarSet> {
        match &self.exemplars {
            None => Ok(ExemplarSet::builtin()),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("exemplars {}: {e}", path.display())))?;
                ExemplarSet::parse(&text).map_err(|e| CliError::Usage(e.to_string()))
            }
        }
    }
}

/// File-system safe form of an instance id.
pub fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Builds chat backends for one command.
struct BackendFactory {
    kind: BackendKind,
    cassette: Option<PathBuf>,
    script: Option<Vec<Vec<String>>>,
    remote: RemoteConfig,
}

impl BackendFactory {
    fn new(args: &BackendArgs) -> CliResult<Self> {
        let mut remote = RemoteConfig::default();
        if let Some(e) = &args.endpoint {
            remote.endpoint = e.clone();
        }
        if let Some(m) = &args.model {
            remote.model = m.clone();
        }
        if let Some(k) = &args.api_key_env {
            remote.api_key_env = k.clone();
        }
        let mut script = None;
        match args.backend {
            BackendKind::Mock => {
                let Some(path) = &args.script else {
                    return usage("--backend mock requires --script");
                };
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("script {}: {e}", path.display())))?;
                script = Some(
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("script {}: {e}", path.display())))?,
                );
            }
            BackendKind::Replay if args.cassette.is_none() => {
                return usage("--backend replay requires --cassette")
            }
            BackendKind::Replay => {}
            BackendKind::Remote => {
                if remote.endpoint.trim().is_empty() {
                    return usage("--backend remote requires an endpoint");
                }
                if std::env::var_os(&remote.api_key_env).is_none() {
                    return usage(format!(
                        "--backend remote requires the {} environment variable",
                        remote.api_key_env
                    ));
                }
            }
        }
        Ok(BackendFactory {
            kind: args.backend,
            cassette: args.cassette.clone(),
            script,
            remote,
        })
    }

    fn build(&self, cassette: Option<&Path>) -> Result<Box<dyn ChatBackend>, GatewayError> {
        Ok(match self.kind {
            BackendKind::Mock => Box::new(ScriptedBackend::new(
                self.script.clone().expect("checked at construction"),
            )),
            BackendKind::Remote => Box::new(RemoteBackend::new(self.remote.clone())?),
            BackendKind::Replay => Box::new(ReplayBackend::load(
                cassette.expect("checked at construction"),
            )?),
        })
    }

    fn for_file(&self) -> Result<Box<dyn ChatBackend>, GatewayError> {
        self.build(self.cassette.as_deref())
    }

    /// Dataset commands read `<dir>/<id>.jsonl`.
    fn for_instance(&self, id: &str) -> Result<Box<dyn ChatBackend>, GatewayError> {
        let path = self
            .cassette
            .as_ref()
            .map(|dir| dir.join(format!("{}.jsonl", file_stem_for(id))));
        self.build(path.as_deref())
    }
}

impl BackendArgs {
    fn relevance(&self) -> Box<dyn RelevanceModel> {
        match self.relevance {
            RelevanceKind::Lexical => Box::new(LexicalRelevance),
            RelevanceKind::Remote => {
                let mut config = RemoteRelevanceConfig::default();
                if let Some(url) = &self.relevance_url {
                    config.url = url.clone();
                }
                Box::new(RemoteRelevance::new(config))
            }
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("{what} {} does not exist", path.display()))
    }
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    require_file(path, "corpus")?;
    Ok(Corpus::load_path(path).with_context(|| format!("loading corpus {}", path.display()))?)
}

fn load_instances(path: &Path, limit: Option<usize>) -> CliResult<Vec<MHQAInstance>> {
    require_file(path, "dataset")?;
    let mut instances =
        load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if let Some(n) = limit {
        instances.truncate(n);
    }
    Ok(instances)
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// `trace.jsonl` -> `trace.config.toml` in the same directory.
pub fn snapshot_path_for(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.config.toml"))
}

fn write_snapshot(path: &Path, config: &EngineConfig) -> anyhow::Result<()> {
    create_parent(path)?;
    let text = toml::to_string(config).context("serializing config snapshot")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_trace(path: &Path, outcome: &SessionOutcome) -> anyhow::Result<()> {
    create_parent(path)?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    outcome
        .write_trace(BufWriter::new(file))
        .with_context(|| format!("writing {}", path.display()))
}

fn print_result(result: &SessionResult) {
    println!("Answer: {}", result.answer);
    if !result.reasoning.is_empty() {
        println!("Reasoning: {}", result.reasoning);
    }
    println!(
        "Iterations: {}{} | Evidence: {} | Tokens: {}",
        result.iterations_used,
        if result.forcible { " (forced)" } else { "" },
        result.evidence.len(),
        result.token_cost()
    );
}

pub fn cmd_ask(args: &AskArgs) -> CliResult<()> {
    let config = args.engine.resolve()?;
    let exemplars = args.engine.exemplars()?;
    let factory = BackendFactory::new(&args.backend)?;
    let corpus = load_corpus(&args.corpus)?;
    let relevance = args.backend.relevance();
    let mut backend = factory.for_file()?;
    let engine = Engine::new(&config, &exemplars, relevance.as_ref());
    let outcome = engine
        .run_session(&args.question, &corpus, backend.as_mut())
        .map_err(anyhow::Error::from)?;
    write_trace(&args.trace, &outcome)?;
    write_snapshot(&snapshot_path_for(&args.trace), &config)?;
    print_result(&outcome.result);
    Ok(())
}

/// The corpus each instance's session runs over.
fn pools(instances: &[MHQAInstance], scope: CorpusScope) -> anyhow::Result<Vec<Corpus>> {
    match scope {
        CorpusScope::Pool => instances
            .iter()
            .map(|i| i.pool().with_context(|| format!("instance {}", i.id)))
            .collect(),
        CorpusScope::Full => {
            let shared = full_corpus(instances)?;
            Ok(vec![shared; instances.len()])
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let config = args.engine.resolve()?;
    let exemplars = args.engine.exemplars()?;
    let factory = BackendFactory::new(&args.backend)?;
    if args.workers == 0 {
        return usage("--workers must be at least 1");
    }
    let instances = load_instances(&args.dataset, args.limit)?;
    let corpora = pools(&instances, config.corpus_scope)?;
    let relevance = args.backend.relevance();
    let engine = Engine::new(&config, &exemplars, relevance.as_ref());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .context("building worker pool")?;
    let outcomes: Vec<anyhow::Result<SessionOutcome>> = pool.install(|| {
        instances
            .par_iter()
            .zip(corpora.par_iter())
            .map(|(instance, corpus)| {
                let mut backend = factory.for_instance(&instance.id)?;
                engine
                    .run_session(&instance.question, corpus, backend.as_mut())
                    .with_context(|| format!("instance {}", instance.id))
            })
            .collect()
    });

    let traces = args.out.join("traces");
    fs::create_dir_all(&traces).with_context(|| format!("creating {}", traces.display()))?;
    let mut results = BTreeMap::new();
    for (instance, outcome) in instances.iter().zip(outcomes) {
        let outcome = outcome?;
        write_trace(
            &traces.join(format!("{}.jsonl", file_stem_for(&instance.id))),
            &outcome,
        )?;
        results.insert(instance.id.clone(), outcome.result);
    }
    let report = evaluate_run(&instances, &results, args.limit).map_err(anyhow::Error::from)?;
    let report_path = args.out.join("report.json");
    let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
    text.push('\n');
    fs::write(&report_path, text).with_context(|| format!("writing {}", report_path.display()))?;
    write_snapshot(&args.out.join("config.toml"), &config)?;
    println!("{}", report.aggregate.summary_line());
    Ok(())
}

pub fn cmd_sample(args: &SampleArgs) -> CliResult<()> {
    let config = args.engine.resolve()?;
    let exemplars = args.engine.exemplars()?;
    let factory = BackendFactory::new(&args.backend)?;
    let instances = load_instances(&args.dataset, args.limit)?;
    let relevance = args.backend.relevance();
    let report = sample_training_data(&instances, &config, &exemplars, relevance.as_ref(), |i| {
        Ok(factory.for_instance(&i.id)?)
    })
    .map_err(anyhow::Error::from)?;

    create_parent(&args.out)?;
    let file =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_training_data(&report.examples, BufWriter::new(file))
        .with_context(|| format!("writing {}", args.out.display()))?;
    write_snapshot(&snapshot_path_for(&args.out), &config)?;
    println!(
        "{} examples from {} instances ({} queries without gold, {} failed sessions)",
        report.examples.len(),
        instances.len(),
        report.gold_not_found,
        report.failed.len()
    );
    Ok(())
}

fn record_session(
    engine: &Engine<'_>,
    question: &str,
    corpus: &Corpus,
    inner: Box<dyn ChatBackend>,
    cassette: &Path,
) -> anyhow::Result<SessionOutcome> {
    create_parent(cassette)?;
    let sink =
        File::create(cassette).with_context(|| format!("creating {}", cassette.display()))?;
    let mut backend = RecordingBackend::new(inner, BufWriter::new(sink));
    let outcome = engine.run_session(question, corpus, &mut backend)?;
    let (_, mut sink) = backend.into_parts();
    sink.flush()?;
    Ok(outcome)
}

pub fn cmd_record(args: &RecordArgs) -> CliResult<()> {
    let config = args.engine.resolve()?;
    let exemplars = args.engine.exemplars()?;
    let factory = BackendFactory::new(&args.backend)?;
    let relevance = args.backend.relevance();
    let engine = Engine::new(&config, &exemplars, relevance.as_ref());

    if let Some(corpus_path) = &args.corpus {
        let question = args
            .question
            .as_deref()
            .ok_or_else(|| anyhow!("--question is required"))?;
        let corpus = load_corpus(corpus_path)?;
        let outcome = record_session(&engine, question, &corpus, factory.for_file()?, &args.to)?;
        write_snapshot(&snapshot_path_for(&args.to), &config)?;
        print_result(&outcome.result);
        return Ok(());
    }

    let dataset = args.dataset.as_ref().expect("clap enforces one input");
    let instances = load_instances(dataset, args.limit)?;
    let corpora = pools(&instances, config.corpus_scope)?;
    fs::create_dir_all(&args.to).with_context(|| format!("creating {}", args.to.display()))?;
    for (instance, corpus) in instances.iter().zip(&corpora) {
        let cassette = args
            .to
            .join(format!("{}.jsonl", file_stem_for(&instance.id)));
        let outcome = record_session(
            &engine,
            &instance.question,
            corpus,
            factory.for_instance(&instance.id)?,
            &cassette,
        )
        .with_context(|| format!("instance {}", instance.id))?;
        println!("{}\t{}", instance.id, outcome.result.answer);
    }
    write_snapshot(&args.to.join("config.toml"), &config)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("hopqa").chain(args.iter().copied()))
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "theta = 0.5\nchoices = 3\n").unwrap();
        let cli = parse(&[
            "ask",
            "--corpus",
            "x",
            "-q",
            "q",
            "--config",
            path.to_str().unwrap(),
            "--choices",
            "7",
            "--delta-tp",
            "0.3",
        ])
        .unwrap();
        let Command::Ask(args) = cli.command else {
            panic!()
        };
        let config = args.engine.resolve().unwrap();
        assert_eq!(
            (config.theta, config.choices, config.temperature_step),
            (0.5, 7, 0.3)
        );
    }

    #[test]
    fn missing_corpus_flag_is_usage_error() {
        let err = parse(&["ask", "-q", "q"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn replay_needs_cassette() {
        let cli = parse(&["ask", "--corpus", "x", "-q", "q", "--backend", "replay"]).unwrap();
        assert!(matches!(run(cli), Err(CliError::Usage(_))));
    }

    #[test]
    fn invalid_engine_values_are_usage_errors() {
        let cli = parse(&["ask", "--corpus", "x", "-q", "q", "--theta", "1.5"]).unwrap();
        let Command::Ask(args) = cli.command else {
            panic!()
        };
        assert!(matches!(args.engine.resolve(), Err(CliError::Usage(_))));
    }

    #[test]
    fn snapshot_sits_next_to_output() {
        assert_eq!(
            snapshot_path_for(Path::new("out/trace.jsonl")),
            PathBuf::from("out/trace.config.toml")
        );
        assert_eq!(file_stem_for("5a8b/57f?"), "5a8b_57f_");
    }
}
