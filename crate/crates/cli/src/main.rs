//! `hyperrag` command-line driver.

use std::error::Error as StdError;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperrag::config::Config;
use hyperrag::env::Environment;
use hyperrag::evalkit::{evaluate_run, load_dataset, EvalReport, QAInstance, Run, Timings};
use hyperrag::grpo::{toy_runs, train_toy};
use hyperrag::hypergraph::{self, extract_facts, ingest_facts, Document, ExtractedFact, ExtractionOptions, KnowledgeHypergraph};
use hyperrag::policy::toy::SparseParams;
use hyperrag::policy::{ChatClient, LlmPolicy, ToyPolicy, ToyPolicyParams};
use hyperrag::retrieve::{retrieve, RetrievalQuery};
use hyperrag::synthetic::{facts_jsonl, generate, is_answerable, tasks_jsonl, SyntheticSpec};
use hyperrag::{Encoder, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const EXIT_PARTIAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "hyperrag", version, about = "Agentic retrieval over a knowledge hypergraph")]
struct Cli {
    /// JSON run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and synthetic-task seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic facts file and QA tasks file.
    GenSynthetic(GenArgs),
    /// Build a hypergraph directory from a facts file or raw documents.
    BuildGraph(BuildArgs),
    /// Run fused retrieval for one query.
    Retrieve(RetrieveArgs),
    /// Run the agent on one question.
    RunAgent(RunAgentArgs),
    /// Train the toy policy with GRPO.
    TrainToy(TrainArgs),
    /// Evaluate a policy on a QA dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory for facts.jsonl and tasks.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    entities: usize,
    #[arg(long, default_value_t = 30)]
    hyperedges: usize,
    #[arg(long, default_value_t = 16)]
    questions: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
#[group(id = "input", required = true, multiple = false)]
struct BuildInput {
    /// JSONL facts, one `{"text", "entities", "doc_id"}` per line.
    #[arg(long, group = "input")]
    facts: Option<PathBuf>,
    /// JSONL documents `{"id", "text"}`, extracted with the configured chat model.
    #[arg(long, group = "input")]
    docs: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[command(flatten)]
    input: BuildInput,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long)]
    kv: Option<usize>,
    #[arg(long)]
    kh: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Toy,
    Llm,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "toy")]
    policy: PolicyKind,
    /// Toy policy parameters written by `train-toy`; uniform when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Take the most likely toy action instead of sampling.
    #[arg(long)]
    greedy: bool,
}

#[derive(Debug, Args)]
struct RunAgentArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    question: String,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    max_turns: Option<usize>,
    /// Write one JSON object per turn here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    /// Per-iteration JSONL report.
    #[arg(long)]
    out: PathBuf,
    /// Where to save the trained parameters; defaults to `<out>.params.json`.
    #[arg(long)]
    params_out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Fatal {
        context: String,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Fatal { .. } => 1,
        }
    }
}

fn ctx<E: StdError + Send + Sync + 'static>(context: impl Into<String>) -> impl FnOnce(E) -> CliError {
    let context = context.into();
    move |e| CliError::Fatal {
        context,
        source: Box::new(e),
    }
}

enum Status {
    Done,
    Partial,
}

struct Session {
    config: Config,
    seed: Option<u64>,
}

impl Session {
    fn encoder(&self) -> Result<Box<dyn Encoder>, CliError> {
        self.config.build_encoder().map_err(ctx("building encoder"))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.config.grpo.seed)
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(ctx(format!("creating {}", parent.display())))?;
    }
    fs::write(path, contents).map_err(ctx(format!("writing {}", path.display())))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(ctx(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(ctx(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(ctx(format!("{} line {}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn load_graph(path: &Path, encoder: &dyn Encoder) -> Result<KnowledgeHypergraph, CliError> {
    let graph = hypergraph::load(path).map_err(ctx(format!("loading graph {}", path.display())))?;
    if !graph.is_empty() && graph.encoder_id() != encoder.model_id() {
        return Err(CliError::Usage(format!(
            "graph was built with encoder {} but the config selects {}",
            graph.encoder_id(),
            encoder.model_id()
        )));
    }
    Ok(graph)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(ctx("serializing output"))?);
    Ok(())
}

fn gen_synthetic(s: &Session, a: &GenArgs) -> Result<Status, CliError> {
    let spec = SyntheticSpec {
        seed: s.seed.unwrap_or(0),
        entities: a.entities,
        hyperedges: a.hyperedges,
        questions: a.questions,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let encoder = s.encoder()?;
    let task = generate(&spec, encoder.as_ref(), &s.config.env_params(), &s.config.toy).map_err(ctx("generating task"))?;
    let (graph, _) = ingest_facts(&task.facts, encoder.as_ref()).map_err(ctx("checking task"))?;
    if let Some(bad) = task.tasks.iter().find(|t| !is_answerable(&graph, t)) {
        return Err(CliError::Fatal {
            context: "answerability check".into(),
            source: format!("question {} is not answerable", bad.id).into(),
        });
    }
    write(&a.out.join("facts.jsonl"), facts_jsonl(&task.facts).as_bytes())?;
    write(&a.out.join("tasks.jsonl"), tasks_jsonl(&task.tasks).as_bytes())?;
    let two_hop = task.tasks.iter().filter(|t| t.hops == Some(2)).count();
    if a.json {
        print_json(&serde_json::json!({
            "seed": spec.seed,
            "facts": task.facts.len(),
            "questions": task.tasks.len(),
            "two_hop": two_hop,
        }))?;
    } else {
        println!(
            "wrote {} facts and {} questions ({two_hop} two-hop) to {}",
            task.facts.len(),
            task.tasks.len(),
            a.out.display()
        );
    }
    Ok(Status::Done)
}

#[derive(Deserialize)]
struct DocLine {
    id: String,
    text: String,
}

fn build_graph(s: &Session, a: &BuildArgs) -> Result<Status, CliError> {
    let encoder = s.encoder()?;
    let mut status = Status::Done;
    let mut warnings = 0;
    let facts: Vec<ExtractedFact> = match (&a.input.facts, &a.input.docs) {
        (Some(path), _) => read_jsonl(path)?,
        (None, Some(path)) => {
            let docs: Vec<Document> = read_jsonl::<DocLine>(path)?
                .into_iter()
                .map(|d| Document { id: d.id, text: d.text })
                .collect();
            let settings = s.config.chat.settings().map_err(ctx("chat config"))?;
            let client = ChatClient::new(settings).map_err(ctx("chat client"))?;
            let outcome = extract_facts(&docs, &client, ExtractionOptions::default()).map_err(ctx("extraction"))?;
            for skip in &outcome.skipped {
                log::warn!("skipped document {}: {}", skip.doc_id, skip.reason);
            }
            if outcome.is_partial() {
                status = Status::Partial;
            }
            warnings = outcome.skipped.len();
            outcome.facts
        }
        (None, None) => return Err(CliError::Usage("one of --facts or --docs is required".into())),
    };
    let (graph, report) = ingest_facts(&facts, encoder.as_ref()).map_err(ctx("building graph"))?;
    for r in &report.rejected {
        log::warn!("fact {} rejected: {}", r.fact_index, r.reason);
    }
    let manifest = hypergraph::save(&graph, &a.out).map_err(ctx(format!("saving graph to {}", a.out.display())))?;
    if a.json {
        print_json(&serde_json::json!({
            "entities": manifest.entity_count,
            "hyperedges": manifest.hyperedge_count,
            "accepted": report.accepted,
            "rejected": report.rejected,
            "extraction_warnings": warnings,
        }))?;
    } else {
        println!(
            "graph with {} entities and {} hyperedges written to {} ({} facts rejected)",
            manifest.entity_count,
            manifest.hyperedge_count,
            a.out.display(),
            report.rejected.len()
        );
    }
    Ok(status)
}

fn cmd_retrieve(s: &Session, a: &RetrieveArgs) -> Result<Status, CliError> {
    let encoder = s.encoder()?;
    let graph = load_graph(&a.graph, encoder.as_ref())?;
    let mut params = s.config.retrieval;
    params.k_v = a.kv.unwrap_or(params.k_v);
    params.k_h = a.kh.unwrap_or(params.k_h);
    params.k = a.k.unwrap_or(params.k);
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let block = retrieve(&graph, encoder.as_ref(), &RetrievalQuery::new(a.query.clone()), &params)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.json {
        print_json(&block.facts)?;
    } else {
        println!("{}", block.render());
    }
    Ok(Status::Done)
}

fn toy_params(s: &Session, path: Option<&Path>) -> Result<ToyPolicyParams, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(ctx(format!("reading {}", p.display())))?;
            let sparse: SparseParams = serde_json::from_str(&text).map_err(ctx(format!("parsing {}", p.display())))?;
            ToyPolicyParams::from_sparse(&sparse).map_err(ctx(format!("loading {}", p.display())))
        }
        None => Ok(s.config.toy.init_params(s.config.env.max_turns)),
    }
}

fn llm_client(s: &Session) -> Result<ChatClient, CliError> {
    let settings = s.config.chat.settings().map_err(|e| CliError::Usage(e.to_string()))?;
    ChatClient::new(settings).map_err(ctx("chat client"))
}

fn trace_jsonl(runs: &[&Trajectory]) -> Result<String, CliError> {
    let mut out = String::new();
    for t in runs {
        for rec in t.trace() {
            out.push_str(&serde_json::to_string(&rec).map_err(ctx("serializing trace"))?);
            out.push('\n');
        }
    }
    Ok(out)
}

fn run_agent(s: &Session, a: &RunAgentArgs) -> Result<Status, CliError> {
    let encoder = s.encoder()?;
    let graph = load_graph(&a.graph, encoder.as_ref())?;
    let mut env_params = s.config.env_params();
    if let Some(m) = a.max_turns {
        env_params.max_turns = m;
    }
    if env_params.max_turns == 0 {
        return Err(CliError::Usage("--max-turns must be at least 1".into()));
    }
    let env = Environment::new(&graph, encoder.as_ref(), env_params);
    let traj = match a.policy.policy {
        PolicyKind::Toy => {
            let params = toy_params(s, a.policy.params.as_deref())?;
            let menu = s.config.toy.menu();
            let fallback: Vec<String> = graph.entities().iter().map(|e| e.name.clone()).collect();
            let mut policy = ToyPolicy::new(&params, &menu, &fallback, ChaCha8Rng::seed_from_u64(s.seed()));
            policy.temperature = s.config.grpo.temperature;
            policy.greedy = a.policy.greedy;
            env.rollout(&mut policy, &a.question).map_err(ctx("rollout"))?
        }
        PolicyKind::Llm => {
            let mut policy = LlmPolicy::new(llm_client(s)?);
            env.rollout(&mut policy, &a.question).map_err(ctx("rollout"))?
        }
    };
    if let Some(path) = &a.trace {
        write(path, trace_jsonl(&[&traj])?.as_bytes())?;
    }
    if a.json {
        print_json(&serde_json::json!({
            "question": traj.question,
            "answer": traj.final_answer,
            "turns": traj.turns.len(),
            "retrieval_turns": traj.retrieval_turns(),
            "terminated": traj.terminated,
        }))?;
    } else {
        for (i, t) in traj.turns.iter().enumerate() {
            println!("turn {i}: {}", t.raw.replace('\n', " "));
        }
        println!("answer: {}", traj.final_answer.as_deref().unwrap_or("(none)"));
    }
    Ok(Status::Done)
}

fn train(s: &Session, a: &TrainArgs) -> Result<Status, CliError> {
    let encoder = s.encoder()?;
    let graph = load_graph(&a.graph, encoder.as_ref())?;
    let tasks: Vec<QAInstance> = load_dataset(&a.tasks, None).map_err(ctx("loading tasks"))?;
    let mut cfg = s.config.grpo;
    cfg.seed = s.seed();
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let env = Environment::new(&graph, encoder.as_ref(), s.config.env_params());
    let report = train_toy(&env, &tasks, &s.config.toy, &cfg).map_err(ctx("training"))?;
    write(&a.out, report.to_jsonl().as_bytes())?;
    let params_path = a.params_out.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".params.json");
        PathBuf::from(p)
    });
    let sparse = serde_json::to_string(&report.params.to_sparse()).map_err(ctx("serializing params"))?;
    write(&params_path, sparse.as_bytes())?;
    let summary = serde_json::json!({
        "iterations": cfg.iterations,
        "baseline_reward": report.baseline(),
        "final_reward": report.tail_mean(50),
        "aborted_rollouts": report.aborted_rollouts,
        "discarded_groups": report.discarded_groups,
        "params": params_path.display().to_string(),
    });
    if a.json {
        print_json(&summary)?;
    } else {
        println!(
            "trained {} iterations: mean reward {:.4} -> {:.4} (last 50); params in {}",
            cfg.iterations,
            report.baseline(),
            report.tail_mean(50),
            params_path.display()
        );
    }
    Ok(Status::Done)
}

fn evaluate(s: &Session, a: &EvaluateArgs) -> Result<Status, CliError> {
    let encoder = s.encoder()?;
    let graph = load_graph(&a.graph, encoder.as_ref())?;
    let dataset = load_dataset(&a.dataset, a.limit).map_err(ctx("loading dataset"))?;
    let env = Environment::new(&graph, encoder.as_ref(), s.config.env_params());
    let start = Instant::now();
    let runs: Vec<Run> = match a.policy.policy {
        PolicyKind::Toy => {
            let params = toy_params(s, a.policy.params.as_deref())?;
            toy_runs(
                &env,
                &params,
                &s.config.toy.menu(),
                &dataset,
                s.config.grpo.temperature,
                a.policy.greedy,
                s.seed(),
            )
            .map_err(ctx("evaluation rollouts"))?
        }
        PolicyKind::Llm => {
            let mut policy = LlmPolicy::new(llm_client(s)?);
            dataset
                .iter()
                .map(|inst| {
                    let trajectory = match env.rollout(&mut policy, &inst.question) {
                        Ok(t) => Some(t),
                        Err(e) => {
                            log::warn!("rollout for {} aborted: {e}", inst.id);
                            None
                        }
                    };
                    Run {
                        id: inst.id.clone(),
                        trajectory,
                    }
                })
                .collect()
        }
    };
    let mut report: EvalReport = evaluate_run(&dataset, &runs, encoder.as_ref()).map_err(ctx("scoring"))?;
    let total_ms = start.elapsed().as_secs_f64() * 1000.0;
    report.timings = Some(Timings {
        total_ms,
        per_instance_ms: total_ms / dataset.len().max(1) as f64,
    });
    let body = serde_json::to_string_pretty(&report).map_err(ctx("serializing report"))?;
    write(&a.out, body.as_bytes())?;
    let agg = &report.aggregates;
    if a.json {
        print_json(agg)?;
    } else {
        println!(
            "{} instances: EM {:.4}, F1 {:.4}, mean turns {:.2}, aborted {}",
            agg.count, agg.em, agg.f1, agg.mean_turns, agg.aborted
        );
    }
    Ok(if agg.aborted > 0 { Status::Partial } else { Status::Done })
}

fn dispatch(cli: &Cli) -> Result<Status, CliError> {
    let config = match &cli.config {
        Some(p) => Config::load(p).map_err(ctx(format!("config {}", p.display())))?,
        None => Config::default(),
    };
    let session = Session { config, seed: cli.seed };
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(&session, a),
        Command::BuildGraph(a) => build_graph(&session, a),
        Command::Retrieve(a) => cmd_retrieve(&session, a),
        Command::RunAgent(a) => run_agent(&session, a),
        Command::TrainToy(a) => train(&session, a),
        Command::Evaluate(a) => evaluate(&session, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match dispatch(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
