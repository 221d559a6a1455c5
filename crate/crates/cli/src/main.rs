use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mixlabel_cli::eval::{render_table, run_grid as eval_grid, RowSink};
use mixlabel_cli::manifest::{Manifest, LEDGER_FILE};
use mixlabel_cli::report::{find_run_dirs, group_and_aggregate, load_run, render_runs};
use mixlabel_cli::runs::{render_summary, run_grid, write_summary_csv, Provenance, RunGrid};
use mixlabel_cli::service::{serve, spawn_run, ServiceRun, ServiceState};
use mixlabel_cli::setup::{
    build_backend, describe_input, load_prices, load_split, load_splits, DataArgs, EndpointArgs,
    ExperimentConfig,
};
use mixlabel_cli::synth_cmd::{review_splits, two_vocab_splits};
use mixlabel_core::annotator::DemoStrategy;
use mixlabel_core::corpus::Split;
use mixlabel_core::ledger::{round_cents, Ledger};
use mixlabel_core::query::QueryStrategy;
use mixlabel_core::router::{AnnotationMode, GoldOracle, HumanQueue};
use mixlabel_core::synth::VocabConfig;

#[derive(Parser)]
#[command(name = "mixlabel", version, about = "Active learning with LLM and human annotators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure LLM label consistency and accuracy over demos-per-class × demo strategy.
    AnnotateEval(EvalArgs),
    /// Run seeded AL experiments over annotation modes and query strategies.
    AlRun(RunArgs),
    /// Run one AL experiment whose escalations are labeled by people over HTTP.
    Serve(ServeArgs),
    /// Verify and summarise finished run directories.
    Report(ReportArgs),
    /// Write synthetic train/test CSV files.
    Synth(SynthArgs),
}

/// Flags shared by commands that read an experiment config.
#[derive(clap::Args)]
struct Common {
    /// Experiment TOML ([data], [run], [endpoint], [stub], [eval]).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    endpoint: EndpointArgs,
    /// Price table TOML.
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Dataset name used in run ids and reports.
    #[arg(long)]
    dataset: Option<String>,
    /// Plural description of the texts for the prompt, e.g. "movie reviews".
    #[arg(long)]
    text_type: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        self.data.apply(&mut cfg.data);
        self.endpoint.apply(&mut cfg.endpoint, &mut cfg.stub);
        if let Some(p) = &self.prices {
            cfg.prices = Some(p.clone());
        }
        if let Some(d) = &self.dataset {
            cfg.run.dataset = d.clone();
            cfg.eval.dataset = d.clone();
        }
        if let Some(t) = &self.text_type {
            cfg.run.text_type = t.clone();
            cfg.eval.text_type = t.clone();
        }
        Ok(cfg)
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Demos per class to try, e.g. 1,2,3,4,5.
    #[arg(long, value_delimiter = ',')]
    demos: Option<Vec<usize>>,
    /// Demo strategies to try.
    #[arg(long, value_delimiter = ',', value_parser = parse_demo_strategy)]
    strategies: Option<Vec<DemoStrategy>>,
    /// Output directory.
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Annotation modes: human, mixed.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    modes: Option<Vec<AnnotationMode>>,
    /// Query strategies: random|R, least_confidence|LC, breaking_ties|BT.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Option<Vec<QueryStrategy>>,
    /// Explicit seeds; otherwise `runs` consecutive seeds from the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_k: Option<usize>,
    #[arg(long)]
    init_size: Option<usize>,
    /// Root for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AnnotationMode>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<QueryStrategy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_k: Option<usize>,
    #[arg(long, default_value = "127.0.0.1:8090")]
    bind: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Stop serving once the run completes or fails.
    #[arg(long)]
    exit_on_complete: bool,
    /// Give up on a human round after this many seconds.
    #[arg(long)]
    human_timeout_secs: Option<u64>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Run directories or roots to search for result.json.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Also write the aggregate table as CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corpus {
    Reviews,
    TwoVocab,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "reviews")]
    kind: Corpus,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Two-vocab only: fraction of training labels flipped.
    #[arg(long)]
    label_noise: Option<f64>,
}

fn parse_mode(s: &str) -> Result<AnnotationMode, String> {
    s.parse()
}

fn parse_strategy(s: &str) -> Result<QueryStrategy, String> {
    QueryStrategy::ALL
        .into_iter()
        .find(|q| q.abbreviation().eq_ignore_ascii_case(s))
        .map(Ok)
        .unwrap_or_else(|| s.parse())
}

fn parse_demo_strategy(s: &str) -> Result<DemoStrategy, String> {
    s.parse()
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::AnnotateEval(a) => annotate_eval(a),
        Command::AlRun(a) => al_run(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn annotate_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(s) = args.seed {
        cfg.eval.seed = s;
    }
    if let Some(d) = args.demos {
        cfg.eval.demos_per_class = d;
    }
    if let Some(s) = args.strategies {
        cfg.eval.strategies = s;
    }
    let path = cfg
        .data
        .train
        .clone()
        .context("no data given (--train)")?;
    let dataset = load_split(&path, Split::Train, cfg.data.classes.as_deref())?;
    let prices = load_prices(cfg.prices.as_deref())?;
    let (backend, endpoint) = build_backend(&cfg.endpoint, &cfg.stub, &[&dataset])?;
    let manifest = Manifest::new(
        "annotate-eval",
        &cfg.eval,
        vec![describe_input(&path, dataset.len())?],
        endpoint,
        cfg.eval.seed,
    )?;
    let dir = manifest.create_dir(&args.out)?;
    let mut ledger = Ledger::new(prices.clone()).with_journal(&dir.join(LEDGER_FILE))?;
    let mut sink = RowSink::create(&dir.join("grid.csv"))?;
    let rows = eval_grid(&dataset, &cfg.eval, backend.as_ref(), &mut ledger, |row| {
        tracing::info!(n = row.demos_per_class, strategy = %row.strategy, status = %row.status, "cell done");
        sink.write(row)
    })?;
    ledger.verify(&prices)?;
    print!("{}", render_table(&rows));
    println!(
        "total cost ${}  grid: {}",
        round_cents(ledger.total()),
        sink.path.display()
    );
    Ok(())
}

fn al_run(args: RunArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(v) = args.iterations {
        cfg.run.iterations = v;
    }
    if let Some(v) = args.batch_k {
        cfg.run.batch_k = v;
    }
    if let Some(v) = args.init_size {
        cfg.run.init_size = v;
    }
    if let Some(v) = args.runs {
        cfg.run.runs = v;
    }
    let seeds = args
        .seeds
        .unwrap_or_else(|| (0..cfg.run.runs as u64).map(|i| cfg.run.seed + i).collect());
    let grid = RunGrid {
        base: cfg.run.clone(),
        modes: args.modes.unwrap_or_else(|| vec![cfg.run.mode]),
        strategies: args.strategies.unwrap_or_else(|| vec![cfg.run.strategy]),
        seeds,
    };
    let (train, test) = load_splits(&cfg.data)?;
    let prices = load_prices(cfg.prices.as_deref())?;
    let needs_llm = grid.modes.contains(&AnnotationMode::Mixed);
    let (backend, endpoint) = build_backend(&cfg.endpoint, &cfg.stub, &[&train, &test])?;
    let human = GoldOracle::for_dataset(&train)?;
    let provenance = Provenance {
        out: args.out.clone(),
        inputs: input_files(&cfg, train.len(), test.len())?,
        endpoint,
    };
    let results = run_grid(
        &grid,
        Arc::clone(&train),
        &test,
        needs_llm.then_some(backend.as_ref()),
        &human,
        &prices,
        Some(&provenance),
    )?;
    let aggregates: Vec<_> = results.into_iter().map(|(a, _)| a).collect();
    std::fs::create_dir_all(&args.out)?;
    let summary = args.out.join("summary.csv");
    write_summary_csv(std::fs::File::create(&summary)?, &aggregates)?;
    print!("{}", render_summary(&aggregates));
    println!("summary: {}", summary.display());
    Ok(())
}

fn input_files(
    cfg: &ExperimentConfig,
    train_rows: usize,
    test_rows: usize,
) -> Result<Vec<mixlabel_cli::setup::InputFile>> {
    let mut out = Vec::new();
    for (p, rows) in [(&cfg.data.train, train_rows), (&cfg.data.test, test_rows)] {
        if let Some(p) = p {
            out.push(describe_input(p, rows)?);
        }
    }
    Ok(out)
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(v) = args.mode {
        cfg.run.mode = v;
    }
    if let Some(v) = args.strategy {
        cfg.run.strategy = v;
    }
    if let Some(v) = args.seed {
        cfg.run.seed = v;
    }
    if let Some(v) = args.iterations {
        cfg.run.iterations = v;
    }
    if let Some(v) = args.batch_k {
        cfg.run.batch_k = v;
    }
    let (train, test) = load_splits(&cfg.data)?;
    let prices = load_prices(cfg.prices.as_deref())?;
    let (backend, endpoint) = build_backend(&cfg.endpoint, &cfg.stub, &[&train, &test])?;
    let manifest = Manifest::new(
        "serve",
        &cfg.run,
        input_files(&cfg, train.len(), test.len())?,
        endpoint,
        cfg.run.seed,
    )?;
    let dir = manifest.create_dir(&args.out)?;
    let queue = Arc::new(HumanQueue::open(
        train.class_names.clone(),
        &dir.join("queue.jsonl"),
    )?);
    let state = ServiceState::new(&cfg.run, queue, train.len());

    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(&args.bind))
        .with_context(|| format!("binding {}", args.bind))?;
    println!("listening on http://{}", listener.local_addr()?);
    println!("run directory: {}", dir.display());

    let worker = spawn_run(
        ServiceRun {
            llm: (cfg.run.mode == AnnotationMode::Mixed).then_some(backend),
            config: cfg.run,
            train,
            test,
            prices,
            dir: Some(dir),
            human_timeout: args.human_timeout_secs.map(Duration::from_secs),
        },
        Arc::clone(&state),
    );
    runtime.block_on(serve(listener, Arc::clone(&state), args.exit_on_complete))?;
    if worker.join().is_err() {
        bail!("run thread panicked");
    }
    let status = state.status();
    println!("state: {:?}", status.state);
    if let Some(e) = status.error {
        bail!("run did not complete: {e}");
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let prices = load_prices(args.prices.as_deref())?;
    let mut runs = Vec::new();
    for root in &args.paths {
        for dir in find_run_dirs(root)? {
            runs.push(load_run(&dir, &prices)?);
        }
    }
    if runs.is_empty() {
        bail!("no result.json found under the given paths");
    }
    print!("{}", render_runs(&runs));
    let aggregates = group_and_aggregate(&runs)?;
    println!();
    print!("{}", render_summary(&aggregates));
    if let Some(p) = &args.summary {
        write_summary_csv(std::fs::File::create(p)?, &aggregates)?;
    }
    let verified = runs.iter().filter(|r| r.ledger.is_some()).count();
    println!("{} runs, {} ledgers verified", runs.len(), verified);
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let splits = match args.kind {
        Corpus::Reviews => review_splits(args.train, args.test, args.seed),
        Corpus::TwoVocab => {
            let mut cfg = VocabConfig::default();
            if let Some(n) = args.label_noise {
                cfg.label_noise = n;
            }
            two_vocab_splits(args.train, args.test, &cfg, args.seed)
        }
    };
    let (train, test) = splits.write(Path::new(&args.out))?;
    println!("{}\n{}", train.display(), test.display());
    Ok(())
}
