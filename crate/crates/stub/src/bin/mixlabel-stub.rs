use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use mixlabel_core::corpus::{load_dataset, DataFormat, Split};
use mixlabel_stub::{serve, GoldSource, ReplyFormat, Stub, StubConfig};
use tracing_subscriber::EnvFilter;

/// Deterministic chat-completions server that labels from gold data.
#[derive(Debug, Parser)]
#[command(name = "mixlabel-stub", version)]
struct Args {
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8089")]
    bind: SocketAddr,
    /// Dataset files (csv or jsonl with text,label) providing gold labels.
    #[arg(long = "gold", required = true)]
    gold: Vec<PathBuf>,
    /// Class names in order; defaults to the sorted labels of the first file.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// TOML file with StubConfig fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    error_rate: Option<f64>,
    #[arg(long)]
    inconsistency_rate: Option<f64>,
    #[arg(long)]
    latency_ms: Option<u64>,
    #[arg(long, value_parser = ["numbered", "json"])]
    reply_format: Option<String>,
}

fn build(args: &Args) -> Result<Stub, String> {
    let mut config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            toml::from_str::<StubConfig>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => StubConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.error_rate {
        config.error_rate = e;
    }
    if let Some(r) = args.inconsistency_rate {
        config.inconsistency_rate = r;
    }
    if args.latency_ms.is_some() {
        config.latency_ms = args.latency_ms;
    }
    match args.reply_format.as_deref() {
        Some("json") => config.reply_format = ReplyFormat::Json,
        Some(_) => config.reply_format = ReplyFormat::Numbered,
        None => {}
    }

    let mut gold: Option<GoldSource> = None;
    let mut classes = args.classes.clone();
    for path in &args.gold {
        let format = DataFormat::from_path(path)
            .ok_or_else(|| format!("{}: cannot tell format from extension", path.display()))?;
        let ds = load_dataset(path, format, Split::Train, classes.as_deref())
            .map_err(|e| e.to_string())?;
        classes.get_or_insert_with(|| ds.class_names.clone());
        match &mut gold {
            None => gold = Some(GoldSource::from_dataset(&ds)),
            Some(g) => g.extend(&ds).map_err(|e| e.to_string())?,
        }
    }
    let gold = gold.ok_or("no gold files given")?;
    Stub::new(config, gold).map_err(|e| e.to_string())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let stub = match build(&args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(args.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}: {e}", args.bind);
            return ExitCode::FAILURE;
        }
    };
    let addr = listener.local_addr().expect("bound socket has an address");
    tracing::info!(gold = stub.gold().len(), "stub ready");
    // the first stdout line is the address, for scripts that launch on port 0
    println!("listening on http://{addr}");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match serve(listener, Arc::new(stub), shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
