use std::io::{Read, Write};
use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use hiddenscope::pipeline::{extract_bundle, load_calibration, load_dump};
use hiddenscope::report::{analyze, AnalysisRequest, Op, Source};
use hiddenscope::server::{self, AppState, DEFAULT_CACHE_SIZE};
use hiddenscope::sidecar::{Endpoint, SidecarClient};
use hiddenscope::ServiceError;
use hiddenscope_core::lens::LensConfig;
use hiddenscope_core::linearity::DEFAULT_LAMBDA;
use hiddenscope_core::token_analysis::{apply_removal, RemovalPolicy};

#[derive(Parser)]
#[command(name = "hiddenscope", version, about = "Layer-by-layer analysis of language-model hidden states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a dump (or text, through the extractor) and write a JSON report.
    Analyze(AnalyzeArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Apply a word-removal policy to each line of stdin, writing one line per input line.
    Remove {
        /// Comma-separated subset of stopwords, punctuation, articles.
        #[arg(long)]
        policy: String,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Container file; its `.tokens.json` must sit next to it.
    #[arg(long, conflicts_with = "text", required_unless_present = "text")]
    dump: Option<PathBuf>,
    #[arg(long, requires = "model")]
    text: Option<String>,
    #[arg(long, requires = "text")]
    model: Option<String>,
    /// Comma-separated ops.
    #[arg(long, default_value = "nonlinearity,lens,intrinsic_dim")]
    ops: String,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    ridge_lambda: f64,
    #[arg(long, default_value_t = LensConfig::default().top_k)]
    top_k: usize,
    /// Project raw states without the final norm.
    #[arg(long)]
    no_final_norm: bool,
    /// Extra dumps pooled into the linear-map fits (repeatable).
    #[arg(long)]
    calibration: Vec<PathBuf>,
    #[arg(long, default_value_t = hiddenscope::report::DEFAULT_HISTOGRAM_BINS)]
    bins: usize,
    #[arg(long, default_value_t = hiddenscope_core::intrinsic_dim::DEFAULT_DISCARD_FRACTION)]
    discard_fraction: f64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sidecar address for text mode (host:port or unix:/path).
    #[arg(long)]
    extractor: Option<String>,
    /// Sidecar timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8787)]
    port: u16,
    /// Bind address; use 0.0.0.0 to expose beyond loopback.
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    /// Number of parsed dumps kept in memory.
    #[arg(long, default_value_t = DEFAULT_CACHE_SIZE)]
    cache_size: usize,
    /// Directory of static dashboard assets served under /ui.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn client(addr: Option<&str>, timeout: u64) -> Result<Option<SidecarClient>, ServiceError> {
    addr.map(|a| {
        let endpoint: Endpoint = a.parse()?;
        Ok(SidecarClient::new(endpoint, Duration::from_secs(timeout)))
    })
    .transpose()
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn run_analyze(args: AnalyzeArgs) -> Result<i32, ServiceError> {
    let ops = Op::parse_list(&args.ops)?;
    let source = match (&args.dump, &args.text, &args.model) {
        (Some(path), _, _) => Source::Dump {
            dump_path: path.display().to_string(),
        },
        (None, Some(text), Some(model)) => Source::Text {
            model_id: model.clone(),
            text: text.clone(),
        },
        _ => return Err(ServiceError::Request("need --dump, or --text with --model".into())),
    };
    let mut request = AnalysisRequest::new(Some(source.clone()), ops);
    request.ridge_lambda = args.ridge_lambda;
    request.lens_config = LensConfig {
        apply_final_norm: !args.no_final_norm,
        top_k: args.top_k,
    };
    request.calibration = args.calibration.iter().map(|p| p.display().to_string()).collect();
    request.histogram_bins = args.bins;
    request.discard_fraction = args.discard_fraction;

    let bundle = match source {
        Source::Dump { dump_path } => load_dump(dump_path)?,
        Source::Text { model_id, text } => {
            let client = client(args.extractor.as_deref(), args.timeout)?
                .ok_or_else(|| ServiceError::Unavailable("text mode needs --extractor".into()))?;
            runtime().block_on(extract_bundle(&client, &model_id, &text, &request.ops))?
        }
    };
    let calibration = load_calibration(&request)?;
    let report = analyze(&bundle, &request, &calibration);
    let rendered = report.render();
    match &args.out {
        Some(path) => std::fs::write(path, rendered).map_err(|e| ServiceError::Dump {
            path: path.display().to_string(),
            source: e.into(),
        })?,
        None => std::io::stdout()
            .write_all(rendered.as_bytes())
            .map_err(|e| ServiceError::Core(e.into()))?,
    }
    for failure in &report.failures {
        eprintln!("error: {}: {}", failure.op, failure.message);
    }
    Ok(report.failures.first().map_or(0, |f| f.exit_code()))
}

fn run_serve(args: ServeArgs) -> Result<i32, ServiceError> {
    let sidecar = client(args.extractor.as_deref(), args.timeout)?;
    let state = Arc::new(AppState::new(sidecar, args.cache_size));
    let app = server::router(state, args.ui_dir.as_deref());
    runtime().block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.host, args.port))
            .await
            .map_err(|e| ServiceError::Request(format!("cannot bind {}:{}: {e}", args.host, args.port)))?;
        server::serve(listener, app)
            .await
            .map_err(|e| ServiceError::Core(e.into()))
    })?;
    Ok(0)
}

fn run_remove(policy: &str) -> Result<i32, ServiceError> {
    let policy: RemovalPolicy = policy.parse()?;
    let mut input = String::new();
    std::io::stdin()
        .read_to_string(&mut input)
        .map_err(|e| ServiceError::Core(e.into()))?;
    let mut out = String::with_capacity(input.len());
    for line in input.lines() {
        out.push_str(&apply_removal(line, &policy));
        out.push('\n');
    }
    std::io::stdout()
        .write_all(out.as_bytes())
        .map_err(|e| ServiceError::Core(e.into()))?;
    Ok(0)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(args) => run_analyze(args),
        Command::Serve(args) => run_serve(args),
        Command::Remove { policy } => run_remove(&policy),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
