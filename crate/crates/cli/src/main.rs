mod failure;
mod report;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{mpsc, Arc};

use clap::{Args, Parser, Subcommand};
use fedrecon::benchmark::{
    generate_synthetic, pretrain_embedder, read_results, run_benchmark, write_results, ConfigFile, Deployment,
    LabeledDataset, Method,
};
use fedrecon::embedder::{read_params, write_params, EmbedderParams};
use fedrecon::federation::{serve, ClientState, Connection, ServeConfig, ServerState, DEFAULT_MAX_FRAME_LEN};
use log::{info, warn};

use failure::Failure;

type Result<T> = std::result::Result<T, Failure>;

/// Federated prototype learning: synthetic data, embedder pretraining,
/// benchmark runs, a merge server and its clients.
#[derive(Debug, Parser)]
#[command(name = "fedrecon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset.
    GenData(GenDataArgs),
    /// Pretrain the embedder on the base classes.
    Pretrain(PretrainArgs),
    /// Run one method over the mission schedule and write per-mission results.
    Run(RunArgs),
    /// Serve prototype merging over TCP until interrupted.
    Serve(ServeArgs),
    /// Perform this client's missions against a running server.
    Client(ClientArgs),
    /// Plot results files and write a merged comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Config file; its [synthetic] section describes the data.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the data seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Config file with [benchmark], [embedder] and [pretrain] sections.
    #[arg(long, alias = "spec")]
    config: Option<PathBuf>,
    /// Params file; the loss trace goes to `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    /// Pretrain with this fixed shot count instead of a random one.
    #[arg(long)]
    fixed_k: Option<usize>,
    /// Overrides the split, embedder and pretraining seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// proto_online, proto_bank, lower or upper.
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Results file.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the benchmark seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    /// Embedding dimension; defaults to the params output width.
    #[arg(long)]
    dim: Option<usize>,
    /// Embedder params; with --data, the server starts from the base-class
    /// prototypes.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, requires = "params")]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Written on shutdown; if it already exists the server resumes from it.
    #[arg(long, default_value = "fedrecon-server.frst")]
    snapshot: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_FRAME_LEN)]
    max_frame_len: usize,
}

#[derive(Debug, Args)]
struct ClientArgs {
    #[arg(long)]
    connect: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    client_id: u32,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dimension announced to the server; defaults to the params output width.
    #[arg(long)]
    dim: Option<usize>,
    /// Overrides the benchmark seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Results files; each file's stem labels its curves.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// SVG chart, or the table if the path ends in `.csv`; the other file
    /// gets the same stem.
    #[arg(long)]
    out: PathBuf,
    /// Explicit path for the comparison table.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse()
        .map_err(|e: fedrecon::benchmark::BenchmarkError| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p).map_err(|e| Failure::usage(e).context(p.display())),
        None => Ok(ConfigFile::default()),
    }
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(path).map_err(|e| Failure::usage(e).context(path.display()))
}

fn load_params(path: &Path) -> Result<EmbedderParams> {
    let file = File::open(path).map_err(|e| Failure::usage(e).context(path.display()))?;
    read_params(io::BufReader::new(file)).map_err(|e| Failure::usage(e).context(path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::runtime(e).context(path.display()))
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = load_config(Some(&args.spec))?.synthetic;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = generate_synthetic(&spec)?;
    data.write_csv(create(&args.out)?)?;
    println!(
        "wrote {} classes x ({} train + {} test) to {}",
        spec.n_classes,
        spec.train_per_class,
        spec.test_per_class,
        args.out.display()
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.benchmark.seed = seed;
        cfg.embedder.seed = seed;
        cfg.pretrain.seed = seed;
    }
    if let Some(n) = args.episodes {
        cfg.pretrain.episodes = n;
    }
    if let Some(k) = args.fixed_k {
        cfg.pretrain = cfg.pretrain.fixed_k(k);
    }
    let data = load_dataset(&args.data)?;
    let outcome = pretrain_embedder(&data, &cfg.benchmark, &cfg.embedder, &cfg.pretrain)?;
    let mut out = create(&args.out)?;
    write_params(&outcome.params, &mut out)?;
    out.flush()?;

    let mut trace_path = args.out.clone().into_os_string();
    trace_path.push(".loss.csv");
    let trace_path = PathBuf::from(trace_path);
    let mut w = csv::Writer::from_writer(create(&trace_path)?);
    w.write_record(["episode", "loss"])?;
    for (i, loss) in outcome.loss_trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{loss:.6}")])?;
    }
    w.flush()?;

    let window = outcome.loss_trace.len().min(100);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    println!(
        "pretrained {} parameters over {} episodes; mean loss {:.4} -> {:.4}; wrote {} and {}",
        outcome.params.num_parameters(),
        outcome.loss_trace.len(),
        mean(&outcome.loss_trace[..window]),
        mean(&outcome.loss_trace[outcome.loss_trace.len() - window..]),
        args.out.display(),
        trace_path.display()
    );
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.benchmark.seed = seed;
    }
    let data = load_dataset(&args.data)?;
    let params = Arc::new(load_params(&args.params)?);
    let run = run_benchmark(&cfg.benchmark, &cfg.head, &data, params, args.method)?;
    let mut out = create(&args.out)?;
    write_results(&run.records, &mut out)?;
    out.flush()?;
    let s = &run.summary;
    println!(
        "{}: {} missions, final acc_avg {:.4} (acc_base {}, acc_field {}), {} records written to {}",
        run.method,
        s.n_missions,
        s.final_acc_avg,
        fmt_acc(s.final_acc_base),
        fmt_acc(s.final_acc_field),
        run.records.len(),
        args.out.display()
    );
    Ok(())
}

fn initial_server(args: &ServeArgs) -> Result<ServerState> {
    if args.snapshot.exists() {
        info!("resuming from {}", args.snapshot.display());
        return ServerState::load_snapshot(&args.snapshot)
            .map_err(|e| Failure::usage(e).context(args.snapshot.display()));
    }
    let params = args.params.as_deref().map(load_params).transpose()?;
    match (&args.data, &params) {
        (Some(data), Some(params)) => {
            let cfg = load_config(args.config.as_deref())?;
            let plan = Deployment::plan(&load_dataset(data)?, &cfg.benchmark, params)?;
            Ok(ServerState::with_store(plan.base_store))
        }
        _ => {
            let dim = args
                .dim
                .or(params.map(|p| p.output_dim()))
                .ok_or_else(|| Failure::usage("serve needs --dim, --params or an existing --snapshot"))?;
            Ok(ServerState::new(dim).map_err(Failure::usage)?)
        }
    }
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let state = initial_server(&args)?;
    if let Some(dim) = args.dim {
        if dim != state.dim() {
            return Err(Failure::usage(format!(
                "--dim {dim} does not match the server store dimension {}",
                state.dim()
            )));
        }
    }
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(Failure::runtime)?;
    let config = ServeConfig {
        max_frame_len: args.max_frame_len,
    };
    let handle = serve(args.bind.as_str(), state, config).map_err(|e| Failure::runtime(e).context(&args.bind))?;
    println!("listening on {}", handle.local_addr());
    io::stdout().flush()?;
    let _ = rx.recv();
    info!("shutting down");
    let state = handle.shutdown();
    state.save_snapshot(&args.snapshot)?;
    println!(
        "saved {} ({} classes, {} reports applied)",
        args.snapshot.display(),
        state.store.len(),
        state.mission_counter()
    );
    Ok(())
}

fn client_cmd(args: ClientArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.benchmark.seed = seed;
    }
    let data = load_dataset(&args.data)?;
    let params = Arc::new(load_params(&args.params)?);
    let plan = Deployment::plan(&data, &cfg.benchmark, &params)?;
    let missions = plan.client_missions(args.client_id);
    if missions.is_empty() {
        warn!("client {} has no scheduled missions", args.client_id);
    }
    let dim = args.dim.unwrap_or(params.output_dim());
    let mut conn = Connection::connect(args.connect.as_str(), args.client_id, dim)?;
    let mut client = ClientState::with_store(args.client_id, params, plan.base_store)?;
    let mut counter = 0;
    for data in &missions {
        let report = client.learn(data)?;
        let ack = conn.report(&report)?;
        let broadcast = conn.sync()?;
        client.apply_broadcast(&broadcast)?;
        counter = broadcast.mission_counter;
        info!(
            "mission {}: {} inserted, {} updated, {} examples",
            ack.mission_idx, ack.inserted, ack.updated, ack.reported_count
        );
    }
    println!(
        "client {}: {} missions reported, {} classes known, server counter {}",
        args.client_id,
        missions.len(),
        client.store.len(),
        counter
    );
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.results {
        let file = File::open(path).map_err(|e| Failure::usage(e).context(path.display()))?;
        let records = read_results(io::BufReader::new(file)).map_err(|e| Failure::usage(e).context(path.display()))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.extend(report::rows(&label, &records));
    }
    let (svg_path, default_table) = if args.out.extension().is_some_and(|e| e == "csv") {
        (args.out.with_extension("svg"), args.out.clone())
    } else {
        (args.out.clone(), args.out.with_extension("csv"))
    };
    let table_path = args.table.unwrap_or(default_table);
    if table_path == svg_path {
        return Err(Failure::usage("table and chart paths coincide"));
    }
    let mut svg = create(&svg_path)?;
    svg.write_all(report::render_svg(&rows).as_bytes())?;
    svg.flush()?;
    report::write_table(&rows, create(&table_path)?)?;
    for path in &args.results {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(last) = rows.iter().rev().find(|r| r.method == label) {
            println!("{label}: mission {} acc_avg {:.4}", last.mission, last.acc_avg);
        }
    }
    println!("wrote {} and {}", svg_path.display(), table_path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FR_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Run(a) => run(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Client(a) => client_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
