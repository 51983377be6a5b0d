use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alsvm_core::active::PaCandidate;
use alsvm_core::dataset::{
    build_vocabulary, parse_corpus, parse_libsvm, vectorize_corpus, write_libsvm,
};
use alsvm_core::harness::{
    run_experiment, run_text_experiment, write_curves, ExperimentConfig, ExperimentReport,
};
use alsvm_core::synth::{generate_synthetic, SynthConfig};
use alsvm_service::ServiceConfig;

#[derive(Parser, Debug)]
#[command(name = "alsvm", version, about = "Active learning with asymmetric-cost linear SVMs")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-validated AL vs random learning curves with a simulated annotator.
    Simulate(SimulateArgs),
    /// Write a synthetic imbalanced LIBSVM dataset.
    Synth(SynthArgs),
    /// Turn a tokenized corpus into binary bag-of-words LIBSVM.
    Prep(PrepArgs),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Input dataset (LIBSVM, or a tokenized corpus with --corpus).
    #[arg(long)]
    data: PathBuf,
    /// Treat --data as a tokenized corpus; the vocabulary is fit per fold.
    #[arg(long)]
    corpus: bool,
    /// Curve CSV destination (stdout when absent). A run trace is written
    /// next to it as `<stem>.trace.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON experiment configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Percentages of each fold's pool at which to evaluate.
    #[arg(long, value_delimiter = ',', value_parser = parse_checkpoint)]
    checkpoints: Option<Vec<f64>>,
    /// One experiment per seed; outputs get a `.seed<N>` suffix.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    folds: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    init_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    /// Candidate PA values, e.g. `1,2,3,ratio`.
    #[arg(long, value_delimiter = ',')]
    pa_grid: Option<Vec<PaCandidate>>,
    #[arg(long, value_parser = parse_positive)]
    c_minus: Option<f64>,
    #[arg(long, value_parser = parse_threshold)]
    stop_threshold: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    stop_window: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    stop_set_size: Option<u64>,
    /// Minimum token count for the corpus vocabulary.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    min_count: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Destination (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(10..))]
    n: u64,
    #[arg(long, default_value_t = SynthConfig::default().dim as u64, value_parser = clap::value_parser!(u64).range(2..))]
    dim: u64,
    #[arg(long, default_value_t = SynthConfig::default().positive_rate, value_parser = parse_rate)]
    positive_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().class_separation, value_parser = parse_non_negative)]
    separation: f64,
    #[arg(long, default_value_t = SynthConfig::default().feature_density, value_parser = parse_density)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PrepArgs {
    /// Tokenized corpus: `+1|-1 token token ...` per line.
    #[arg(long)]
    data: PathBuf,
    /// LIBSVM destination; the vocabulary goes to `<out>.vocab`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    min_count: u64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory holding session event logs.
    #[arg(long, default_value = "alsvm-state")]
    state_dir: PathBuf,
    /// Default for sessions that do not set it: end a session when the
    /// stopping rule fires.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    halt_on_stop: bool,
    /// Static annotation UI to serve at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("`{s}` is not a number"))
}

fn parse_positive(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| if v > 0.0 { Ok(v) } else { Err(format!("{v} must be positive")) })
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| if v >= 0.0 { Ok(v) } else { Err(format!("{v} must not be negative")) })
}

fn parse_rate(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v > 0.0 && v < 1.0 {
            Ok(v)
        } else {
            Err(format!("{v} must be in (0, 1)"))
        }
    })
}

fn parse_density(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(format!("{v} must be in (0, 1]"))
        }
    })
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    parse_density(s)
}

fn parse_checkpoint(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v > 0.0 && v <= 100.0 {
            Ok(v)
        } else {
            Err(format!("checkpoint {v} must be in (0, 100]"))
        }
    })
}

type Failure = Box<dyn std::error::Error>;

fn with_path<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| format!("{}: {e}", path.display()).into()
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    Ok(BufReader::new(File::open(path).map_err(with_path(path))?))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path).map_err(with_path(path))?))
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn trace_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.trace.jsonl"))
}

fn experiment_config(args: &SimulateArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(path) => serde_json::from_reader(open(path)?).map_err(with_path(path))?,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = &args.checkpoints {
        cfg.checkpoints = c.clone();
    }
    if let Some(k) = args.folds {
        cfg.folds = k as usize;
    }
    let al = &mut cfg.al;
    al.init_size = args.init_size.map(|v| v as usize).or(al.init_size);
    al.batch_size = args.batch_size.map(|v| v as usize).or(al.batch_size);
    al.pa_grid = args.pa_grid.clone().or(al.pa_grid.take());
    al.c_minus = args.c_minus.or(al.c_minus);
    if let Some(t) = args.stop_threshold {
        cfg.stop.agreement_threshold = t;
    }
    if let Some(w) = args.stop_window {
        cfg.stop.window = w as usize;
    }
    if let Some(n) = args.stop_set_size {
        cfg.stop.stop_set_size = n as usize;
    }
    Ok(cfg)
}

fn write_trace<W: Write>(out: &mut W, seed: u64, report: &ExperimentReport) -> Result<(), Failure> {
    for fold in &report.folds {
        for run in [&fold.al, &fold.random] {
            for record in &run.trace.records {
                let mut line = serde_json::to_value(record)?;
                let obj = line.as_object_mut().expect("record is an object");
                obj.insert("seed".into(), seed.into());
                obj.insert("fold".into(), fold.fold.into());
                obj.insert("strategy".into(), run.strategy.to_string().into());
                writeln!(out, "{line}")?;
            }
        }
    }
    for s in &report.skipped {
        let line = serde_json::json!({ "seed": seed, "fold": s.fold, "skipped": s.reason });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let base = experiment_config(&args)?;
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![base.seed]);
    let multi = args.seeds.is_some();
    let out_base = match (&args.out, multi) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => Some(PathBuf::from("curves.csv")),
        (None, false) => None,
    };
    enum Input {
        Pool(alsvm_core::Dataset),
        Corpus(Vec<alsvm_core::dataset::Document>),
    }
    let input = if args.corpus {
        Input::Corpus(parse_corpus(open(&args.data)?).map_err(with_path(&args.data))?)
    } else {
        Input::Pool(parse_libsvm(open(&args.data)?).map_err(with_path(&args.data))?)
    };
    for seed in seeds {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let report = match &input {
            Input::Pool(ds) => run_experiment(ds, &cfg)?,
            Input::Corpus(docs) => run_text_experiment(docs, args.min_count as usize, &cfg)?,
        };
        for s in &report.skipped {
            log::warn!("seed {seed}: fold {} skipped: {}", s.fold, s.reason);
        }
        match &out_base {
            Some(base) => {
                let path = if multi { suffixed(base, &format!(".seed{seed}")) } else { base.clone() };
                let mut out = create(&path)?;
                write_curves(&mut out, &report.curves())?;
                out.flush().map_err(with_path(&path))?;
                let tpath = trace_path(&path);
                let mut trace = create(&tpath)?;
                write_trace(&mut trace, seed, &report)?;
                trace.flush().map_err(with_path(&tpath))?;
            }
            None => {
                let stdout = io::stdout();
                let mut lock = stdout.lock();
                write_curves(&mut lock, &report.curves())?;
            }
        }
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        n: args.n as usize,
        dim: args.dim as usize,
        positive_rate: args.positive_rate,
        class_separation: args.separation,
        feature_density: args.density,
        seed: args.seed,
    };
    let ds = generate_synthetic(&cfg)?;
    match &args.out {
        Some(path) => {
            let mut out = create(path)?;
            write_libsvm(&mut out, &ds).map_err(with_path(path))?;
            out.flush().map_err(with_path(path))?;
        }
        None => write_libsvm(&mut io::stdout().lock(), &ds)?,
    }
    Ok(())
}

fn prep(args: PrepArgs) -> Result<(), Failure> {
    let docs = parse_corpus(open(&args.data)?).map_err(with_path(&args.data))?;
    let tokens: Vec<&[String]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
    let vocab = build_vocabulary(&tokens, args.min_count as usize)?;
    let ds = vectorize_corpus(&docs, &vocab);
    let mut out = create(&args.out)?;
    write_libsvm(&mut out, &ds).map_err(with_path(&args.out))?;
    out.flush().map_err(with_path(&args.out))?;
    let vpath = args.out.with_file_name(format!(
        "{}.vocab",
        args.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let mut v = create(&vpath)?;
    vocab.write(&mut v).map_err(with_path(&vpath))?;
    v.flush().map_err(with_path(&vpath))?;
    log::info!("{} documents, {} features", ds.len(), vocab.len());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let config = ServiceConfig {
        state_dir: Some(args.state_dir),
        ui_dir: args.ui_dir,
        halt_on_stop: args.halt_on_stop,
    };
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(alsvm_service::serve(addr, config))
        .map_err(|e| format!("{addr}: {e}").into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Synth(a) => synth(a),
        Command::Prep(a) => prep(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
