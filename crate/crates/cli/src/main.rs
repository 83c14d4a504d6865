//! `focalmix` command-line entry points: dataset generation, training,
//! evaluation and single-scan prediction.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use focalmix::anchors::write_detections_jsonl;
use focalmix::config::{ExperimentConfig, SplitCounts};
use focalmix::dataset::{self, DatasetManifest, Split};
use focalmix::eval::{self, CpmSummary};
use focalmix::inference::{self, DetectParams};
use focalmix::ssl::{self, write_metrics_csv};
use focalmix::volume::read_scan;
use focalmix::{Error, Model};

const VERSION: &str = match option_env!("FOCALMIX_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Parser)]
#[command(name = "focalmix", version = VERSION, about = "Semi-supervised 3D lesion detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled/, unlabeled/ and test/ synthetic scans.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count_labeled: Option<usize>,
        #[arg(long)]
        count_unlabeled: Option<usize>,
        #[arg(long)]
        count_test: Option<usize>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the weight-initialization and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use only the first N unlabeled scans.
        #[arg(long)]
        unlabeled_limit: Option<usize>,
        /// Annotated scans for the per-epoch CPM_val column.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// FROC curve and CPM of a checkpoint on annotated scans.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of annotated scans, e.g. <dataset>/test.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config; its detector section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Detections for one scan as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scan sidecar (.json) or payload (.vol).
        #[arg(long)]
        scan: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only report detections scoring at least this much.
        #[arg(long, default_value_t = 0.5)]
        min_score: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Supervised,
    Focalmix,
}

enum Failure {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Divergence(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Data(m) => ("data", m),
            Failure::Divergence(m) => ("divergence", m),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Divergence(_) => Failure::Divergence(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn load_config(path: &Path) -> std::result::Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(e.to_string()),
        other => other.into(),
    })
}

fn load_checkpoint(path: &Path, config: Option<&Path>) -> std::result::Result<(Model, DetectParams), Failure> {
    let model = Model::load(path)?;
    let mut params = DetectParams::default();
    if let Some(cfg_path) = config {
        let cfg = load_config(cfg_path)?;
        if &cfg.detector != model.config() {
            return Err(Failure::Usage(format!(
                "checkpoint {} does not match the detector section of {}",
                path.display(),
                cfg_path.display()
            )));
        }
        params = cfg.train.detect_params();
    }
    Ok((model, params))
}

fn gen_data(
    config: &Path,
    out: &Path,
    counts: [Option<usize>; 3],
    seed: Option<u64>,
) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.generator.seed = s;
    }
    cfg.generator.validate()?;
    let counts = SplitCounts {
        labeled: counts[0].unwrap_or(cfg.splits.labeled),
        unlabeled: counts[1].unwrap_or(cfg.splits.unlabeled),
        test: counts[2].unwrap_or(cfg.splits.test),
    };
    if counts.test == 0 {
        eprintln!("warning: --count-test 0 leaves test/ empty");
    }
    create_dir(out)?;
    let mut ids = Vec::new();
    for (split, n) in Split::ALL.into_iter().zip([counts.labeled, counts.unlabeled, counts.test]) {
        let scans = (0..n)
            .into_par_iter()
            .map(|i| dataset::generate_split_scan(&cfg.generator, split, i))
            .collect::<focalmix::Result<Vec<_>>>()?;
        ids.push(dataset::write_split(out, split, &scans)?);
    }
    let test = ids.pop().unwrap_or_default();
    let unlabeled = ids.pop().unwrap_or_default();
    let labeled = ids.pop().unwrap_or_default();
    dataset::write_manifest(
        out,
        &DatasetManifest {
            generator: cfg.generator,
            labeled,
            unlabeled,
            test,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    mode: Mode,
    config: &'a ExperimentConfig,
    seeds: Seeds,
    data: &'a Path,
    outputs: Outputs,
    started_unix: u64,
    finished_unix: Option<u64>,
}

#[derive(Serialize)]
struct Seeds {
    generator: u64,
    weight_init: u64,
    training: u64,
}

#[derive(Serialize)]
struct Outputs {
    checkpoint: PathBuf,
    metrics: PathBuf,
    manifest: PathBuf,
}

struct TrainArgs {
    config: PathBuf,
    data: PathBuf,
    mode: Mode,
    out: PathBuf,
    seed: Option<u64>,
    epochs: Option<usize>,
    unlabeled_limit: Option<usize>,
    val: Option<PathBuf>,
}

fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.detector.weight_init_seed = s;
        cfg.ssl.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let manifest = DatasetManifest::load(&args.data)?;
    let labeled = dataset::load_split(&args.data, &manifest, Split::Labeled)?;
    let unlabeled = match args.mode {
        Mode::Supervised => Vec::new(),
        Mode::Focalmix => {
            if manifest.unlabeled.is_empty() || !args.data.join(Split::Unlabeled.dir_name()).is_dir() {
                return Err(Failure::Data(format!(
                    "focalmix mode needs unlabeled scans in {}",
                    args.data.join(Split::Unlabeled.dir_name()).display()
                )));
            }
            let mut scans = dataset::load_split(&args.data, &manifest, Split::Unlabeled)?;
            if let Some(n) = args.unlabeled_limit {
                scans.truncate(n);
            }
            scans
        }
    };
    let val = args.val.as_deref().map(dataset::load_dir).transpose()?;
    let ssl_cfg = match args.mode {
        Mode::Supervised => cfg.ssl.supervised(),
        Mode::Focalmix => cfg.ssl.clone(),
    };

    cfg.generator = manifest.generator.clone();
    cfg.splits = SplitCounts {
        labeled: labeled.len(),
        unlabeled: unlabeled.len(),
        test: manifest.test.len(),
    };
    cfg.ssl = ssl_cfg.clone();
    create_dir(&args.out)?;
    let outputs = Outputs {
        checkpoint: args.out.join("model.ckpt"),
        metrics: args.out.join("metrics.csv"),
        manifest: args.out.join("run_manifest.json"),
    };
    let manifest_path = outputs.manifest.clone();
    let mut run = RunManifest {
        version: VERSION,
        mode: args.mode,
        config: &cfg,
        seeds: Seeds {
            generator: cfg.generator.seed,
            weight_init: cfg.detector.weight_init_seed,
            training: cfg.ssl.seed,
        },
        data: &args.data,
        outputs,
        started_unix: timestamp(),
        finished_unix: None,
    };
    write_json(&manifest_path, &run)?;

    let outcome = ssl::train(
        &labeled,
        &unlabeled,
        &ssl_cfg,
        &cfg.detector,
        &cfg.train,
        &cfg.focal,
        val.as_deref(),
    )?;
    outcome.model.save(&run.outputs.checkpoint)?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &outcome.log).map_err(|e| io_err(&run.outputs.metrics, e))?;
    write_atomic(&run.outputs.metrics, &csv)?;
    run.finished_unix = Some(timestamp());
    write_json(&manifest_path, &run)
}

fn evaluate(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>) -> CmdResult {
    let (model, params) = load_checkpoint(checkpoint, config)?;
    let scans = dataset::load_dir(data)?;
    let dets = scans
        .par_iter()
        .map(|s| inference::detect(&model, &s.volume, params))
        .collect::<focalmix::Result<Vec<_>>>()?;
    let gts: Vec<_> = scans.iter().map(|s| s.boxes.clone()).collect();
    let (curve, summary): (_, CpmSummary) = eval::evaluate(&dets, &gts)?;
    create_dir(out)?;
    let mut csv = Vec::new();
    curve.write_csv(&mut csv).map_err(|e| io_err(out, e))?;
    write_atomic(&out.join("froc.csv"), &csv)?;
    write_json(&out.join("cpm.json"), &summary)?;
    println!("CPM {:.2}", summary.cpm);
    Ok(())
}

fn predict(checkpoint: &Path, scan: &Path, out: Option<&Path>, min_score: f64, config: Option<&Path>) -> CmdResult {
    let (model, params) = load_checkpoint(checkpoint, config)?;
    let scan = read_scan(scan)?;
    let dets: Vec<_> = inference::detect(&model, &scan.volume, params)?
        .into_iter()
        .filter(|d| d.score >= min_score)
        .collect();
    match out {
        Some(path) => {
            let mut buf = Vec::new();
            write_detections_jsonl(&mut buf, &scan.id, &dets)?;
            write_atomic(path, &buf)
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_detections_jsonl(&mut w, &scan.id, &dets)?;
            w.flush().map_err(|e| Failure::Data(e.to_string()))
        }
    }
}

fn init_threads() -> CmdResult {
    let Ok(v) = std::env::var("FOCALMIX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("FOCALMIX_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> CmdResult {
    init_threads()?;
    match cli.command {
        Command::GenData {
            config,
            out,
            count_labeled,
            count_unlabeled,
            count_test,
            seed,
        } => gen_data(&config, &out, [count_labeled, count_unlabeled, count_test], seed),
        Command::Train {
            config,
            data,
            mode,
            out,
            seed,
            epochs,
            unlabeled_limit,
            val,
        } => train(TrainArgs {
            config,
            data,
            mode,
            out,
            seed,
            epochs,
            unlabeled_limit,
            val,
        }),
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
        } => evaluate(&checkpoint, &data, &out, config.as_deref()),
        Command::Predict {
            checkpoint,
            scan,
            out,
            min_score,
            config,
        } => predict(&checkpoint, &scan, out.as_deref(), min_score, config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
