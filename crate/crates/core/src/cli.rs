//! Command-line harness. Each subcommand is a plain function over its parsed
//! arguments so tests can drive it without spawning a process.

use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::builder::BoolishValueParser;
use clap::{Args, Parser, Subcommand};

use crate::codec::{self, LatentMode, LATENT_MAGIC};
use crate::data::{self, Dataset, ImageRecord, ResizeMode};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, ModelParams};
use crate::net::{self, BenchMode, BenchReport, Connection, FrameKind, LinkOptions};
use crate::train::{self, Checkpoint, EpochLog, ExperimentReport, TrainConfig, TrainOutcome};
use crate::Tensor;

#[derive(Debug, Parser)]
#[command(name = "aecodec", version, about = "Autoencoder image codec: train, encode, decode, transfer, evaluate")]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of images.
    Train(TrainArgs),
    /// Compress one image to an AEL1 latent file.
    Encode(EncodeArgs),
    /// Reconstruct a PNG from an AEL1 latent file.
    Decode(DecodeArgs),
    /// Send one payload over TCP and print its timing.
    Send(SendArgs),
    /// Receive payloads over TCP and write them to a directory.
    Recv(RecvArgs),
    /// Loopback latency benchmark across raw and latent payloads.
    Bench(BenchArgs),
    /// Train one model per batch size and tabulate quality.
    Sweep(SweepArgs),
    /// Train with and without the residual loss and tabulate quality.
    Ablation(TrainArgs),
    /// Quality metrics between two images or two directories of images.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Residual loss on or off.
    #[arg(long, value_parser = BoolishValueParser::new())]
    pub pgic: Option<bool>,
    #[arg(long)]
    pub seed_init: Option<u64>,
    #[arg(long)]
    pub seed_split: Option<u64>,
    #[arg(long)]
    pub seed_augment: Option<u64>,
    /// Any training setting, e.g. `--set augment=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EncodeArgs {
    /// Full or encoder-only weights.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// latent-f32 or latent-u8.
    #[arg(long, default_value = "latent-f32")]
    pub mode: BenchMode,
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    #[arg(long, default_value = "crop")]
    pub resize_mode: ResizeMode,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Full or decoder-only weights.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SendArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub port: u16,
    /// Image file, or an AEL1 file for latent modes.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "latent-f32")]
    pub mode: BenchMode,
    /// Needed to encode an image for the latent modes.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub rate_bytes_per_sec: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_secs: f64,
}

#[derive(Debug, Clone, Args)]
pub struct RecvArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed first.
    #[arg(long)]
    pub port: u16,
    #[arg(long)]
    pub out: PathBuf,
    /// Frames to accept before exiting; 0 means until the sender closes.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_secs: f64,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Required unless only `raw` is benchmarked.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 2.0 * 1024.0 * 1024.0)]
    pub rate_bytes_per_sec: f64,
    #[arg(long, value_delimiter = ',', default_value = "raw,latent-f32,latent-u8")]
    pub modes: Vec<BenchMode>,
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    /// Directory for bench.csv and summary.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub candidate: PathBuf,
    /// Also write the table as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error: 2 for usage and configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Send(a) => {
            let row = cmd_send(a)?;
            println!("{}\n{row}", net::TransferTiming::CSV_HEADER);
            Ok(())
        }
        Command::Recv(a) => cmd_recv(a, &mut io::stdout()).map(|_| ()),
        Command::Bench(a) => {
            let r = cmd_bench(a)?;
            print!("{}", r.summary());
            Ok(())
        }
        Command::Sweep(a) => {
            let r = cmd_sweep(a)?;
            print!("{}", r.table.to_text());
            Ok(())
        }
        Command::Ablation(a) => {
            let r = cmd_ablation(a)?;
            print!("{}", r.table.to_text());
            Ok(())
        }
        Command::Metrics(a) => {
            let rows = cmd_metrics(a)?;
            print!("{}", metrics_csv(&rows));
            Ok(())
        }
    }
}

/// Writes through a sibling temp file so a failed run never leaves a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".aecodec-write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Training settings after layering defaults, config file, `--set` and flags.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub batch_sizes: Vec<usize>,
}

impl Resolved {
    pub fn to_config_text(&self) -> String {
        let mut s = format!("data_dir = {}\nout = {}\n", self.data_dir.display(), self.out.display());
        if !self.batch_sizes.is_empty() {
            let list: Vec<_> = self.batch_sizes.iter().map(usize::to_string).collect();
            s += &format!("batch_sizes = {}\n", list.join(","));
        }
        s + &self.train.to_config_text()
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad entry `{v}` in `{key}`: {e}")))
        })
        .collect()
}

pub fn resolve(args: &TrainArgs, batch_sizes: &[usize]) -> Result<Resolved> {
    let mut train = TrainConfig::default();
    let mut data_dir = None;
    let mut out = None;
    let mut sizes = Vec::new();
    let mut pairs = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            train::parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in pairs {
        match k.as_str() {
            "data_dir" => data_dir = Some(PathBuf::from(v)),
            "out" => out = Some(PathBuf::from(v)),
            "batch_sizes" => sizes = parse_list(&k, &v)?,
            _ => train.set(&k, &v)?,
        }
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.epochs {
        train.max_epochs = v;
    }
    if let Some(v) = args.lr {
        train.lr = v;
    }
    if let Some(v) = args.image_size {
        train.image_size = v;
    }
    if let Some(v) = args.pgic {
        train.pgic_enabled = v;
    }
    if let Some(v) = args.seed_init {
        train.seeds.init = v;
    }
    if let Some(v) = args.seed_split {
        train.seeds.split = v;
    }
    if let Some(v) = args.seed_augment {
        train.seeds.augment = v;
    }
    if !batch_sizes.is_empty() {
        sizes = batch_sizes.to_vec();
    }
    train.validate()?;
    let data_dir = args
        .data_dir
        .clone()
        .or(data_dir)
        .ok_or_else(|| Error::Config("missing --data-dir".into()))?;
    if !data_dir.is_dir() {
        return Err(Error::Config(format!("data directory {} does not exist", data_dir.display())));
    }
    let out = args
        .out
        .clone()
        .or(out)
        .ok_or_else(|| Error::Config("missing --out".into()))?;
    Ok(Resolved {
        train,
        data_dir,
        out,
        batch_sizes: sizes,
    })
}

/// Loads, resizes and splits the images of `dir`.
pub fn load_dataset(dir: &Path, size: usize, mode: ResizeMode) -> Result<Dataset> {
    let loaded = data::load_directory(dir)?;
    if loaded.records.is_empty() {
        return Err(Error::Config(format!("no readable images in {}", dir.display())));
    }
    Dataset::from_records(&loaded.records, size, mode)
}

fn log_resolved(r: &Resolved) -> Result<()> {
    let text = r.to_config_text();
    log::info!("resolved config:\n{text}");
    write_atomic(&r.out.join("config.txt"), text.as_bytes())
}

fn loss_curve_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,L\n");
    for l in logs {
        s += &format!("{},{:.9e}\n", l.epoch, l.train_l);
    }
    s
}

/// Writes `weights.aew`, `encoder.aew`, `decoder.aew`, `epochs.csv`,
/// `loss_curve.csv` and `config.txt` under the output directory.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut r = resolve(args, &[])?;
    ensure_dir(&r.out)?;
    r.train.log_csv.get_or_insert_with(|| r.out.join("epochs.csv"));
    r.train.checkpoint_path.get_or_insert_with(|| r.out.join("checkpoint.aew"));
    log_resolved(&r)?;
    let ds = load_dataset(&r.data_dir, r.train.image_size, r.train.resize_mode)?;
    let split = data::split_80_20(ds.len(), r.train.seeds.split);
    log::info!("{} images: {} train, {} validation", ds.len(), split.train.len(), split.validation.len());
    let outcome = match &args.resume {
        Some(p) => train::train_from(&r.train, &ds, &split, Checkpoint::load(p)?)?,
        None => train::train(&r.train, &ds, &split, model::init_params(r.train.seeds.init))?,
    };
    let best = &outcome.best_params;
    let (enc, dec) = model::split_params(best)?;
    write_atomic(&r.out.join("weights.aew"), &codec::encode_weights(best)?)?;
    write_atomic(&r.out.join("encoder.aew"), &codec::encode_weights(&enc)?)?;
    write_atomic(&r.out.join("decoder.aew"), &codec::encode_weights(&dec)?)?;
    write_atomic(&r.out.join("loss_curve.csv"), loss_curve_csv(&outcome.logs).as_bytes())?;
    if args.resume.is_some() || outcome.logs.is_empty() {
        // The incremental log is only started fresh by a run from scratch.
        let path = r.train.log_csv.as_ref().expect("set above");
        if !path.exists() {
            write_atomic(path, train::epoch_csv(&outcome.logs).as_bytes())?;
        }
    }
    Ok(outcome)
}

fn load_image_tensor(path: &Path, size: usize, mode: ResizeMode) -> Result<Tensor> {
    let rec = ImageRecord::open(path)?;
    let img = data::resize_to_square(&rec, size, mode)?;
    Tensor::stack(&[&img])
}

fn encode_image(weights: &ModelParams, path: &Path, size: usize, resize: ResizeMode, mode: LatentMode) -> Result<Vec<u8>> {
    let x = load_image_tensor(path, size, resize)?;
    codec::serialize_latent(&model::encode(&x, weights)?, mode)
}

fn latent_mode_of(mode: BenchMode) -> Result<LatentMode> {
    mode.latent_mode()
        .ok_or_else(|| Error::Config(format!("mode {mode} does not produce a latent file")))
}

pub fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    log::info!("resolved arguments: {args:?}");
    let mode = latent_mode_of(args.mode)?;
    let weights = codec::load_weights(&args.weights)?;
    let bytes = encode_image(&weights, &args.input, args.image_size, args.resize_mode, mode)?;
    write_atomic(&args.out, &bytes)
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    log::info!("resolved arguments: {args:?}");
    let weights = codec::load_weights(&args.weights)?;
    let latent = codec::deserialize_latent(&fs::read(&args.input)?)?;
    let img = model::decode(&latent, &weights)?;
    let mut tmp = args.out.as_os_str().to_owned();
    tmp.push(".partial.png");
    let tmp = PathBuf::from(tmp);
    data::save_png(&img, &tmp)?;
    fs::rename(&tmp, &args.out)?;
    Ok(())
}

fn timeout(secs: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(secs)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| Error::Config(format!("timeout must be positive, got {secs}")))
}

fn check_rate(rate: f64) -> Result<f64> {
    if rate.is_nan() || rate <= 0.0 {
        return Err(Error::Config(format!("--rate-bytes-per-sec must be positive, got {rate}")));
    }
    Ok(rate)
}

/// Builds the payload and sends it; returns the timing as a CSV row.
pub fn cmd_send(args: &SendArgs) -> Result<String> {
    log::info!("resolved arguments: {args:?}");
    let rate = check_rate(args.rate_bytes_per_sec.unwrap_or(f64::INFINITY))?;
    let opts = LinkOptions {
        timeout: timeout(args.timeout_secs)?,
        rate_bytes_per_sec: rate,
    };
    let file = fs::read(&args.input)?;
    let payload = match args.mode.latent_mode() {
        None => file,
        Some(mode) if file.starts_with(LATENT_MAGIC) => {
            let parsed = codec::deserialize_latent_file(&file)?;
            if parsed.mode == mode {
                file
            } else {
                codec::serialize_latent(&parsed.latent, mode)?
            }
        }
        Some(mode) => {
            let w = args
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("encoding an image for a latent mode needs --weights".into()))?;
            encode_image(&codec::load_weights(w)?, &args.input, args.image_size, ResizeMode::Crop, mode)?
        }
    };
    let mut conn = Connection::connect((args.host.as_str(), args.port), opts)?;
    let timing = conn.send_payload(args.mode.frame_kind(), &payload)?;
    conn.shutdown();
    Ok(timing.to_csv_row())
}

/// Accepts one connection and stores each received payload as
/// `recv_NNNN.bin` (raw) or `recv_NNNN.ael` (latent). Prints the bound
/// address, then one `index,kind,bytes,path` line per frame.
pub fn cmd_recv(args: &RecvArgs, stdout: &mut dyn io::Write) -> Result<Vec<PathBuf>> {
    log::info!("resolved arguments: {args:?}");
    ensure_dir(&args.out)?;
    let listener = TcpListener::bind((args.host.as_str(), args.port))?;
    writeln!(stdout, "listening on {}", listener.local_addr()?)?;
    stdout.flush()?;
    let (stream, peer) = listener.accept()?;
    log::info!("connection from {peer}");
    let opts = LinkOptions {
        timeout: timeout(args.timeout_secs)?,
        ..LinkOptions::default()
    };
    let mut conn = Connection::new(stream, opts)?;
    let mut written = Vec::new();
    while args.count == 0 || written.len() < args.count {
        let Some((kind, payload)) = conn.recv_payload()? else { break };
        let ext = if kind == FrameKind::Raw { "bin" } else { "ael" };
        let path = args.out.join(format!("recv_{:04}.{ext}", written.len()));
        write_atomic(&path, &payload)?;
        writeln!(stdout, "{},{kind:?},{},{}", written.len(), payload.len(), path.display())?;
        written.push(path);
    }
    if written.len() < args.count {
        return Err(Error::Transfer(format!(
            "sender closed after {} of {} frames",
            written.len(),
            args.count
        )));
    }
    Ok(written)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchReport> {
    log::info!("resolved arguments: {args:?}");
    let rate = check_rate(args.rate_bytes_per_sec)?;
    if args.modes.is_empty() {
        return Err(Error::Config("no bench modes given".into()));
    }
    let needs_model = args.modes.iter().any(|m| m.latent_mode().is_some());
    let weights = match (&args.weights, needs_model) {
        (Some(p), _) => Some(codec::load_weights(p)?),
        (None, true) => return Err(Error::Config("latent modes need --weights".into())),
        (None, false) => None,
    };
    if !args.data_dir.is_dir() {
        return Err(Error::Config(format!("data directory {} does not exist", args.data_dir.display())));
    }
    let ds = load_dataset(&args.data_dir, args.image_size, ResizeMode::Crop)?;
    let mut modes = args.modes.clone();
    modes.dedup();
    let report = net::latency_bench(&ds.images, weights.as_ref(), &modes, rate)?;
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        write_atomic(&out.join("bench.csv"), report.to_csv().as_bytes())?;
        write_atomic(&out.join("summary.txt"), report.summary().as_bytes())?;
    }
    Ok(report)
}

fn experiment_setup(args: &TrainArgs, batch_sizes: &[usize]) -> Result<(Resolved, Dataset, data::DatasetSplit)> {
    let mut r = resolve(args, batch_sizes)?;
    // Per-run logs are written from the report instead.
    r.train.log_csv = None;
    r.train.checkpoint_path = None;
    ensure_dir(&r.out)?;
    log_resolved(&r)?;
    let ds = load_dataset(&r.data_dir, r.train.image_size, r.train.resize_mode)?;
    let split = data::split_80_20(ds.len(), r.train.seeds.split);
    Ok((r, ds, split))
}

fn write_experiment(out: &Path, stem: &str, report: &ExperimentReport) -> Result<()> {
    write_atomic(&out.join(format!("{stem}.csv")), report.table.to_csv().as_bytes())?;
    write_atomic(&out.join(format!("{stem}.txt")), report.table.to_text().as_bytes())?;
    for (name, logs) in &report.logs {
        let tag: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        write_atomic(&out.join(format!("epochs_{stem}_{tag}.csv")), train::epoch_csv(logs).as_bytes())?;
    }
    Ok(())
}

/// Writes `sweep.csv` with header `batch_size,psnr,ssim,mse`.
pub fn cmd_sweep(args: &SweepArgs) -> Result<ExperimentReport> {
    let (r, ds, split) = experiment_setup(&args.train, &args.batch_sizes)?;
    if r.batch_sizes.is_empty() {
        return Err(Error::Config("missing --batch-sizes".into()));
    }
    let report = train::batch_size_sweep(&r.train, &r.batch_sizes, &ds, &split)?;
    write_experiment(&r.out, "sweep", &report)?;
    Ok(report)
}

/// Writes `ablation.csv` with header `Model,PSNR,SSIM,MSE`.
pub fn cmd_ablation(args: &TrainArgs) -> Result<ExperimentReport> {
    let (r, ds, split) = experiment_setup(args, &[])?;
    let report = train::ablation_run(&r.train, &ds, &split)?;
    write_experiment(&r.out, "ablation", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub name: String,
    pub report: MetricsReport,
    pub candidate_bytes: u64,
    pub raw_bytes: u64,
}

impl MetricsRow {
    /// Uncompressed RGB8 size over the candidate's file size.
    pub fn byte_ratio(&self) -> f64 {
        self.raw_bytes as f64 / self.candidate_bytes as f64
    }
}

pub const METRICS_CSV_HEADER: &str = "name,psnr,ssim,mse,candidate_bytes,raw_bytes,byte_ratio";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{:.4}\n",
            r.name,
            metrics::format_metric(r.report.psnr),
            metrics::format_metric(r.report.ssim),
            metrics::format_metric(r.report.mse),
            r.candidate_bytes,
            r.raw_bytes,
            r.byte_ratio()
        );
    }
    s
}

fn compare_files(original: &Path, candidate: &Path) -> Result<MetricsRow> {
    let a = ImageRecord::open(original)?;
    let b = ImageRecord::open(candidate)?;
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::dim(format!(
            "{} is {}×{} but {} is {}×{}",
            original.display(),
            a.width,
            a.height,
            candidate.display(),
            b.width,
            b.height
        )));
    }
    Ok(MetricsRow {
        name: original.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        report: MetricsReport::compare(&a.to_tensor(), &b.to_tensor())?,
        candidate_bytes: fs::metadata(candidate)?.len(),
        raw_bytes: (a.width * a.height * 3) as u64,
    })
}

/// File pair, or directory pair matched by file stem.
pub fn cmd_metrics(args: &MetricsArgs) -> Result<Vec<MetricsRow>> {
    log::info!("resolved arguments: {args:?}");
    let rows = if args.original.is_dir() != args.candidate.is_dir() {
        return Err(Error::Config("--original and --candidate must both be files or both directories".into()));
    } else if args.original.is_dir() {
        let originals = data::image_files(&args.original)?;
        let candidates = data::image_files(&args.candidate)?;
        let mut rows = Vec::new();
        for o in &originals {
            let stem = o.file_stem();
            match candidates.iter().find(|c| c.file_stem() == stem) {
                Some(c) => rows.push(compare_files(o, c)?),
                None => log::warn!("no candidate for {}", o.display()),
            }
        }
        if rows.is_empty() {
            return Err(Error::Config("no matching image pairs".into()));
        }
        rows
    } else {
        vec![compare_files(&args.original, &args.candidate)?]
    };
    if let Some(out) = &args.out {
        write_atomic(out, metrics_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}
