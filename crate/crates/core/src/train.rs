//! Training loop: composite loss, Adam, reduce-on-plateau, early stopping,
//! best-validation checkpointing, and the batch-size sweep and residual-loss
//! ablation built on top of it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::codec;
use crate::data::{batches, Dataset, DatasetSplit, ResizeMode};
use crate::error::{Error, Result};
use crate::metrics::{self, QualityTable};
use crate::model::{self, ModelParams};
use crate::tensor::{adam_step, AdamState};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub split: u64,
    pub augment: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 0,
            split: 1,
            augment: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    pub early_stop_patience: usize,
    pub residual_weight: f32,
    /// When off the residual term is dropped and `L == L_r`.
    pub pgic_enabled: bool,
    pub augment: bool,
    pub seeds: Seeds,
    /// Square side images are resized to; a multiple of 16.
    pub image_size: usize,
    pub resize_mode: ResizeMode,
    /// Written whenever validation loss reaches a new best.
    pub checkpoint_path: Option<PathBuf>,
    /// Epoch rows are appended here as training runs.
    pub log_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 0.001,
            max_epochs: 100,
            plateau_patience: 10,
            plateau_factor: 0.1,
            early_stop_patience: 20,
            residual_weight: 1.0,
            pgic_enabled: true,
            augment: true,
            seeds: Seeds::default(),
            image_size: 256,
            resize_mode: ResizeMode::Crop,
            checkpoint_path: None,
            log_csv: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "lr",
        "max_epochs",
        "plateau_patience",
        "plateau_factor",
        "early_stop_patience",
        "residual_weight",
        "pgic",
        "augment",
        "seed_init",
        "seed_split",
        "seed_augment",
        "image_size",
        "resize_mode",
        "checkpoint",
        "log_csv",
    ];

    /// Applies one setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, value)?,
            "plateau_factor" => self.plateau_factor = parse_value(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse_value(key, value)?,
            "residual_weight" => self.residual_weight = parse_value(key, value)?,
            "pgic" | "pgic_enabled" => self.pgic_enabled = parse_bool(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "seed_init" => self.seeds.init = parse_value(key, value)?,
            "seed_split" => self.seeds.split = parse_value(key, value)?,
            "seed_augment" => self.seeds.augment = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "resize_mode" => self.resize_mode = value.parse()?,
            "checkpoint" => self.checkpoint_path = Some(PathBuf::from(value)),
            "log_csv" => self.log_csv = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_config_text(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(format!("plateau_factor must lie in (0,1), got {}", self.plateau_factor));
        }
        if self.plateau_patience >= self.early_stop_patience {
            return fail(format!(
                "plateau_patience ({}) must be below early_stop_patience ({})",
                self.plateau_patience, self.early_stop_patience
            ));
        }
        if !(self.residual_weight.is_finite() && self.residual_weight >= 0.0) {
            return fail(format!("residual_weight must be finite and ≥ 0, got {}", self.residual_weight));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(model::SPATIAL_FACTOR) {
            return fail(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        Ok(())
    }

    /// Weight actually applied to `L_i`.
    pub fn effective_residual_weight(&self) -> f32 {
        if self.pgic_enabled {
            self.residual_weight
        } else {
            0.0
        }
    }

    /// Fully resolved settings, one `key = value` per line.
    pub fn to_config_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "plateau_patience = {}", self.plateau_patience);
        let _ = writeln!(s, "plateau_factor = {}", self.plateau_factor);
        let _ = writeln!(s, "early_stop_patience = {}", self.early_stop_patience);
        let _ = writeln!(s, "residual_weight = {}", self.residual_weight);
        let _ = writeln!(s, "pgic = {}", self.pgic_enabled);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "seed_init = {}", self.seeds.init);
        let _ = writeln!(s, "seed_split = {}", self.seeds.split);
        let _ = writeln!(s, "seed_augment = {}", self.seeds.augment);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "resize_mode = {}", self.resize_mode);
        if self.checkpoint_path.is_some() {
            let _ = writeln!(s, "checkpoint = {}", opt(&self.checkpoint_path));
        }
        if self.log_csv.is_some() {
            let _ = writeln!(s, "log_csv = {}", opt(&self.log_csv));
        }
        s
    }
}

/// Best-so-far tracker; improvement means strictly lower.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Improvement {
    pub best: f64,
    pub stagnant: usize,
}

impl Default for Improvement {
    fn default() -> Self {
        Improvement {
            best: f64::INFINITY,
            stagnant: 0,
        }
    }
}

impl Improvement {
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stagnant = 0;
            true
        } else {
            self.stagnant += 1;
            false
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a new best validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub base_lr: f32,
    pub factor: f32,
    pub patience: usize,
    pub reductions: u32,
    pub tracker: Improvement,
}

impl PlateauScheduler {
    pub fn new(base_lr: f32, factor: f32, patience: usize) -> Self {
        PlateauScheduler {
            base_lr,
            factor,
            patience,
            reductions: 0,
            tracker: Improvement::default(),
        }
    }

    /// `base_lr·factor^k` evaluated on the decimal values of the settings,
    /// so 0.001·0.1 yields the f32 nearest 0.0001.
    pub fn lr(&self) -> f32 {
        (decimal(self.base_lr) * decimal(self.factor).powi(self.reductions as i32)) as f32
    }

    /// Feeds one validation loss; returns the learning rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f32 {
        self.tracker.observe(val_loss);
        if self.tracker.stagnant >= self.patience {
            self.reductions += 1;
            self.tracker.stagnant = 0;
        }
        self.lr()
    }
}

// Shortest decimal that round-trips to `x`, widened to f64.
fn decimal(x: f32) -> f64 {
    x.to_string().parse().unwrap_or(x as f64)
}

/// Stops once `patience` consecutive epochs pass without a new best.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub tracker: Improvement,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            tracker: Improvement::default(),
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.tracker.observe(val_loss);
        self.tracker.stagnant >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_l: f64,
    pub train_lr: f64,
    pub train_li: f64,
    pub val_l: f64,
    /// Learning rate used during this epoch.
    pub lr: f32,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_L,train_Lr,train_Li,val_L,lr,seconds";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:e},{:.3}",
            self.epoch, self.train_l, self.train_lr, self.train_li, self.val_l, self.lr, self.seconds
        )
    }
}

pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{}\n", EpochLog::CSV_HEADER);
    for l in logs {
        s += &l.to_csv_row();
        s.push('\n');
    }
    s
}

/// Resumable training state: parameters, optimizer moments, completed
/// epochs and the best validation loss seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub lr_reductions: u32,
    pub best_val: f64,
}

const STATE_TENSOR: &str = "train.state";

// u64 values split into 16-bit chunks, each exact in f32.
fn pack_u64s(values: &[u64]) -> Tensor {
    let data = values
        .iter()
        .flat_map(|v| (0..4).map(move |i| ((v >> (16 * i)) & 0xffff) as f32))
        .collect::<Vec<_>>();
    Tensor::new(vec![data.len()], data).expect("length matches")
}

fn unpack_u64s(t: &Tensor) -> Result<Vec<u64>> {
    if t.shape().len() != 1 || !t.numel().is_multiple_of(4) {
        return Err(Error::State(format!("`{STATE_TENSOR}` has shape {:?}", t.shape())));
    }
    t.data()
        .chunks(4)
        .map(|c| {
            c.iter().enumerate().try_fold(0u64, |acc, (i, &x)| {
                if x.fract() != 0.0 || !(0.0..65536.0).contains(&x) {
                    return Err(Error::State(format!("`{STATE_TENSOR}` holds invalid chunk {x}")));
                }
                Ok(acc | (x as u64) << (16 * i))
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (prefix, moments) in [("adam.m.", self.adam.first_moments()), ("adam.v.", self.adam.second_moments())] {
            for ((n, _), t) in self.params.iter().zip(moments) {
                named.push((format!("{prefix}{n}"), t));
            }
        }
        let state = pack_u64s(&[
            self.epoch as u64,
            self.adam.step(),
            self.adam.lr.to_bits() as u64,
            self.lr_reductions as u64,
            self.best_val.to_bits(),
        ]);
        named.push((STATE_TENSOR.to_string(), &state));
        codec::encode_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut state = None;
        for (name, t) in codec::decode_tensors(bytes)? {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v.push((rest.to_string(), t));
            } else if name == STATE_TENSOR {
                state = Some(t);
            } else {
                params.push((name, t));
            }
        }
        let params = ModelParams::from_named(params)?;
        let order = |moments: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
            let moments = ModelParams::from_named(moments)?;
            params.names().iter().map(|n| moments.get(n).cloned()).collect()
        };
        let (m, v) = (order(m)?, order(v)?);
        let state = state.ok_or_else(|| Error::MissingParameter(STATE_TENSOR.into()))?;
        let s = unpack_u64s(&state)?;
        if s.len() != 5 {
            return Err(Error::State(format!("`{STATE_TENSOR}` holds {} values, expected 5", s.len())));
        }
        let adam = AdamState::from_parts(f32::from_bits(s[2] as u32), s[1], m, v)?;
        Ok(Checkpoint {
            params,
            adam,
            epoch: s[0] as usize,
            lr_reductions: s[3] as u32,
            best_val: f64::from_bits(s[4]),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch (initial ones if no epoch ran).
    pub best_params: ModelParams,
    pub final_params: ModelParams,
    pub logs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// SplitMix64 finalizer, used to derive independent per-epoch and per-batch seeds.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean total loss over `indices`, no augmentation, no gradients.
pub fn validation_loss(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    residual_weight: f32,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut sum = 0.0f64;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk, None)?;
        let out = model::forward_train(&batch.images, params)?;
        let l = model::weighted_loss(&batch.images, &out, residual_weight)?;
        sum += l.total as f64 * chunk.len() as f64;
    }
    Ok(sum / indices.len() as f64)
}

fn append_csv(path: &Path, log: &EpochLog, fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)?;
    if fresh {
        writeln!(f, "{}", EpochLog::CSV_HEADER)?;
    }
    writeln!(f, "{}", log.to_csv_row())?;
    Ok(())
}

/// Trains from freshly initialized optimizer state.
pub fn train(config: &TrainConfig, dataset: &Dataset, split: &DatasetSplit, params: ModelParams) -> Result<TrainOutcome> {
    let adam = AdamState::new(config.lr, params.tensors());
    let start = Checkpoint {
        params,
        adam,
        epoch: 0,
        lr_reductions: 0,
        best_val: f64::INFINITY,
    };
    train_from(config, dataset, split, start)
}

/// Continues training from a checkpoint. Epochs are numbered from 1 and
/// training stops at `config.max_epochs` in total.
pub fn train_from(config: &TrainConfig, dataset: &Dataset, split: &DatasetSplit, start: Checkpoint) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() || split.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let validation: &[usize] = if split.validation.is_empty() {
        log::warn!("validation split is empty; validating on the training images");
        &split.train
    } else {
        &split.validation
    };
    let weight = config.effective_residual_weight();

    let Checkpoint {
        mut params,
        mut adam,
        epoch: start_epoch,
        lr_reductions,
        best_val,
    } = start;
    let mut scheduler = PlateauScheduler::new(config.lr, config.plateau_factor, config.plateau_patience);
    scheduler.reductions = lr_reductions;
    scheduler.tracker.best = best_val;
    let mut early = EarlyStopping::new(config.early_stop_patience);
    early.tracker.best = best_val;
    adam.lr = scheduler.lr();

    let mut best_params = params.clone();
    let mut best_epoch = None;
    let mut logs = Vec::new();
    let mut stopped_early = false;

    for epoch in start_epoch + 1..=config.max_epochs {
        let t0 = Instant::now();
        let order = batches(&split.train, config.batch_size, derive_seed(config.seeds.split, epoch as u64, 0))?;
        let (mut sum_l, mut sum_lr, mut sum_li, mut seen) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for (bi, idx) in order.iter().enumerate() {
            let aug = config
                .augment
                .then(|| derive_seed(config.seeds.augment, epoch as u64, bi as u64 + 1));
            let batch = dataset.batch(idx, aug)?;
            let step = model::loss_and_grads(&batch.images, &params, weight)?;
            let l = step.loss;
            if !(l.total.is_finite() && l.reconstruction.is_finite() && l.residual.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!(
                        "L = {}, L_r = {}, L_i = {} on images {:?}",
                        l.total, l.reconstruction, l.residual, idx
                    ),
                });
            }
            adam_step(params.tensors_mut(), &step.grads, &mut adam)?;
            let n = idx.len() as f64;
            sum_l += l.total as f64 * n;
            sum_lr += l.reconstruction as f64 * n;
            sum_li += l.residual as f64 * n;
            seen += idx.len();
        }
        let val_l = validation_loss(&params, dataset, validation, config.batch_size, weight)?;
        if !val_l.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: order.len(),
                detail: format!("validation loss is {val_l}"),
            });
        }
        let n = seen as f64;
        let log = EpochLog {
            epoch,
            train_l: sum_l / n,
            train_lr: sum_lr / n,
            train_li: sum_li / n,
            val_l,
            lr: adam.lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: L {:.6e} L_r {:.6e} L_i {:.6e} val {:.6e} lr {:e} ({:.1}s)",
            log.train_l,
            log.train_lr,
            log.train_li,
            log.val_l,
            log.lr,
            log.seconds
        );
        if let Some(path) = &config.log_csv {
            append_csv(path, &log, start_epoch == 0 && logs.is_empty())?;
        }
        logs.push(log);

        let improved = val_l < scheduler.tracker.best;
        adam.lr = scheduler.observe(val_l);
        let stop = early.observe(val_l);
        if improved {
            best_params = params.clone();
            best_epoch = Some(epoch);
            if let Some(path) = &config.checkpoint_path {
                Checkpoint {
                    params: params.clone(),
                    adam: adam.clone(),
                    epoch,
                    lr_reductions: scheduler.reductions,
                    best_val: val_l,
                }
                .save(path)?;
            }
        }
        if stop {
            log::info!("early stop at epoch {epoch}: no improvement for {} epochs", early.patience);
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        best_params,
        final_params: params,
        logs,
        best_epoch,
        best_val: early.tracker.best,
        stopped_early,
    })
}

fn held_out(dataset: &Dataset, split: &DatasetSplit) -> Vec<Tensor> {
    let idx = if split.validation.is_empty() { &split.train } else { &split.validation };
    idx.iter().map(|&i| dataset.images[i].clone()).collect()
}

/// Drops repeated batch sizes, keeping first occurrences, with a warning.
pub fn dedup_batch_sizes(sizes: &[usize]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &b in sizes {
        if seen.insert(b) {
            out.push(b);
        } else {
            log::warn!("batch size {b} listed more than once; running it once");
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub table: QualityTable,
    pub logs: Vec<(String, Vec<EpochLog>)>,
}

/// One model per batch size, shared seeds and split, evaluated on the
/// held-out images. Rows use the `batch_size,psnr,ssim,mse` layout.
pub fn batch_size_sweep(
    base: &TrainConfig,
    batch_sizes: &[usize],
    dataset: &Dataset,
    split: &DatasetSplit,
) -> Result<ExperimentReport> {
    let eval = held_out(dataset, split);
    let mut table = QualityTable::new("batch_size");
    let mut logs = Vec::new();
    for b in dedup_batch_sizes(batch_sizes) {
        let config = TrainConfig {
            batch_size: b,
            ..base.clone()
        };
        log::info!("sweep: training with batch size {b}");
        let out = train(&config, dataset, split, model::init_params(config.seeds.init))?;
        table.push(b.to_string(), metrics::evaluate_model(&out.best_params, &eval)?);
        logs.push((b.to_string(), out.logs));
    }
    Ok(ExperimentReport { table, logs })
}

pub const ABLATION_WITH: &str = "With PgIC";
pub const ABLATION_WITHOUT: &str = "Without PgIC";

/// Trains one arm with the residual loss and one without, from identical
/// initial weights, data order and augmentation; reports `Model,PSNR,SSIM,MSE`.
pub fn ablation_run(base: &TrainConfig, dataset: &Dataset, split: &DatasetSplit) -> Result<ExperimentReport> {
    let eval = held_out(dataset, split);
    let mut table = QualityTable::with_metric_names("Model", ["PSNR", "SSIM", "MSE"]);
    let mut logs = Vec::new();
    for (name, pgic) in [(ABLATION_WITH, true), (ABLATION_WITHOUT, false)] {
        let config = TrainConfig {
            pgic_enabled: pgic,
            ..base.clone()
        };
        log::info!("ablation: training arm `{name}`");
        let out = train(&config, dataset, split, model::init_params(config.seeds.init))?;
        table.push(name, metrics::evaluate_model(&out.best_params, &eval)?);
        logs.push((name.to_string(), out.logs));
    }
    Ok(ExperimentReport { table, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dataset(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Dataset::from_images((0..n).map(|_| Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).collect())
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_epochs: epochs,
            image_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scheduler_reduces_after_exactly_patience() {
        let mut s = PlateauScheduler::new(0.001, 0.1, 10);
        assert_eq!(s.observe(1.0), 0.001);
        for _ in 0..9 {
            assert_eq!(s.observe(1.0), 0.001);
        }
        assert_eq!(s.observe(1.0), 0.0001);
        for _ in 0..10 {
            s.observe(2.0);
        }
        assert_eq!(s.lr(), 0.00001);
    }

    #[test]
    fn early_stop_counts_from_last_best() {
        let mut e = EarlyStopping::new(20);
        assert!(!e.observe(1.0));
        for _ in 0..18 {
            assert!(!e.observe(1.0));
        }
        assert!(!e.observe(0.5), "improvement resets the window");
        for _ in 0..19 {
            assert!(!e.observe(0.5));
        }
        assert!(e.observe(0.7));
    }

    #[test]
    fn config_text_roundtrip_and_validation() {
        let c = TrainConfig::from_text("# comment\nbatch_size = 16\npgic = false\nlr=0.01 # inline\n").unwrap();
        assert_eq!(c.batch_size, 16);
        assert!(!c.pgic_enabled);
        assert_eq!(c.lr, 0.01);
        assert_eq!(TrainConfig::from_text(&c.to_config_text()).unwrap(), c);
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("plateau_patience = 20").is_err());
        assert!(TrainConfig::from_text("plateau_factor = 1").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds = tiny_dataset(4);
        let p = model::init_params(1);
        let out = train(&tiny_config(0), &ds, &crate::data::split_80_20(4, 0), p.clone()).unwrap();
        assert!(out.logs.is_empty());
        assert_eq!(out.best_params, p);
        assert_eq!(out.final_params, p);
    }

    #[test]
    fn pgic_off_logs_equal_columns_and_runs_are_deterministic() {
        let ds = tiny_dataset(5);
        let split = crate::data::split_80_20(5, 0);
        let mut c = tiny_config(2);
        c.pgic_enabled = false;
        let a = train(&c, &ds, &split, model::init_params(0)).unwrap();
        for l in &a.logs {
            assert_eq!(l.train_l, l.train_lr);
        }
        let b = train(&c, &ds, &split, model::init_params(0)).unwrap();
        let strip = |ls: &[EpochLog]| ls.iter().map(|l| (l.train_l, l.val_l, l.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&a.logs), strip(&b.logs));
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn best_checkpoint_is_no_worse_than_last_epoch() {
        let ds = tiny_dataset(5);
        let split = crate::data::split_80_20(5, 0);
        let out = train(&tiny_config(4), &ds, &split, model::init_params(0)).unwrap();
        assert!(out.best_val <= out.logs.last().unwrap().val_l);
        let v = validation_loss(&out.best_params, &ds, &split.validation, 2, 1.0).unwrap();
        assert_eq!(v, out.best_val);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(5);
        let split = crate::data::split_80_20(5, 0);
        let mut c = tiny_config(2);
        c.checkpoint_path = Some(dir.path().join("ckpt.aew"));
        let out = train(&c, &ds, &split, model::init_params(0)).unwrap();
        let ck = Checkpoint::load(c.checkpoint_path.as_ref().unwrap()).unwrap();
        assert_eq!(Some(ck.epoch), out.best_epoch);
        assert_eq!(ck.params, out.best_params);
        assert_eq!(ck.best_val, out.best_val);
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
        c.max_epochs = ck.epoch + 1;
        let resumed = train_from(&c, &ds, &split, ck.clone()).unwrap();
        assert_eq!(resumed.logs.len(), 1);
        assert_eq!(resumed.logs[0].epoch, ck.epoch + 1);
    }

    #[test]
    fn nan_input_names_the_batch() {
        let mut ds = tiny_dataset(4);
        ds.images[0].data_mut()[0] = f32::NAN;
        let split = DatasetSplit {
            train: vec![1, 0, 2, 3],
            validation: vec![1],
            seed: 0,
        };
        let mut c = tiny_config(1);
        c.augment = false;
        match train(&c, &ds, &split, model::init_params(0)) {
            Err(Error::NonFinite { epoch: 1, detail, .. }) => assert!(detail.contains('0'), "{detail}"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn sweep_dedups() {
        assert_eq!(dedup_batch_sizes(&[8, 16, 8, 4]), vec![8, 16, 4]);
    }

    #[test]
    fn zero_weight_ablation_arms_coincide() {
        let ds = tiny_dataset(5);
        let split = crate::data::split_80_20(5, 0);
        let mut c = tiny_config(1);
        c.residual_weight = 0.0;
        let r = ablation_run(&c, &ds, &split).unwrap();
        assert_eq!(r.table.csv_header(), "Model,PSNR,SSIM,MSE");
        assert_eq!(r.table.rows[0].1, r.table.rows[1].1);
        assert_eq!(r.logs[0].1[0].train_l, r.logs[1].1[0].train_l);
    }
}
