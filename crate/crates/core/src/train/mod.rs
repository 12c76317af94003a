//! Unsupervised training: patch sampling, optimizer steps, checkpoints.

mod adam;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::error::{Error, Result};
use crate::io::{crop_angular, DatasetEntry};
use crate::lf::{back_transform_map, generate_sub_lfs, LightField, Quadrant};
use crate::losses::{
    total_loss_unconstrained_with_grad, total_loss_with_grad, LossBreakdown, LossConfig,
};
use crate::model::{
    build_network, Checkpoint, ColorMode, InputMode, MultiScaleOutput, Network, NetworkConfig,
    OutputGrads, ScaleMaps, Tape,
};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub angular: (usize, usize),
    pub batch: usize,
    pub adam: AdamConfig,
    pub iterations: u64,
    pub seed: u64,
    pub loss: LossConfig,
    /// `false` trains the full-light-field baseline with the unconstrained
    /// photometric loss.
    pub occlusion_aware: bool,
    /// `false` zeroes the smoothness weight.
    pub smoothness: bool,
    pub checkpoint_interval: u64,
    pub color_mode: ColorMode,
    pub scale_features: [usize; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            angular: (7, 7),
            batch: 4,
            adam: AdamConfig::default(),
            iterations: 100_000,
            seed: 0,
            loss: LossConfig::default(),
            occlusion_aware: true,
            smoothness: true,
            checkpoint_interval: 1000,
            color_mode: ColorMode::Rgb,
            scale_features: [64, 128, 256, 512],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must be a positive multiple of 8",
                self.patch_size
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.adam.lr
            )));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::InvalidArgument(
                "checkpoint interval must be at least 1".into(),
            ));
        }
        self.effective_loss().validate()?;
        self.network_config().validate()
    }

    pub fn network_config(&self) -> NetworkConfig {
        let (m, n) = self.angular;
        let base = if self.occlusion_aware {
            NetworkConfig::for_angular(m, n)
        } else {
            NetworkConfig::full_for_angular(m, n)
        };
        NetworkConfig {
            color_mode: self.color_mode,
            scale_features: self.scale_features,
            ..base
        }
    }

    /// Loss config with the smoothness ablation applied.
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            beta: if self.smoothness { self.loss.beta } else { 0.0 },
            ..self.loss.clone()
        }
    }
}

/// Central `angular` views of `entry`, randomly cropped to a square patch
/// shared by every view.
pub fn sample_patch(
    entry: &DatasetEntry,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LightField> {
    let (h, w) = entry.lf.spatial();
    let p = cfg.patch_size;
    if h < p || w < p {
        return Err(Error::InvalidArgument(format!(
            "scene {} is {h}x{w}, smaller than the {p}x{p} patch",
            entry.scene_name
        )));
    }
    let lf = crop_angular(&entry.lf, cfg.angular)?;
    let row = rng.random_range(0..=h - p);
    let col = rng.random_range(0..=w - p);
    lf.crop_spatial(row, col, p, p)
}

fn prepare(lf: &LightField, color: ColorMode) -> LightField {
    match (color, lf.channels()) {
        (ColorMode::Gray, 3) => lf.to_gray(),
        _ => lf.clone(),
    }
}

fn flip_grads(g: &OutputGrads, q: Quadrant) -> OutputGrads {
    OutputGrads {
        scales: g
            .scales
            .iter()
            .map(|s| ScaleMaps {
                disparity: back_transform_map(s.disparity.view(), q),
                logit: back_transform_map(s.logit.view(), q),
            })
            .collect(),
    }
}

fn scale_grads(g: &mut OutputGrads, k: f64) {
    for s in &mut g.scales {
        s.disparity *= k;
        s.logit *= k;
    }
}

/// Loss and parameter gradients (accumulated into `network`, pre-scaled by
/// `weight`) for one patch.
fn accumulate_patch(
    network: &mut Network,
    lf: &LightField,
    loss: &LossConfig,
    weight: f64,
) -> Result<LossBreakdown> {
    match network.config().input_mode {
        InputMode::Quadrants => {
            let bundle = generate_sub_lfs(lf).transformed();
            let mut outputs: Vec<MultiScaleOutput> = Vec::with_capacity(4);
            let mut tapes: Vec<Tape> = Vec::with_capacity(4);
            for q in Quadrant::ALL {
                let (out, tape) = network.forward_with_tape(&bundle.get(q).stack_channels())?;
                outputs.push(out.back_transformed(q));
                tapes.push(tape);
            }
            let outputs: [MultiScaleOutput; 4] = outputs.try_into().expect("four quadrants");
            let (breakdown, grads) = total_loss_with_grad(lf, &outputs, loss)?;
            check_finite(&breakdown)?;
            for (q, (g, tape)) in Quadrant::ALL.into_iter().zip(grads.iter().zip(&tapes)) {
                let mut g = flip_grads(g, q);
                scale_grads(&mut g, weight);
                network.backward(tape, &g)?;
            }
            Ok(breakdown)
        }
        InputMode::Full => {
            let (out, tape) = network.forward_with_tape(&lf.stack_channels())?;
            let (breakdown, mut g) = total_loss_unconstrained_with_grad(lf, &out, loss)?;
            check_finite(&breakdown)?;
            scale_grads(&mut g, weight);
            network.backward(&tape, &g)?;
            Ok(breakdown)
        }
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if !b.total.is_finite() || b.c_rec.iter().chain(&b.sm).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss {b:?}")));
    }
    Ok(())
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let scales = parts[0].c_rec.len();
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        total: avg(&|b| b.total),
        c_rec: (0..scales).map(|s| avg(&|b| b.c_rec[s])).collect(),
        sm: (0..scales).map(|s| avg(&|b| b.sm[s])).collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| Error::malformed("checkpoint", "bad rng position"))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    train_config: TrainConfig,
    rng: RngState,
    adam_step: u64,
}

/// One log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub total: f64,
    pub c_rec: Vec<f64>,
    pub sm: Vec<f64>,
}

/// Network, optimizer and data RNG advancing together.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    pub optimizer: Adam,
    pub cfg: TrainConfig,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh trainer. The network is initialized from `cfg.seed`; the data
    /// RNG from a stream derived from it.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let network = build_network(cfg.network_config(), cfg.seed)?;
        let optimizer = Adam::new(cfg.adam, &network);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            network,
            optimizer,
            cfg,
            iteration: 0,
            rng,
        })
    }

    /// One optimizer update on `batch`; returns the batch-mean losses.
    pub fn step(&mut self, batch: &[LightField]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let loss = self.cfg.effective_loss();
        self.network.zero_grad();
        let weight = 1.0 / batch.len() as f64;
        let mut parts = Vec::with_capacity(batch.len());
        for lf in batch {
            let lf = prepare(lf, self.cfg.color_mode);
            parts.push(accumulate_patch(&mut self.network, &lf, &loss, weight)?);
        }
        let grads_finite = self
            .network
            .params()
            .iter()
            .all(|(_, p)| p.grad.iter().all(|g| g.is_finite()));
        if !grads_finite {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        self.optimizer.update(&mut self.network);
        self.iteration += 1;
        Ok(mean_breakdown(&parts))
    }

    pub fn sample_batch(&mut self, dataset: &[DatasetEntry]) -> Result<Vec<LightField>> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        (0..self.cfg.batch)
            .map(|_| {
                let k = self.rng.random_range(0..dataset.len());
                sample_patch(&dataset[k], &self.cfg, &mut self.rng)
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.network.clone(), self.iteration);
        self.optimizer.store(&self.network, &mut ck);
        ck.meta = serde_json::to_value(TrainMeta {
            train_config: self.cfg.clone(),
            rng: RngState::capture(&self.rng),
            adam_step: self.optimizer.step,
        })?;
        Ok(ck)
    }

    /// Restores a trainer exactly as it was when `ck` was written. A given
    /// `cfg` may change `iterations` and `checkpoint_interval`; any other
    /// difference from the stored config is an error.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<&TrainConfig>) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::malformed("checkpoint", format!("no training state: {e}")))?;
        let mut train_config = meta.train_config;
        if let Some(c) = cfg {
            train_config.iterations = c.iterations;
            train_config.checkpoint_interval = c.checkpoint_interval;
            if &train_config != c {
                return Err(Error::InvalidArgument(
                    "training config differs from the one stored in the checkpoint".into(),
                ));
            }
        }
        train_config.validate()?;
        if ck.network.config() != &train_config.network_config() {
            return Err(Error::malformed(
                "checkpoint",
                "network config does not match training config",
            ));
        }
        let optimizer = Adam::restore(train_config.adam, meta.adam_step, ck)?;
        Ok(Self {
            network: ck.network.clone(),
            optimizer,
            cfg: train_config,
            iteration: ck.iteration,
            rng: meta.rng.restore()?,
        })
    }
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.ckpt")
}

/// Highest-iteration periodic checkpoint in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(iter) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| iter > *b) {
            best = Some((iter, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<LogRecord>,
}

/// Drops log lines past `iteration` (left behind by an interrupted run).
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: LogRecord = serde_json::from_str(&line)?;
        if rec.iteration <= iteration {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains until `cfg.iterations`, writing periodic checkpoints, a final
/// `model.ckpt` and a JSON-lines log into `out_dir`. With `resume`, picks up
/// from the latest periodic checkpoint in `out_dir` if there is one.
///
/// On a non-finite loss, writes `diagnostic.json` with the offending
/// iteration before returning the error.
pub fn train_loop(
    dataset: &[DatasetEntry],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut trainer = match resume.then(|| latest_checkpoint(out_dir)).transpose()?.flatten() {
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(&path)?, Some(cfg))?;
            log::info!("resuming from {} at iteration {}", path.display(), t.iteration);
            truncate_log(&log_path, t.iteration)?;
            t
        }
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            Trainer::new(cfg.clone())?
        }
    };
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut last = None;
    while trainer.iteration < trainer.cfg.iterations {
        let batch = trainer.sample_batch(dataset)?;
        let breakdown = match trainer.step(&batch) {
            Ok(b) => b,
            Err(e) => {
                if e.is_numeric() {
                    let dump = out_dir.join("diagnostic.json");
                    let body = serde_json::json!({
                        "iteration": trainer.iteration + 1,
                        "error": e.to_string(),
                        "last": last,
                    });
                    fs::write(&dump, serde_json::to_vec_pretty(&body)?)
                        .map_err(|err| Error::io(&dump, err))?;
                }
                return Err(e);
            }
        };
        let rec = LogRecord {
            iteration: trainer.iteration,
            total: breakdown.total,
            c_rec: breakdown.c_rec,
            sm: breakdown.sm,
        };
        writeln!(log_file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        if trainer.iteration % 100 == 0 {
            log::info!("iteration {} loss {:.6}", rec.iteration, rec.total);
        }
        last = Some(rec);
        let done = trainer.iteration == trainer.cfg.iterations;
        if trainer.iteration % trainer.cfg.checkpoint_interval == 0 || done {
            trainer
                .checkpoint()?
                .save(&out_dir.join(checkpoint_name(trainer.iteration)))?;
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint()?.save(&final_path)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        log: log_path,
        last,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}
