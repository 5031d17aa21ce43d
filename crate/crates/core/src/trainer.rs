//! Deterministic unsupervised training with AdamW and checkpointing.
//!
//! Sample `j` of step `s` is image `order(e)[k]` where `s·B + j = e·n + k`
//! and `order(e)` is a Fisher–Yates shuffle seeded by `(seed, e)`. Crop
//! offsets come from a generator seeded by `(seed, s)`, so any step can be
//! reproduced from the step index alone and resuming needs no sampler state.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::{build_forward, init_params, Checkpoint, EnhancerConfig};
use crate::error::{Result, SimiError};
use crate::imageio::{load_image, to_unit_tensor, RawImage};
use crate::losses::{loss_total, LossConfig, LossReport};
use crate::nn::{AdamW, Graph, ParamStore, Real, Tensor};

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub crop_size: usize,
    pub loss: LossConfig,
    pub model: EnhancerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamW::default();
        Self {
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 8,
            max_iterations: 10_000,
            checkpoint_every: 200,
            seed: 0,
            crop_size: 256,
            loss: LossConfig::default(),
            model: EnhancerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(SimiError::InvalidConfig(format!("{name} must be positive, got {v}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(SimiError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SimiError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.crop_size == 0 || self.checkpoint_every == 0 {
            return Err(SimiError::InvalidConfig(
                "batch_size, crop_size and checkpoint_every must be positive".into(),
            ));
        }
        self.loss.weights.validate()?;
        self.model.validate()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(SimiError::FileNotFound(path.to_path_buf()));
        }
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ORDER_STREAM: u64 = 1;
const CROP_STREAM: u64 = 2;

/// Image files of a training directory and their seeded per-epoch order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub paths: Vec<PathBuf>,
    pub seed: u64,
}

pub(crate) fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(SimiError::FileNotFound(dir.to_path_buf()));
    }
    let mut paths = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    paths.retain(|p| p.is_file() && is_image_path(p));
    paths.sort();
    Ok(paths)
}

impl DatasetIndex {
    pub fn scan(dir: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let paths = list_images(dir)?;
        if paths.is_empty() {
            return Err(SimiError::EmptyDataset(dir.to_path_buf()));
        }
        Ok(Self { paths, seed })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.paths.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, ORDER_STREAM, epoch)));
        order
    }

    /// Image index of the `sample`-th draw since the start of training.
    pub fn sample(&self, sample: u64) -> usize {
        let n = self.paths.len() as u64;
        self.epoch_order(sample / n)[(sample % n) as usize]
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Square crop of side `size`; images smaller than `size` are reflect-padded
/// (centred) first.
pub fn random_crop(img: &RawImage, size: usize, rng: &mut impl Rng) -> RawImage {
    let (pw, ph) = (img.width.max(size), img.height.max(size));
    let (left, top) = ((pw - img.width) / 2, (ph - img.height) / 2);
    let x0 = rng.random_range(0..=pw - size);
    let y0 = rng.random_range(0..=ph - size);
    RawImage::from_fn(size, size, |x, y| {
        let sx = reflect((x0 + x) as isize - left as isize, img.width);
        let sy = reflect((y0 + y) as isize - top as isize, img.height);
        let p = img.pixel(sx, sy);
        [p[0], p[1], p[2]]
    })
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: u64,
    #[serde(flatten)]
    report: &'a LossReport,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:08}.simi"))
}

pub struct Trainer<T> {
    config: TrainConfig,
    dataset: DatasetIndex,
    images: Vec<RawImage>,
    store: ParamStore<T>,
    out_dir: PathBuf,
    log: BufWriter<File>,
    last_checkpoint: Option<PathBuf>,
}

impl<T: Real> Trainer<T> {
    /// Fresh run: initialises parameters and truncates the log.
    pub fn new(config: TrainConfig, data_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let store = init_params(&config.model, config.model.seed)?;
        Self::with_store(config, store, data_dir.as_ref(), out_dir.as_ref(), false)
    }

    /// Continues from a checkpoint written under the same model config.
    pub fn from_checkpoint(
        checkpoint: impl AsRef<Path>,
        config: TrainConfig,
        data_dir: impl AsRef<Path>,
        out_dir: impl AsRef<Path>,
    ) -> Result<Self> {
        config.validate()?;
        let ckpt = Checkpoint::<T>::load(checkpoint)?;
        if ckpt.config.digest() != config.model.digest() {
            return Err(SimiError::ConfigDigestMismatch);
        }
        Self::with_store(config, ckpt.store, data_dir.as_ref(), out_dir.as_ref(), true)
    }

    fn with_store(config: TrainConfig, store: ParamStore<T>, data_dir: &Path, out_dir: &Path, append: bool) -> Result<Self> {
        let dataset = DatasetIndex::scan(data_dir, config.seed)?;
        let images = dataset.paths.iter().map(load_image).collect::<Result<Vec<_>>>()?;
        fs::create_dir_all(out_dir)?;
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(out_dir.join(LOG_FILE))?;
        Ok(Self {
            config,
            dataset,
            images,
            store,
            out_dir: out_dir.to_path_buf(),
            log: BufWriter::new(log),
            last_checkpoint: None,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.store.step()
    }

    /// The `(B, 3, crop, crop)` batch used at `step` (0-based).
    pub fn batch(&self, step: u64) -> Result<Tensor<T>> {
        let b = self.config.batch_size as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, CROP_STREAM, step));
        let crops = (0..b)
            .map(|j| {
                let img = &self.images[self.dataset.sample(step * b + j)];
                to_unit_tensor(&random_crop(img, self.config.crop_size, &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&crops)
    }

    /// Loss terms for `batch` under the current parameters, without updating.
    pub fn evaluate_loss(&self, batch: &Tensor<T>) -> Result<LossReport> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let trace = build_forward(&mut g, &bound, &self.config.model, x, None)?;
        Ok(loss_total(&mut g, &trace, &self.config.loss)?.report(&g))
    }

    /// One optimisation step. Returns the loss measured before the update.
    pub fn step(&mut self) -> Result<LossReport> {
        let step = self.store.step();
        let batch = self.batch(step)?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, true);
        let x = g.constant(batch);
        let diverged = || SimiError::DivergedLoss { step: step + 1, last_checkpoint: self.last_checkpoint.clone() };
        // non-finite parameters surface as a NaN denominator before the loss
        let trace = match build_forward(&mut g, &bound, &self.config.model, x, None) {
            Err(SimiError::DivisionRangeViolation { value, .. }) if !value.is_finite() => return Err(diverged()),
            other => other?,
        };
        let loss = loss_total(&mut g, &trace, &self.config.loss)?;
        let report = loss.report(&g);
        if !report.total.is_finite() {
            return Err(diverged());
        }
        g.backward(loss.total)?;
        self.store.pull_grads(&g, &bound)?;
        self.config.optimizer().step(&mut self.store)?;
        self.store.zero_grads();
        Ok(report)
    }

    pub fn save_checkpoint(&mut self) -> Result<PathBuf> {
        let path = checkpoint_path(&self.out_dir, self.store.step());
        Checkpoint { config: self.config.model.clone(), store: self.store.clone() }.save(&path)?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    /// Trains until `max_iterations`, logging every step and writing
    /// checkpoints at multiples of `checkpoint_every` and at the end.
    pub fn run(&mut self) -> Result<PathBuf> {
        self.run_with(|_, _| {})
    }

    pub fn run_with(&mut self, mut on_step: impl FnMut(u64, &LossReport)) -> Result<PathBuf> {
        let max = self.config.max_iterations;
        if self.store.step() > max {
            return Err(SimiError::InvalidConfig(format!(
                "checkpoint is at step {} beyond max_iterations {max}",
                self.store.step()
            )));
        }
        while self.store.step() < max {
            let report = self.step()?;
            let step = self.store.step();
            serde_json::to_writer(&mut self.log, &LogRecord { step, report: &report })?;
            self.log.write_all(b"\n")?;
            on_step(step, &report);
            if step % self.config.checkpoint_every == 0 && step != max {
                self.log.flush()?;
                self.save_checkpoint()?;
            }
        }
        self.log.flush()?;
        self.save_checkpoint()
    }
}

/// Trains from scratch; returns the final checkpoint path.
pub fn train<T: Real>(config: &TrainConfig, data_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    Trainer::<T>::new(config.clone(), data_dir, out_dir)?.run()
}

/// Continues training from `checkpoint` up to `config.max_iterations`.
pub fn resume<T: Real>(
    checkpoint: impl AsRef<Path>,
    config: &TrainConfig,
    data_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    Trainer::<T>::from_checkpoint(checkpoint, config.clone(), data_dir, out_dir)?.run()
}

/// Parses the JSON-lines training log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<(u64, LossReport)>> {
    #[derive(Deserialize)]
    struct Line {
        step: u64,
        #[serde(flatten)]
        report: LossReport,
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: Line = serde_json::from_str(l)?;
            Ok((line.step, line.report))
        })
        .collect()
}
