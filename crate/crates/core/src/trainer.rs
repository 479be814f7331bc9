//! Contrastive pretraining loop.
//!
//! Epochs are 0-indexed in files and reports; the sampling schedule is fed
//! `epoch + 1`, so the first `activation_epoch` epochs run plain InfoNCE.
//! Randomness is derived from `(seed, purpose, epoch, index)` alone, which
//! makes every step reproducible and lets a run resume at any epoch boundary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, KEY, QUERY};
use crate::data::augment::{two_views, AugmentationPolicy, FloatImage};
use crate::data::dataset::{subsample_fraction, write, Cohort, Dataset};
use crate::encoder::StageEncoderConfig;
use crate::error::{Error, Result};
use crate::kv::{render, KvFile};
use crate::loss::symmetric_batch_loss;
use crate::math::{cosine_slices, Temperature};
use crate::momentum::{momentum_at, MomentumPair, NetworkConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampling::{SamplingPlan, Strategy};

pub const CONFIG_FILE: &str = "config.cfg";
pub const LOSS_CSV: &str = "loss.csv";
pub const STEP_CSV: &str = "loss_steps.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

/// Input normalization applied to every image in `[0, 1]`.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Desk,
    SwinTiny,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Desk => "desk",
            Arch::SwinTiny => "swin_tiny",
        }
    }

    pub fn encoder(self) -> StageEncoderConfig {
        match self {
            Arch::Desk => StageEncoderConfig::desk(),
            Arch::SwinTiny => StageEncoderConfig::swin_tiny(),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Arch::Desk),
            "swin_tiny" => Ok(Arch::SwinTiny),
            _ => Err(Error::Config(format!("unknown encoder `{s}` (desk|swin_tiny)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub plan: SamplingPlan,
    pub tau: f64,
    /// Base EMA momentum.
    pub momentum: f64,
    /// Cosine-ramp the momentum toward 1 over training.
    pub momentum_ramp: bool,
    pub seed: u64,
    pub data_fraction: f64,
    pub arch: Arch,
    pub input_size: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub proj_layers: usize,
    pub pred_hidden: usize,
    pub pred_layers: usize,
    /// Cap on pretraining patches per slide; 0 keeps all.
    pub patches_per_slide: usize,
    /// Embed the un-augmented patch through the key branch for ranking.
    pub use_originals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            epochs: 20,
            warmup_epochs: 5,
            base_lr: 1.5e-4,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            plan: SamplingPlan::default(),
            tau: Temperature::default().get(),
            momentum: 0.99,
            momentum_ramp: false,
            seed: 0,
            data_fraction: 1.0,
            arch: Arch::Desk,
            input_size: net.encoder.input_size,
            proj_hidden: net.proj_hidden,
            proj_dim: net.proj_dim,
            proj_layers: net.proj_layers,
            pred_hidden: net.pred_hidden,
            pred_layers: net.pred_layers,
            patches_per_slide: 0,
            use_originals: true,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let mut c = Self::default();
        kv.set("epochs", &mut c.epochs)?;
        kv.set("warmup_epochs", &mut c.warmup_epochs)?;
        kv.set("base_lr", &mut c.base_lr)?;
        kv.set("batch_size", &mut c.batch_size)?;
        kv.set("beta1", &mut c.optimizer.beta1)?;
        kv.set("beta2", &mut c.optimizer.beta2)?;
        kv.set("adam_eps", &mut c.optimizer.eps)?;
        kv.set("weight_decay", &mut c.optimizer.weight_decay)?;
        kv.set("strategy", &mut c.plan.strategy)?;
        kv.set("s_fixed", &mut c.plan.s_fixed)?;
        kv.set("t_fixed", &mut c.plan.t_fixed)?;
        kv.set("activation_epoch", &mut c.plan.activation_epoch)?;
        kv.set("s_start", &mut c.plan.s_start)?;
        kv.set("s_step", &mut c.plan.s_step)?;
        kv.set("s_min", &mut c.plan.s_min)?;
        kv.set("t_step", &mut c.plan.t_step)?;
        kv.set("tau", &mut c.tau)?;
        kv.set("momentum", &mut c.momentum)?;
        kv.set("momentum_ramp", &mut c.momentum_ramp)?;
        kv.set("seed", &mut c.seed)?;
        kv.set("data_fraction", &mut c.data_fraction)?;
        if let Some(arch) = kv.take::<Arch>("encoder")? {
            c.arch = arch;
            c.input_size = arch.encoder().input_size;
        }
        kv.set("input_size", &mut c.input_size)?;
        kv.set("proj_hidden", &mut c.proj_hidden)?;
        kv.set("proj_dim", &mut c.proj_dim)?;
        kv.set("proj_layers", &mut c.proj_layers)?;
        kv.set("pred_hidden", &mut c.pred_hidden)?;
        kv.set("pred_layers", &mut c.pred_layers)?;
        kv.set("patches_per_slide", &mut c.patches_per_slide)?;
        kv.set("use_originals", &mut c.use_originals)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        Self::from_kv(KvFile::parse(origin, text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let p = &self.plan;
        render(&[
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.optimizer.beta1.to_string()),
            ("beta2", self.optimizer.beta2.to_string()),
            ("adam_eps", self.optimizer.eps.to_string()),
            ("weight_decay", self.optimizer.weight_decay.to_string()),
            ("strategy", p.strategy.to_string()),
            ("s_fixed", p.s_fixed.to_string()),
            ("t_fixed", p.t_fixed.to_string()),
            ("activation_epoch", p.activation_epoch.to_string()),
            ("s_start", p.s_start.to_string()),
            ("s_step", p.s_step.to_string()),
            ("s_min", p.s_min.to_string()),
            ("t_step", p.t_step.to_string()),
            ("tau", self.tau.to_string()),
            ("momentum", self.momentum.to_string()),
            ("momentum_ramp", self.momentum_ramp.to_string()),
            ("seed", self.seed.to_string()),
            ("data_fraction", self.data_fraction.to_string()),
            ("encoder", self.arch.name().to_string()),
            ("input_size", self.input_size.to_string()),
            ("proj_hidden", self.proj_hidden.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("proj_layers", self.proj_layers.to_string()),
            ("pred_hidden", self.pred_hidden.to_string()),
            ("pred_layers", self.pred_layers.to_string()),
            ("patches_per_slide", self.patches_per_slide.to_string()),
            ("use_originals", self.use_originals.to_string()),
        ])
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }

    pub fn network(&self) -> NetworkConfig {
        let mut encoder = self.arch.encoder();
        encoder.input_size = self.input_size;
        NetworkConfig {
            encoder,
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            proj_layers: self.proj_layers,
            pred_hidden: self.pred_hidden,
            pred_layers: self.pred_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction must lie in (0, 1], got {}", self.data_fraction));
        }
        Temperature::new(self.tau)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        self.optimizer.validate()?;
        self.plan.validate()?;
        let demand = self.plan.peak_demand(self.epochs);
        if demand > self.batch_size - 1 {
            return bad(format!(
                "{} schedule needs {demand} selected keys per anchor but a batch of {} offers {}",
                self.plan.strategy,
                self.batch_size,
                self.batch_size - 1
            ));
        }
        self.network().validate()
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
pub fn lr_at(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warm = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warm {
        return config.base_lr * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let t = (step - warm).min(span) as f64 / span as f64;
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy)]
#[repr(u8)]
pub enum Stream {
    Order = 1,
    Augment = 2,
    Subset = 3,
}

/// Independent RNG for one `(seed, stream, epoch, index)` tuple.
pub fn rng_for(seed: u64, stream: Stream, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = stream as u8;
    key[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[24..].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Pretraining patches held in memory.
#[derive(Debug, Clone)]
pub struct SslData {
    pub images: Vec<FloatImage>,
    pub slide_ids: Vec<String>,
}

impl SslData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Internal-cohort patches after the slide-level fraction and per-slide cap.
pub fn load_ssl_data(dataset: &Dataset, config: &TrainConfig) -> Result<SslData> {
    let ids: Vec<String> = dataset
        .slides_in(Cohort::Internal)
        .map(|s| s.slide_id.clone())
        .collect();
    let chosen = subsample_fraction(&ids, config.data_fraction, config.seed)?;
    let mut images = Vec::new();
    for (si, id) in chosen.iter().enumerate() {
        let record = dataset
            .slides
            .iter()
            .find(|s| &s.slide_id == id)
            .expect("subsample returns known ids");
        let mut patches = dataset.load_patches(record)?;
        if config.patches_per_slide > 0 && patches.len() > config.patches_per_slide {
            let mut rng = rng_for(config.seed, Stream::Subset, 0, si);
            patches.shuffle(&mut rng);
            patches.truncate(config.patches_per_slide);
        }
        images.extend(patches.iter().map(FloatImage::from_rgb));
    }
    if images.is_empty() {
        return Err(Error::Data("no pretraining patches after subsampling".into()));
    }
    Ok(SslData {
        images,
        slide_ids: chosen,
    })
}

/// `(N, 3, S, S)` normalized input tensor.
pub fn images_to_tensor(images: &[FloatImage], dtype: DType) -> Result<Tensor> {
    let s = images.first().map(|i| i.width).unwrap_or(0);
    let mut buf = Vec::with_capacity(images.len() * 3 * s * s);
    for img in images {
        if img.width != s || img.height != s {
            return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
        }
        img.write_chw(&mut buf);
    }
    for v in &mut buf {
        *v = (*v - PIXEL_MEAN) / PIXEL_STD;
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, s, s), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub originals: Option<Tensor>,
}

/// Augmented views for the given dataset indices.
pub fn make_batch(
    data: &SslData,
    indices: &[usize],
    epoch: usize,
    config: &TrainConfig,
    dtype: DType,
) -> Result<Batch> {
    let policy = AugmentationPolicy::desk(config.input_size);
    let (mut a, mut b, mut o) = (Vec::new(), Vec::new(), Vec::new());
    for &i in indices {
        let mut rng = rng_for(config.seed, Stream::Augment, epoch, i);
        let (va, vb, orig) = two_views(&data.images[i], &policy, &mut rng);
        a.push(va);
        b.push(vb);
        o.push(orig);
    }
    Ok(Batch {
        view_a: images_to_tensor(&a, dtype)?,
        view_b: images_to_tensor(&b, dtype)?,
        originals: if config.use_originals {
            Some(images_to_tensor(&o, dtype)?)
        } else {
            None
        },
    })
}

/// Per-epoch sample order; trailing partial batch dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, Stream::Order, epoch, 0));
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Whether any anchor had a non-empty sample selection.
    pub sampling_active: bool,
}

fn first_bad_row(t: &Tensor) -> Option<(usize, Vec<f32>)> {
    let rows = t.detach().to_dtype(DType::F32).ok()?.to_vec2::<f32>().ok()?;
    rows.into_iter()
        .enumerate()
        .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
}

fn preview(v: &[f64]) -> String {
    let mut s = String::new();
    for x in v.iter().take(8) {
        let _ = write!(s, "{x:.4} ");
    }
    if v.len() > 8 {
        s.push_str("...");
    }
    s
}

/// Forward, symmetric loss, AdamW step on the query branch, then EMA of the key branch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    pair: &MomentumPair,
    opt: &mut AdamW,
    batch: &Batch,
    plan: &SamplingPlan,
    epoch: usize,
    tau: Temperature,
    lr: f64,
    step: usize,
) -> Result<StepOutcome> {
    let emb = match pair.embed_views(&batch.view_a, &batch.view_b, batch.originals.as_ref()) {
        Ok(e) => e,
        Err(Error::Data(msg)) => {
            let q = pair.query.forward(&batch.view_a)?;
            let detail = match first_bad_row(&q) {
                Some((i, row)) => format!("{msg}; query row {i}: {:?}", &row[..row.len().min(8)]),
                None => msg,
            };
            return Err(Error::NonFiniteLoss { step, detail });
        }
        Err(e) => return Err(e),
    };
    let sl = symmetric_batch_loss(
        plan,
        epoch + 1,
        &emb.queries_a,
        &emb.queries_b,
        &emb.keys_a,
        &emb.keys_b,
        &emb.original_keys,
        tau,
    )?;
    if !sl.value.is_finite() {
        let row: Vec<f64> = emb
            .keys_b
            .rows()
            .map(|k| cosine_slices(emb.queries_a.row(0), k).unwrap_or(f64::NAN))
            .collect();
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("loss {}; similarity row 0: {}", sl.value, preview(&row)),
        });
    }
    let sampling_active = sl
        .forward
        .selections
        .iter()
        .chain(&sl.backward.selections)
        .any(|s| !s.is_empty());

    let dtype = emb.raw_queries_a.dtype();
    let shape = emb.raw_queries_a.shape().clone();
    let ga = Tensor::from_vec(sl.grad_queries_a, shape.clone(), &Device::Cpu)?.to_dtype(dtype)?;
    let gb = Tensor::from_vec(sl.grad_queries_b, shape, &Device::Cpu)?.to_dtype(dtype)?;
    let surrogate = ((emb.raw_queries_a * ga)?.sum_all()? + (emb.raw_queries_b * gb)?.sum_all()?)?;
    let grads = surrogate.backward()?;
    opt.step(&pair.query_params, &grads, lr)?;
    pair.ema_update()?;
    Ok(StepOutcome {
        loss: sl.value,
        sampling_active,
    })
}

/// Snapshot of the pair, optimizer and counters.
pub fn make_checkpoint(
    config: &TrainConfig,
    pair: &MomentumPair,
    opt: &AdamW,
    epoch: usize,
    global_step: usize,
    best_loss: f64,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(config.to_kv_string());
    ck.epoch = epoch;
    ck.global_step = global_step;
    ck.momentum = pair.momentum();
    ck.best_loss = best_loss;
    ck.put_store(QUERY, &pair.query_params)?;
    ck.put_store(KEY, &pair.key_params)?;
    opt.save_into(&mut ck)?;
    Ok(ck)
}

/// Rebuilds the configuration and network pair stored in a checkpoint.
pub fn pair_from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<(TrainConfig, MomentumPair)> {
    let config = TrainConfig::parse("<checkpoint>", &ck.config_text)?;
    let mut pair = MomentumPair::new(&config.network(), dtype, config.momentum, config.seed)?;
    ck.load_store(QUERY, &pair.query_params)?;
    ck.load_store(KEY, &pair.key_params)?;
    pair.set_momentum(ck.momentum)?;
    Ok((config, pair))
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub step_active: Vec<bool>,
    pub steps_per_epoch: usize,
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn parse_field<T: FromStr>(path: &Path, line: usize, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("bad value `{v}`"),
    })
}

/// Runs (or resumes) pretraining into `out_dir`.
///
/// Writes `config.cfg`, a per-epoch `loss.csv` (`epoch,step,lr,loss`), a
/// per-step `loss_steps.csv`, and `last`/`best`/`final` checkpoints. With
/// `resume`, an existing `last.ckpt` whose config matches is continued from its
/// epoch boundary.
pub fn run_pretraining(config: &TrainConfig, data: &SslData, out_dir: &Path, resume: bool) -> Result<PretrainReport> {
    run_pretraining_until(config, data, out_dir, resume, config.epochs)
}

/// Like [`run_pretraining`] but returns after epoch `stop` (0 < stop ≤ epochs),
/// leaving `last.ckpt` for a later resume. `final.ckpt` is only written once
/// the configured number of epochs is reached.
pub fn run_pretraining_until(
    config: &TrainConfig,
    data: &SslData,
    out_dir: &Path,
    resume: bool,
    stop: usize,
) -> Result<PretrainReport> {
    config.validate()?;
    let stop = stop.min(config.epochs);
    if data.len() < config.batch_size {
        return Err(Error::Data(format!(
            "{} pretraining patches cannot fill one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join(CONFIG_FILE), config.to_kv_string())?;
    let tau = Temperature::new(config.tau)?;
    let steps_per_epoch = data.len() / config.batch_size;
    let total_steps = steps_per_epoch * config.epochs;
    let dtype = DType::F32;

    let mut pair = MomentumPair::new(&config.network(), dtype, config.momentum, config.seed)?;
    let mut opt = AdamW::new(config.optimizer);
    let mut start_epoch = 0;
    let mut global_step = 0;
    let mut best = f64::INFINITY;
    let mut epoch_rows: Vec<String> = Vec::new();
    let mut step_rows: Vec<String> = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step_losses = Vec::new();
    let mut step_active = Vec::new();

    let last = out_dir.join(LAST_CKPT);
    if resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        if ck.config_text != config.to_kv_string() {
            return Err(Error::Config(format!(
                "{} was written with a different config",
                last.display()
            )));
        }
        let (_, restored) = pair_from_checkpoint(&ck, dtype)?;
        pair = restored;
        opt.load_from(&ck, &pair.query_params)?;
        start_epoch = ck.epoch;
        global_step = ck.global_step;
        best = ck.best_loss;
        let loss_path = out_dir.join(LOSS_CSV);
        for (i, r) in read_rows(&loss_path)?.into_iter().take(start_epoch).enumerate() {
            epoch_losses.push(parse_field::<f64>(&loss_path, i + 2, &r[3])?);
            epoch_rows.push(r.join(","));
        }
        let step_path = out_dir.join(STEP_CSV);
        for (i, r) in read_rows(&step_path)?.into_iter().take(global_step).enumerate() {
            step_losses.push(parse_field::<f64>(&step_path, i + 2, &r[3])?);
            step_active.push(parse_field::<bool>(&step_path, i + 2, &r[4])?);
            step_rows.push(r.join(","));
        }
        log::info!("resuming {} at epoch {start_epoch}", out_dir.display());
    }

    for epoch in start_epoch..stop.max(start_epoch) {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for indices in epoch_batches(data.len(), config.batch_size, config.seed, epoch) {
            lr = lr_at(config, global_step, steps_per_epoch);
            pair.set_momentum(momentum_at(
                config.momentum,
                global_step,
                total_steps,
                config.momentum_ramp,
            ))?;
            let batch = make_batch(data, &indices, epoch, config, dtype)?;
            let out = train_step(&pair, &mut opt, &batch, &config.plan, epoch, tau, lr, global_step)?;
            step_rows.push(format!(
                "{epoch},{global_step},{lr},{},{}",
                out.loss, out.sampling_active
            ));
            step_losses.push(out.loss);
            step_active.push(out.sampling_active);
            sum += out.loss;
            global_step += 1;
        }
        let mean = sum / steps_per_epoch as f64;
        epoch_losses.push(mean);
        epoch_rows.push(format!("{epoch},{global_step},{lr},{mean}"));
        log::info!("epoch {epoch}: loss {mean:.5} lr {lr:.3e}");

        write(&out_dir.join(LOSS_CSV), csv("epoch,step,lr,loss", &epoch_rows))?;
        write(
            &out_dir.join(STEP_CSV),
            csv("epoch,step,lr,loss,sampling_active", &step_rows),
        )?;
        if mean < best {
            best = mean;
            make_checkpoint(config, &pair, &opt, epoch + 1, global_step, best)?.save(&out_dir.join(BEST_CKPT))?;
        }
        make_checkpoint(config, &pair, &opt, epoch + 1, global_step, best)?.save(&last)?;
    }
    let final_checkpoint = if stop == config.epochs {
        let f = out_dir.join(FINAL_CKPT);
        std::fs::copy(&last, &f).map_err(|e| Error::io(&f, e))?;
        f
    } else {
        last
    };
    Ok(PretrainReport {
        out_dir: out_dir.to_path_buf(),
        final_checkpoint,
        best_checkpoint: out_dir.join(BEST_CKPT),
        loss_csv: out_dir.join(LOSS_CSV),
        epoch_losses,
        step_losses,
        step_active,
        steps_per_epoch,
    })
}

fn csv(header: &str, rows: &[String]) -> String {
    let mut s = String::with_capacity(rows.len() * 40);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Convenience wrapper: strategy override plus dataset loading.
pub fn pretrain_dataset(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    strategy: Option<Strategy>,
    resume: bool,
) -> Result<PretrainReport> {
    let mut cfg = config.clone();
    if let Some(s) = strategy {
        cfg.plan.strategy = s;
    }
    let data = load_ssl_data(dataset, &cfg)?;
    run_pretraining(&cfg, &data, out_dir, resume)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_points() {
        let c = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            base_lr: 1.0,
            ..Default::default()
        };
        assert_eq!(lr_at(&c, 0, 5), 0.0);
        assert!((lr_at(&c, 10, 5) - 1.0).abs() < 1e-15);
        assert!((lr_at(&c, 30, 5) - 0.5).abs() < 1e-12);
        assert!(lr_at(&c, 50, 5).abs() < 1e-15);
        let eps = lr_at(&c, 10, 5) - lr_at(&c, 9, 5);
        assert!(eps > 0.0 && eps <= 0.1 + 1e-12);
    }

    #[test]
    fn config_validation_and_round_trip() {
        let c = TrainConfig::parse("t", "").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert!(TrainConfig::parse("t", "batch_size = 1").is_err());
        assert!(TrainConfig::parse("t", "epochs = 5\nwarmup_epochs = 5").is_err());
        let err = TrainConfig::parse("t", "epochs = 5\nbogus = 1").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let c = TrainConfig::parse("t", "strategy = dynamic\nt_step = 4\nseed = 9").unwrap();
        let back = TrainConfig::parse("t", &c.to_kv_string()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::parse("t", "strategy = dynamic").is_err());
    }

    #[test]
    fn rng_streams_are_independent_and_stable() {
        use rand::Rng;
        let a: u64 = rng_for(1, Stream::Augment, 2, 3).random();
        let b: u64 = rng_for(1, Stream::Augment, 2, 3).random();
        let c: u64 = rng_for(1, Stream::Augment, 2, 4).random();
        let d: u64 = rng_for(1, Stream::Order, 2, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn batches_cover_without_repeats() {
        let b = epoch_batches(10, 3, 0, 0);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
        assert_ne!(epoch_batches(10, 3, 0, 0), epoch_batches(10, 3, 0, 1));
    }
}
