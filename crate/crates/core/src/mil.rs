//! Bag-level classification on frozen patch features.
//!
//! The aggregator projects each patch feature to a token, prepends a learnable
//! class token, runs pre-norm transformer blocks without positional
//! encodings, and classifies the class token. Each fold trains on its own
//! patients; all fold models are then scored on the external cohort and
//! metrics are averaged across models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, QUERY};
use crate::data::dataset::{write, Cohort, Dataset};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::kv::{render, KvFile};
use crate::metrics::{multiclass_metric, Metric};
use crate::nn::{Block, LayerNorm, Linear, INIT_STD};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Init, ParamStore};
use crate::trainer::{rng_for, Stream};

pub const SCORES_CSV: &str = "scores.csv";
pub const LABELS_CSV: &str = "labels.csv";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort: Cohort,
    pub label: usize,
    pub n: usize,
    pub dim: usize,
    pub features: Vec<f32>,
}

impl Bag {
    pub fn new(slide_id: &str, patient_id: &str, label: usize, dim: usize, features: Vec<f32>) -> Result<Self> {
        if dim == 0 || features.is_empty() || !features.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "bag {slide_id}: {} values do not form rows of {dim}",
                features.len()
            )));
        }
        Ok(Self {
            slide_id: slide_id.to_string(),
            patient_id: patient_id.to_string(),
            cohort: Cohort::Internal,
            label,
            n: features.len() / dim,
            dim,
            features,
        })
    }

    fn rows(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            out.extend_from_slice(&self.features[i * self.dim..(i + 1) * self.dim]);
        }
        out
    }
}

/// Bags of one cohort for a target; slides missing from the store are left out.
pub fn load_bags(store: &FeatureStore, dataset: &Dataset, target: &str, cohort: Cohort) -> Result<Vec<Bag>> {
    if !dataset.targets.iter().any(|t| t == target) {
        return Err(Error::Config(format!("unknown target `{target}`")));
    }
    let present: BTreeSet<&String> = store.slides.iter().collect();
    let mut bags = Vec::new();
    for rec in dataset.slides_in(cohort) {
        if !present.contains(&rec.slide_id) {
            continue;
        }
        let f = store.load(&rec.slide_id)?;
        let mut bag = Bag::new(&rec.slide_id, &rec.patient_id, rec.labels[target], f.dim, f.values)?;
        bag.cohort = cohort;
        bags.push(bag);
    }
    Ok(bags)
}

/// Number of classes seen across bags (at least two).
pub fn class_count(bags: &[Bag]) -> usize {
    bags.iter().map(|b| b.label + 1).max().unwrap_or(0).max(2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
}

/// Patient label: the largest slide label, so any positive slide marks the patient.
fn patient_labels(bags: &[Bag]) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    for b in bags {
        let e = out.entry(b.patient_id.clone()).or_insert(b.label);
        *e = (*e).max(b.label);
    }
    out
}

/// Patient-level, label-stratified `k`-fold partition.
///
/// Patients of each class are shuffled and dealt round-robin, with the dealer
/// position carried across classes so fold sizes differ by at most one.
pub fn make_folds(bags: &[Bag], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config("need at least two folds".into()));
    }
    let labels = patient_labels(bags);
    if labels.len() < k {
        return Err(Error::InsufficientClassCount(format!(
            "{} patients for {k} folds",
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (p, l) in &labels {
        by_class.entry(*l).or_default().push(p.clone());
    }
    if let Some((c, ps)) = by_class.iter().find(|(_, ps)| ps.len() < k) {
        return Err(Error::InsufficientClassCount(format!(
            "class {c} has {} patients, need {k}",
            ps.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut dealer = 0;
    for ps in by_class.values_mut() {
        ps.shuffle(&mut rng);
        for p in ps.iter() {
            val[dealer % k].push(p.clone());
            dealer += 1;
        }
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(i, mut v)| {
            v.sort();
            let train = labels.keys().filter(|p| !v.contains(p)).cloned().collect();
            FoldSplit {
                fold_index: i,
                train_patients: train,
                val_patients: v,
            }
        })
        .collect())
}

/// `(train, val)` bags of one fold.
pub fn split_bags<'a>(bags: &'a [Bag], fold: &FoldSplit) -> (Vec<&'a Bag>, Vec<&'a Bag>) {
    let train: BTreeSet<&String> = fold.train_patients.iter().collect();
    let val: BTreeSet<&String> = fold.val_patients.iter().collect();
    (
        bags.iter().filter(|b| train.contains(&b.patient_id)).collect(),
        bags.iter().filter(|b| val.contains(&b.patient_id)).collect(),
    )
}

/// Reassigns patient labels by a seeded permutation (label-noise control).
pub fn shuffle_labels(bags: &[Bag], seed: u64) -> Vec<Bag> {
    let labels = patient_labels(bags);
    let patients: Vec<&String> = labels.keys().collect();
    let mut shuffled: Vec<usize> = labels.values().copied().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let map: BTreeMap<&String, usize> = patients.into_iter().zip(shuffled).collect();
    bags.iter()
        .map(|b| Bag {
            label: map[&b.patient_id],
            ..b.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub bag_cap: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 8,
            mlp_ratio: 2,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 20,
            patience: 5,
            bag_cap: 512,
            folds: 5,
            seed: 0,
        }
    }
}

impl MilConfig {
    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let c = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Pulls the MIL keys (prefixed `mil_`) out of a shared file.
    pub fn take_from(kv: &mut KvFile) -> Result<Self> {
        let mut c = Self::default();
        kv.set("mil_dim", &mut c.dim)?;
        kv.set("mil_layers", &mut c.layers)?;
        kv.set("mil_heads", &mut c.heads)?;
        kv.set("mil_mlp_ratio", &mut c.mlp_ratio)?;
        kv.set("mil_lr", &mut c.lr)?;
        kv.set("mil_weight_decay", &mut c.weight_decay)?;
        kv.set("mil_epochs", &mut c.epochs)?;
        kv.set("mil_patience", &mut c.patience)?;
        kv.set("mil_bag_cap", &mut c.bag_cap)?;
        kv.set("mil_folds", &mut c.folds)?;
        kv.set("mil_seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        render(&self.pairs())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mil_dim", self.dim.to_string()),
            ("mil_layers", self.layers.to_string()),
            ("mil_heads", self.heads.to_string()),
            ("mil_mlp_ratio", self.mlp_ratio.to_string()),
            ("mil_lr", self.lr.to_string()),
            ("mil_weight_decay", self.weight_decay.to_string()),
            ("mil_epochs", self.epochs.to_string()),
            ("mil_patience", self.patience.to_string()),
            ("mil_bag_cap", self.bag_cap.to_string()),
            ("mil_folds", self.folds.to_string()),
            ("mil_seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("mil_dim must be a multiple of mil_heads");
        }
        if self.layers == 0 || self.epochs == 0 || self.bag_cap == 0 || self.mlp_ratio == 0 {
            return bad("mil layer count, epochs, bag cap and mlp ratio must be positive");
        }
        if self.folds < 2 {
            return bad("mil_folds must be at least 2");
        }
        if !(self.lr > 0.0) {
            return bad("mil_lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MilModel {
    input: Linear,
    cls: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl MilModel {
    pub fn new(config: &MilConfig, in_dim: usize, classes: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = store.scope(&mut rng);
        let input = Linear::new(&mut s.sub("input"), in_dim, config.dim, true)?;
        let cls = s.param("cls_token", &[1, 1, config.dim], Init::TruncNormal(INIT_STD))?;
        let blocks = (0..config.layers)
            .map(|i| {
                Block::new(
                    &mut s.sub(format!("block{i}")),
                    config.dim,
                    config.heads,
                    config.mlp_ratio,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut s.sub("norm"), config.dim)?;
        let head = Linear::new(&mut s.sub("head"), config.dim, classes, true)?;
        Ok(Self {
            input,
            cls,
            blocks,
            norm,
            head,
        })
    }

    /// Class logits `(K,)` for an `(n, D)` bag.
    pub fn forward(&self, bag: &Tensor) -> Result<Tensor> {
        let x = self.input.forward(bag)?.relu()?.unsqueeze(0)?;
        let mut x = Tensor::cat(&[&self.cls.to_dtype(x.dtype())?, &x], 1)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let token = self.norm.forward(&x)?.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(self.head.forward(&token)?.squeeze(0)?)
    }
}

fn bag_tensor(rows: Vec<f32>, dim: usize) -> Result<Tensor> {
    let n = rows.len() / dim;
    Ok(Tensor::from_vec(rows, (n, dim), &Device::Cpu)?)
}

/// `−log softmax(logits)[label]` as a scalar tensor.
fn cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor> {
    let max = logits.max(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_all()?.log()?;
    Ok((lse - shifted.get(label)?)?)
}

fn softmax(logits: &Tensor) -> Result<Vec<f64>> {
    let v = logits.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Inverse-frequency class weights `n / (K_present · n_c)`; absent classes get 0.
pub fn class_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                labels.len() as f64 / (present * c) as f64
            }
        })
        .collect()
}

/// One fold's trained aggregator and its validation outputs.
#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub fold_index: usize,
    pub config: MilConfig,
    pub in_dim: usize,
    pub classes: usize,
    pub params: ParamStore,
    pub model: MilModel,
    pub best_epoch: usize,
    pub val_losses: Vec<f64>,
    pub val_slides: Vec<String>,
    pub val_labels: Vec<usize>,
    pub val_scores: Vec<Vec<f64>>,
}

impl TrainedFold {
    pub fn score(&self, bag: &Bag) -> Result<Vec<f64>> {
        if bag.dim != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: bag.dim,
            });
        }
        softmax(&self.model.forward(&bag_tensor(bag.features.clone(), bag.dim)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.config.to_kv_string();
        text.push_str(&render(&[
            ("in_dim", self.in_dim.to_string()),
            ("classes", self.classes.to_string()),
            ("fold", self.fold_index.to_string()),
            ("best_epoch", self.best_epoch.to_string()),
        ]));
        let mut ck = Checkpoint::new(text);
        ck.put_store(QUERY, &self.params)?;
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut kv = KvFile::parse(&path.display().to_string(), &ck.config_text)?;
        let config = MilConfig::take_from(&mut kv)?;
        let need = |v: Option<usize>, k: &str| v.ok_or_else(|| Error::Config(format!("model file lacks `{k}`")));
        let in_dim = need(kv.take("in_dim")?, "in_dim")?;
        let classes = need(kv.take("classes")?, "classes")?;
        let fold_index = need(kv.take("fold")?, "fold")?;
        let best_epoch = need(kv.take("best_epoch")?, "best_epoch")?;
        kv.finish()?;
        let mut params = ParamStore::new(DType::F32);
        let model = MilModel::new(&config, in_dim, classes, &mut params, 0)?;
        ck.load_store(QUERY, &params)?;
        Ok(Self {
            fold_index,
            config,
            in_dim,
            classes,
            params,
            model,
            best_epoch,
            val_losses: Vec::new(),
            val_slides: Vec::new(),
            val_labels: Vec::new(),
            val_scores: Vec::new(),
        })
    }
}

fn snapshot(params: &ParamStore) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(String::new());
    ck.put_store(QUERY, params)?;
    Ok(ck)
}

/// Trains one aggregator with early stopping on the class-weighted validation loss.
pub fn train_fold(
    config: &MilConfig,
    train: &[&Bag],
    val: &[&Bag],
    classes: usize,
    fold_index: usize,
) -> Result<TrainedFold> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Data(format!("fold {fold_index} has no training bags")))?;
    let in_dim = first.dim;
    if let Some(b) = train.iter().chain(val).find(|b| b.dim != in_dim) {
        return Err(Error::DimensionMismatch {
            expected: in_dim,
            got: b.dim,
        });
    }
    let seed = config.seed.wrapping_add(fold_index as u64);
    let mut params = ParamStore::new(DType::F32);
    let model = MilModel::new(config, in_dim, classes, &mut params, seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let weights = class_weights(&train.iter().map(|b| b.label).collect::<Vec<_>>(), classes);

    let weighted_loss = |bags: &[&Bag]| -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for b in bags {
            let logits = model.forward(&bag_tensor(b.features.clone(), b.dim)?)?;
            let ce = cross_entropy(&logits, b.label)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            let w = weights.get(b.label).copied().unwrap_or(0.0).max(1e-12);
            num += w * ce;
            den += w;
        }
        Ok(num / den)
    };

    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_state = snapshot(&params)?;
    let mut since_best = 0;
    let mut val_losses = Vec::new();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, Stream::Order, epoch, fold_index));
        for (pos, &i) in order.iter().enumerate() {
            let b = train[i];
            let rows = if b.n > config.bag_cap {
                let idx: Vec<usize> = (0..b.n).collect();
                let mut rng = rng_for(seed, Stream::Subset, epoch, pos);
                let mut pick: Vec<usize> = idx.choose_multiple(&mut rng, config.bag_cap).copied().collect();
                pick.sort_unstable();
                b.rows(&pick)
            } else {
                b.features.clone()
            };
            let logits = model.forward(&bag_tensor(rows, b.dim)?)?;
            let loss = (cross_entropy(&logits, b.label)? * weights[b.label])?;
            let grads = loss.backward()?;
            opt.step(&params, &grads, config.lr)?;
        }
        let monitored = if val.is_empty() {
            weighted_loss(train)?
        } else {
            weighted_loss(val)?
        };
        val_losses.push(monitored);
        if monitored < best {
            best = monitored;
            best_epoch = epoch;
            best_state = snapshot(&params)?;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    best_state.load_store(QUERY, &params)?;
    let mut fold = TrainedFold {
        fold_index,
        config: config.clone(),
        in_dim,
        classes,
        params,
        model,
        best_epoch,
        val_losses,
        val_slides: val.iter().map(|b| b.slide_id.clone()).collect(),
        val_labels: val.iter().map(|b| b.label).collect(),
        val_scores: Vec::new(),
    };
    fold.val_scores = val.iter().map(|b| fold.score(b)).collect::<Result<_>>()?;
    Ok(fold)
}

/// One aggregator per fold.
pub fn train_mil(config: &MilConfig, bags: &[Bag], folds: &[FoldSplit], classes: usize) -> Result<Vec<TrainedFold>> {
    folds
        .iter()
        .map(|f| {
            let (train, val) = split_bags(bags, f);
            log::info!(
                "MIL fold {}: {} train / {} val bags",
                f.fold_index,
                train.len(),
                val.len()
            );
            train_fold(config, &train, &val, classes, f.fold_index)
        })
        .collect()
}

/// Mean validation metric across folds (folds with a single class are skipped).
pub fn cross_val_metric(folds: &[TrainedFold], metric: Metric) -> Option<f64> {
    let vals: Vec<f64> = folds
        .iter()
        .filter_map(|f| multiclass_metric(metric, &f.val_scores, &f.val_labels).ok())
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct Deployment {
    pub slide_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub folds: Vec<usize>,
    /// `[model][bag][class]`.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub per_model: BTreeMap<Metric, Vec<f64>>,
    /// Mean of the per-model metrics.
    pub mean: BTreeMap<Metric, f64>,
    /// Class scores averaged over models.
    pub ensemble: Vec<Vec<f64>>,
}

/// Scores every external bag with every model and averages the per-model metrics.
pub fn deploy_external(models: &[TrainedFold], bags: &[Bag]) -> Result<Deployment> {
    if bags.is_empty() {
        return Err(Error::EmptyResult);
    }
    if models.is_empty() {
        return Err(Error::Data("no models to deploy".into()));
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let scores: Vec<Vec<Vec<f64>>> = models
        .iter()
        .map(|m| bags.iter().map(|b| m.score(b)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut per_model = BTreeMap::new();
    let mut mean = BTreeMap::new();
    for metric in Metric::ALL {
        let vals = scores
            .iter()
            .map(|s| multiclass_metric(metric, s, &labels))
            .collect::<Result<Vec<f64>>>()?;
        mean.insert(metric, vals.iter().sum::<f64>() / vals.len() as f64);
        per_model.insert(metric, vals);
    }
    let k = scores[0][0].len();
    let ensemble = (0..bags.len())
        .map(|i| {
            (0..k)
                .map(|c| scores.iter().map(|s| s[i][c]).sum::<f64>() / scores.len() as f64)
                .collect()
        })
        .collect();
    Ok(Deployment {
        slide_ids: bags.iter().map(|b| b.slide_id.clone()).collect(),
        labels,
        folds: models.iter().map(|m| m.fold_index).collect(),
        scores,
        per_model,
        mean,
        ensemble,
    })
}

/// Writes `scores.csv`, `labels.csv` and `metrics.csv` into `dir`.
pub fn write_deployment(dir: &Path, dep: &Deployment) -> Result<()> {
    let k = dep.scores[0][0].len();
    let mut s = String::from("slide_id,fold");
    for c in 0..k {
        let _ = write!(s, ",score_class_{c}");
    }
    s.push('\n');
    for (m, fold) in dep.folds.iter().enumerate() {
        for (i, id) in dep.slide_ids.iter().enumerate() {
            let _ = write!(s, "{id},{fold}");
            for v in &dep.scores[m][i] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    write(&dir.join(SCORES_CSV), s)?;
    let mut l = String::from("slide_id,label\n");
    for (id, y) in dep.slide_ids.iter().zip(&dep.labels) {
        let _ = writeln!(l, "{id},{y}");
    }
    write(&dir.join(LABELS_CSV), l)?;
    let mut mcsv = String::from("metric,mean");
    for f in &dep.folds {
        let _ = write!(mcsv, ",fold_{f}");
    }
    mcsv.push('\n');
    for (metric, vals) in &dep.per_model {
        let _ = write!(mcsv, "{},{}", metric.name(), dep.mean[metric]);
        for v in vals {
            let _ = write!(mcsv, ",{v}");
        }
        mcsv.push('\n');
    }
    write(&dir.join(METRICS_CSV), mcsv)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Rows of a score matrix: `fold → slide_id → class scores`.
pub fn read_scores(path: &Path) -> Result<BTreeMap<usize, BTreeMap<String, Vec<f64>>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<usize, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(parse_err(path, i + 1, "expected slide_id,fold and at least two scores"));
        }
        let fold = f[1].parse().map_err(|_| parse_err(path, i + 1, "bad fold"))?;
        let scores = f[2..]
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("bad score `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.entry(fold).or_default().insert(f[0].to_string(), scores);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
        let (id, y) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, i + 1, "expected slide_id,label"))?;
        out.insert(
            id.to_string(),
            y.parse().map_err(|_| parse_err(path, i + 1, "bad label"))?,
        );
    }
    Ok(out)
}

/// Mean-over-models metrics recomputed from a deployment directory's CSV files.
pub fn recompute_metrics(dir: &Path) -> Result<BTreeMap<Metric, f64>> {
    let scores = read_scores(&dir.join(SCORES_CSV))?;
    let labels = read_labels(&dir.join(LABELS_CSV))?;
    if scores.is_empty() {
        return Err(Error::EmptyResult);
    }
    let mut out = BTreeMap::new();
    for metric in Metric::ALL {
        let mut sum = 0.0;
        for rows in scores.values() {
            let mut s = Vec::with_capacity(rows.len());
            let mut y = Vec::with_capacity(rows.len());
            for (id, r) in rows {
                s.push(r.clone());
                y.push(
                    *labels
                        .get(id)
                        .ok_or_else(|| Error::Data(format!("no label for {id}")))?,
                );
            }
            sum += multiclass_metric(metric, &s, &y)?;
        }
        out.insert(metric, sum / scores.len() as f64);
    }
    Ok(out)
}

/// `fold{k}.ckpt` per model plus `folds.tsv` and per-fold validation scores.
pub fn save_models(dir: &Path, models: &[TrainedFold], folds: &[FoldSplit]) -> Result<()> {
    for m in models {
        m.save(&dir.join(format!("fold{}.ckpt", m.fold_index)))?;
    }
    let mut f = String::from("fold\trole\tpatient_id\n");
    for split in folds {
        for p in &split.train_patients {
            let _ = writeln!(f, "{}\ttrain\t{p}", split.fold_index);
        }
        for p in &split.val_patients {
            let _ = writeln!(f, "{}\tval\t{p}", split.fold_index);
        }
    }
    write(&dir.join("folds.tsv"), f)?;
    let mut v = String::from("slide_id,fold,label,scores\n");
    for m in models {
        for ((id, y), s) in m.val_slides.iter().zip(&m.val_labels).zip(&m.val_scores) {
            let joined: Vec<String> = s.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(v, "{id},{},{y},{}", m.fold_index, joined.join(";"));
        }
    }
    write(&dir.join("cv_scores.csv"), v)
}

/// Every `fold*.ckpt` in a directory, ordered by fold index.
pub fn load_models(dir: &Path) -> Result<Vec<TrainedFold>> {
    let mut models = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("fold") && name.ends_with(".ckpt") {
            models.push(TrainedFold::load(&p)?);
        }
    }
    if models.is_empty() {
        return Err(Error::Data(format!("no fold models in {}", dir.display())));
    }
    models.sort_by_key(|m| m.fold_index);
    Ok(models)
}
