//! The harmonization objective and a desk-scale SGD trainer.
//!
//! For a batch with human maps `phi`, the loss is
//!
//! ```text
//! lambda1 * sum_i || z(P_i(saliency))+ - z(P_i(phi))+ ||_2  +  CCE  +  lambda2 * sum theta^2
//! ```
//!
//! where `P_i` is pyramid level `i`, `z` standardizes a map to zero mean and
//! unit (population) standard deviation and `+` keeps the positive part.
//! The alignment norm is per sample and averaged over the batch; samples
//! without a usable human map contribute only cross entropy and decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Graph, GraphError, Model, NodeId, ParamNodes, Tensor};
use crate::explain::{self, ExplainError, ImportanceMap};
use crate::metrics;
use crate::pyramid::{self, PyramidError};
use crate::seeding;

/// Relative floor on the standard deviation in `z`.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum HarmonizeError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sample {id}: {message}")]
    Sample { id: String, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss")]
    NonFinite,
    #[error("training diverged at epoch {epoch} step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<Model>,
        history: Vec<EpochRecord>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizeConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub pyramid_levels: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch: usize,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    /// Random left-right flips of image and map together.
    pub hflip: bool,
    /// Rescales each step's gradient to this global L2 norm when it is
    /// larger; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1e-4,
            pyramid_levels: pyramid::DEFAULT_LEVELS,
            lr: 0.05,
            momentum: 0.9,
            epochs: 10,
            warmup_epochs: 1,
            batch: 32,
            label_smoothing: 0.1,
            mixup_alpha: 0.2,
            hflip: true,
            clip_norm: 0.0,
            seed: 0,
        }
    }
}

impl HarmonizeConfig {
    /// Settings for the 32x32 synthetic task. Flips and mixup are off
    /// because labels are coded by patch location.
    pub fn desk(lambda1: f64, seed: u64) -> Self {
        Self {
            lambda1,
            epochs: 24,
            warmup_epochs: 3,
            batch: 16,
            mixup_alpha: 0.0,
            hflip: false,
            clip_norm: 10.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarmonizeError> {
        let bad = |m: &str| Err(HarmonizeError::Config(m.to_string()));
        let reals = [
            self.lambda1,
            self.lambda2,
            self.lr,
            self.momentum,
            self.label_smoothing,
            self.mixup_alpha,
            self.clip_norm,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return bad("all real fields must be finite");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("lambda1 and lambda2 must be >= 0");
        }
        if self.lr < 0.0 || self.momentum < 0.0 {
            return bad("lr and momentum must be >= 0");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be >= 0");
        }
        if self.mixup_alpha < 0.0 {
            return bad("mixup_alpha must be >= 0");
        }
        if self.epochs < self.warmup_epochs {
            return bad("epochs must be >= warmup_epochs");
        }
        if self.batch == 0 || self.pyramid_levels == 0 {
            return bad("batch and pyramid_levels must be >= 1");
        }
        Ok(())
    }

    /// Parses JSON, or `key = value` lines (`#` comments allowed).
    pub fn parse(text: &str) -> Result<Self, HarmonizeError> {
        let trimmed = text.trim_start();
        let cfg: Self = if trimmed.starts_with('{') {
            serde_json::from_str(text).map_err(|e| HarmonizeError::Config(e.to_string()))?
        } else {
            let mut obj = serde_json::Map::new();
            for (no, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| HarmonizeError::Config(format!("line {}: expected key=value", no + 1)))?;
                let v = v.trim();
                let value = serde_json::Value::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
                obj.insert(k.trim().to_string(), value);
            }
            serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| HarmonizeError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate at global `step`: linear warmup, then cosine decay to 0.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let t = (step - warm) as f64 / span;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One labeled training image `[C, H, W]` with an optional human map.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    pub human_map: Option<ImportanceMap>,
}

impl TrainSample {
    fn check(&self) -> Result<(), HarmonizeError> {
        let s = self.image.shape();
        if s.len() != 3 {
            return Err(HarmonizeError::Sample {
                id: self.id.clone(),
                message: format!("image must be [C, H, W], got {s:?}"),
            });
        }
        if let Some(m) = &self.human_map {
            if m.height() != s[1] || m.width() != s[2] {
                return Err(HarmonizeError::Sample {
                    id: self.id.clone(),
                    message: format!(
                        "map {}x{} does not match image {}x{}",
                        m.width(),
                        m.height(),
                        s[2],
                        s[1]
                    ),
                });
            }
        }
        Ok(())
    }

    /// Human map if present and not flagged empty.
    pub fn usable_map(&self) -> Option<&ImportanceMap> {
        self.human_map.as_ref().filter(|m| !m.is_empty())
    }
}

/// Standardized values `(v - mean) / (std + 1e-8 * max|v|)` before
/// rectification. The floor scales with the map, so the result does not
/// depend on the map's overall scale.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let denom = var.sqrt() + STD_EPS * peak;
    if denom == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / denom).collect()
}

/// `z(map)+`. Constant maps come back all zero, i.e. flagged empty.
pub fn standardize_rectify(map: &ImportanceMap) -> ImportanceMap {
    let z = standardize(map.values());
    ImportanceMap::from_signed(map.image_id.clone(), map.width(), map.height(), z)
        .expect("rectified standardized values are finite and non-negative")
}

/// `z(.)+` per sample of a `[batch, 1, h, w]` node.
pub fn standardize_rectify_node(g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
    let s = g.shape(x).to_vec();
    let per = vec![s[0], 1, 1, 1];
    let n = (s[1] * s[2] * s[3]) as f64;
    let sum = g.reduce_to(x, &per)?;
    let mean = g.scale(sum, 1.0 / n);
    let mean_b = g.broadcast_to(mean, &s)?;
    let dev = g.sub(x, mean_b)?;
    let sq = g.square(dev);
    let ss = g.reduce_to(sq, &per)?;
    let var = g.scale(ss, 1.0 / n);
    let std = g.sqrt(var);
    let mag = g.abs(x);
    let flat = g.reshape(mag, &[s[0], s[1] * s[2] * s[3]])?;
    let peak = g.max_along(flat, 1)?;
    let peak = g.reshape(peak, &per)?;
    let floor = g.scale(peak, STD_EPS);
    let denom = g.add(std, floor)?;
    let inv = g.recip(denom);
    let inv_b = g.broadcast_to(inv, &s)?;
    let z = g.mul(dev, inv_b)?;
    Ok(g.relu(z))
}

/// Precomputed `z(P_i(phi))+` for every level of one human map.
#[derive(Debug, Clone)]
pub struct HumanTarget {
    pub levels: Vec<ImportanceMap>,
}

impl HumanTarget {
    pub fn new(map: &ImportanceMap, levels: usize) -> Result<Self, PyramidError> {
        let p = pyramid::build_pyramid(map, levels)?;
        Ok(Self {
            levels: p.levels.iter().map(standardize_rectify).collect(),
        })
    }
}

/// Map-space alignment term for one pair: the sum over pyramid levels of the
/// L2 distance between standardized-rectified levels.
pub fn alignment_term(
    model_map: &ImportanceMap,
    human_map: &ImportanceMap,
    levels: usize,
) -> Result<f64, PyramidError> {
    let a = HumanTarget::new(model_map, levels)?;
    let b = HumanTarget::new(human_map, levels)?;
    Ok(a.levels
        .iter()
        .zip(&b.levels)
        .map(|(x, y)| {
            x.values()
                .iter()
                .zip(y.values())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}

/// Loss components as graph nodes so each can be read or differentiated.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: NodeId,
    pub cce: NodeId,
    /// Unweighted alignment term (before `lambda1`), if computed.
    pub align: Option<NodeId>,
    /// Weighted decay `lambda2 * sum theta^2`.
    pub wd: NodeId,
}

/// One assembled batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[batch, C, H, W]`.
    pub images: Tensor,
    /// Soft targets `[batch, classes]`.
    pub targets: Tensor,
    /// Class whose logit drives each sample's saliency.
    pub saliency_class: Vec<usize>,
    pub human: Vec<Option<HumanTarget>>,
}

impl Batch {
    /// Hard-label batch with optional label smoothing and no augmentation.
    pub fn from_samples(
        samples: &[&TrainSample],
        classes: usize,
        label_smoothing: f64,
        levels: usize,
    ) -> Result<Self, HarmonizeError> {
        let items: Vec<Mixed> = samples
            .iter()
            .map(|s| {
                Ok(Mixed {
                    image: s.image.values().to_vec(),
                    targets: smoothed(s.label, classes, label_smoothing),
                    saliency_class: s.label,
                    map: s.usable_map().cloned(),
                })
            })
            .collect::<Result<_, HarmonizeError>>()?;
        Self::assemble(items, samples[0].image.shape(), levels)
    }

    fn assemble(items: Vec<Mixed>, image_shape: &[usize], levels: usize) -> Result<Self, HarmonizeError> {
        let b = items.len();
        let classes = items[0].targets.len();
        let mut images = Vec::with_capacity(b * items[0].image.len());
        let mut targets = Vec::with_capacity(b * classes);
        let mut saliency_class = Vec::with_capacity(b);
        let mut human = Vec::with_capacity(b);
        for it in items {
            images.extend_from_slice(&it.image);
            targets.extend_from_slice(&it.targets);
            saliency_class.push(it.saliency_class);
            human.push(match it.map.filter(|m| !m.is_empty()) {
                Some(m) => Some(HumanTarget::new(&m, levels)?),
                None => None,
            });
        }
        let mut shape = vec![b];
        shape.extend_from_slice(image_shape);
        Ok(Self {
            images: Tensor::new(shape, images)?,
            targets: Tensor::new(vec![b, classes], targets)?,
            saliency_class,
            human,
        })
    }

    pub fn len(&self) -> usize {
        self.saliency_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saliency_class.is_empty()
    }

    pub fn has_maps(&self) -> bool {
        self.human.iter().any(Option::is_some)
    }
}

struct Mixed {
    image: Vec<f64>,
    targets: Vec<f64>,
    saliency_class: usize,
    map: Option<ImportanceMap>,
}

fn smoothed(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / classes as f64; classes];
    t[label] += 1.0 - eps;
    t
}

/// Mixes sample `a` with `b` using weight `w` on `a`. Maps mix with the same
/// weight; when only one side has a map it survives only at `w` of exactly
/// 1 or 0.
fn mix(a: &Mixed, b: &Mixed, w: f64) -> Mixed {
    let lerp = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| w * p + (1.0 - w) * q).collect() };
    let map = match (&a.map, &b.map) {
        (Some(x), Some(y)) => Some(x.mix(y, w)),
        (Some(x), None) if w == 1.0 => Some(x.clone()),
        (None, Some(y)) if w == 0.0 => Some(y.clone()),
        _ => None,
    };
    Mixed {
        image: lerp(&a.image, &b.image),
        targets: lerp(&a.targets, &b.targets),
        saliency_class: if w >= 0.5 { a.saliency_class } else { b.saliency_class },
        map,
    }
}

/// Builds the harmonization loss for a batch on `g`.
pub fn harmonization_loss(
    g: &mut Graph,
    model: &Model,
    params: &ParamNodes,
    batch: &Batch,
    cfg: &HarmonizeConfig,
) -> Result<LossParts, HarmonizeError> {
    let x = g.variable(batch.images.clone());
    let logits = model.forward(g, params, x)?;
    let t = g.constant(batch.targets.clone());
    let cce = g.softmax_cross_entropy(logits, t)?;

    let mut sq_terms = Vec::new();
    for (_, p) in params.iter() {
        let s = g.square(p);
        sq_terms.push(g.sum(s));
    }
    let mut sq = sq_terms[0];
    for &s in &sq_terms[1..] {
        sq = g.add(sq, s)?;
    }
    let wd = g.scale(sq, cfg.lambda2);
    let mut total = g.add(cce, wd)?;

    let mut align = None;
    if cfg.lambda1 != 0.0 && batch.has_maps() {
        let a = align_node(g, x, logits, batch, cfg.pyramid_levels)?;
        let weighted = g.scale(a, cfg.lambda1);
        total = g.add(total, weighted)?;
        align = Some(a);
    }
    if !g.value(total).is_finite() {
        return Err(HarmonizeError::NonFinite);
    }
    Ok(LossParts { total, cce, align, wd })
}

fn align_node(
    g: &mut Graph,
    x: NodeId,
    logits: NodeId,
    batch: &Batch,
    levels: usize,
) -> Result<NodeId, HarmonizeError> {
    let b = batch.len();
    let sal = explain::saliency_from_logits(g, x, logits, &batch.saliency_class)?;

    let mask: Vec<f64> = batch
        .human
        .iter()
        .map(|h| if h.is_some() { 1.0 } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::new(vec![b, 1, 1, 1], mask)?);
    let model_levels = pyramid::pyramid_nodes(g, sal, levels)?;
    let mut acc: Option<NodeId> = None;
    for (li, &lvl) in model_levels.iter().enumerate() {
        let s = g.shape(lvl).to_vec();
        let per = s[2] * s[3];
        let mut hv = vec![0.0; b * per];
        for (i, h) in batch.human.iter().enumerate() {
            if let Some(h) = h {
                hv[i * per..(i + 1) * per].copy_from_slice(h.levels[li].values());
            }
        }
        let human = g.constant(Tensor::new(s.clone(), hv)?);
        let zm = standardize_rectify_node(g, lvl)?;
        let diff = g.sub(zm, human)?;
        let sq = g.square(diff);
        let per_sample = g.reduce_to(sq, &[b, 1, 1, 1])?;
        let norm = g.sqrt(per_sample);
        let masked = g.mul(norm, mask)?;
        let s = g.sum(masked);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let total = acc.expect("at least one pyramid level");
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Scalar readout of a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cce: f64,
    pub align: f64,
    pub wd: f64,
}

pub fn evaluate_loss(model: &Model, batch: &Batch, cfg: &HarmonizeConfig) -> Result<LossValues, HarmonizeError> {
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let parts = harmonization_loss(&mut g, model, &p, batch, cfg)?;
    Ok(LossValues {
        total: g.item(parts.total),
        cce: g.item(parts.cce),
        align: parts.align.map(|a| g.item(a)).unwrap_or(0.0),
        wd: g.item(parts.wd),
    })
}

/// Loss and gradients with respect to every parameter (name order).
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    cfg: &HarmonizeConfig,
) -> Result<(LossValues, BTreeMap<String, Tensor>), HarmonizeError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let parts = harmonization_loss(&mut g, model, &p, batch, cfg)?;
    let ids = p.ids();
    let grads = g.grad(parts.total, &ids)?;
    let values = LossValues {
        total: g.item(parts.total),
        cce: g.item(parts.cce),
        align: parts.align.map(|a| g.item(a)).unwrap_or(0.0),
        wd: g.item(parts.wd),
    };
    let mut out = BTreeMap::new();
    for ((name, _), gid) in p.iter().zip(grads) {
        let gv = g.value(gid).clone();
        if !gv.is_finite() {
            return Err(HarmonizeError::NonFinite);
        }
        out.insert(name.to_string(), gv);
    }
    Ok((values, out))
}

/// `lambda1` that makes the weighted alignment term equal the cross entropy
/// on `batch` at the current parameters.
pub fn calibrate_lambda1(model: &Model, batch: &Batch, cfg: &HarmonizeConfig) -> Result<f64, HarmonizeError> {
    let probe = HarmonizeConfig {
        lambda1: 1.0,
        ..cfg.clone()
    };
    let v = evaluate_loss(model, batch, &probe)?;
    if v.align <= 0.0 {
        return Err(HarmonizeError::Config(
            "alignment term is zero on the calibration batch".into(),
        ));
    }
    Ok(v.cce / v.align)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cce: f64,
    pub align_term: f64,
    pub wd: f64,
    pub top1: f64,
    pub val_alignment: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,cce,align_term,wd,top1,val_alignment\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.cce, r.align_term, r.wd, r.top1, r.val_alignment
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Top-1 accuracy of `model` on `samples`.
pub fn accuracy(model: &Model, samples: &[TrainSample]) -> Result<f64, HarmonizeError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in samples.chunks(64) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, model.classes(), 0.0, 1)?;
        let logits = model.logits(&batch.images)?;
        let c = model.classes();
        for (i, s) in chunk.iter().enumerate() {
            let row = &logits.values()[i * c..(i + 1) * c];
            if crate::decisions::argmax(row) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Saliency maps (ground-truth class) for `samples`.
pub fn saliency_maps(model: &Model, samples: &[TrainSample]) -> Result<Vec<ImportanceMap>, HarmonizeError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, model.classes(), 0.0, 1)?;
        let ids: Vec<String> = chunk.iter().map(|s| s.id.clone()).collect();
        out.extend(explain::saliency_batch(
            model,
            &batch.images,
            &batch.saliency_class,
            &ids,
        )?);
    }
    Ok(out)
}

/// Mean raw rank correlation between model saliency and human maps over the
/// samples that have one.
pub fn mean_alignment(model: &Model, samples: &[TrainSample]) -> Result<f64, HarmonizeError> {
    let with: Vec<TrainSample> = samples.iter().filter(|s| s.usable_map().is_some()).cloned().collect();
    if with.is_empty() {
        return Ok(0.0);
    }
    let maps = saliency_maps(model, &with)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (s, m) in with.iter().zip(&maps) {
        if let Ok(r) = metrics::spearman(s.usable_map().unwrap().values(), m.values()) {
            sum += r;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn flip_image(image: &[f64], shape: &[usize]) -> Vec<f64> {
    let w = shape[2];
    let mut out = image.to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    out
}

/// SGD with momentum under a warmup + cosine schedule. `val` is used for the
/// per-epoch accuracy and alignment columns (the training set is used when
/// it is empty).
pub fn fit(
    model: &Model,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &HarmonizeConfig,
) -> Result<FitOutcome, HarmonizeError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HarmonizeError::EmptyDataset);
    }
    for s in train.iter().chain(val) {
        s.check()?;
        if s.label >= model.classes() {
            return Err(HarmonizeError::Sample {
                id: s.id.clone(),
                message: format!("label {} out of range", s.label),
            });
        }
    }
    let classes = model.classes();
    let eval_set = if val.is_empty() { train } else { val };
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let mut rng = seeding::root(cfg.seed);
    let beta = if cfg.mixup_alpha > 0.0 {
        Some(Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| HarmonizeError::Config(e.to_string()))?)
    } else {
        None
    };

    let mut current = model.clone();
    let mut velocity: BTreeMap<String, Vec<f64>> = current
        .params
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
        .collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut cce_sum, mut align_sum, mut wd_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let mut items: Vec<Mixed> = idx
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let flip = cfg.hflip && rng.random_bool(0.5);
                    let image = if flip {
                        flip_image(s.image.values(), s.image.shape())
                    } else {
                        s.image.values().to_vec()
                    };
                    let map = s
                        .usable_map()
                        .map(|m| if flip { m.flipped_horizontal() } else { m.clone() });
                    Mixed {
                        image,
                        targets: smoothed(s.label, classes, cfg.label_smoothing),
                        saliency_class: s.label,
                        map,
                    }
                })
                .collect();
            if let Some(beta) = &beta {
                let w = beta.sample(&mut rng);
                let mut partner: Vec<usize> = (0..items.len()).collect();
                partner.shuffle(&mut rng);
                items = (0..items.len())
                    .map(|i| mix(&items[i], &items[partner[i]], w))
                    .collect();
            }
            let batch = Batch::assemble(items, train[0].image.shape(), cfg.pyramid_levels)?;
            let (values, grads) = match loss_and_grads(&current, &batch, cfg) {
                Ok(v) => v,
                Err(HarmonizeError::NonFinite) => {
                    return Err(HarmonizeError::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(current),
                        history,
                    })
                }
                Err(e) => return Err(e),
            };
            let lr = cfg.lr_at(step, steps_per_epoch);
            let norm = grads
                .values()
                .flat_map(|t| t.values())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let gain = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                cfg.clip_norm / norm
            } else {
                1.0
            };
            let mut next = current.clone();
            for (name, t) in next.params.iter_mut() {
                let v = velocity.get_mut(name).expect("velocity per parameter");
                let gr = grads[name].values();
                let mut vals = t.values().to_vec();
                for ((p, vel), gv) in vals.iter_mut().zip(v.iter_mut()).zip(gr) {
                    *vel = cfg.momentum * *vel + gain * gv;
                    *p -= lr * *vel;
                }
                *t = Tensor::new(t.shape().to_vec(), vals).map_err(|_| HarmonizeError::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(current.clone()),
                    history: history.clone(),
                })?;
            }
            current = next;
            cce_sum += values.cce;
            align_sum += values.align;
            wd_sum += values.wd;
            batches += 1;
            step += 1;
        }
        let nb = batches as f64;
        history.push(EpochRecord {
            epoch: epoch + 1,
            cce: cce_sum / nb,
            align_term: align_sum / nb,
            wd: wd_sum / nb,
            top1: accuracy(&current, eval_set)?,
            val_alignment: mean_alignment(&current, eval_set)?,
        });
    }
    Ok(FitOutcome {
        model: current,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Architecture;

    #[test]
    fn standardize_small_example() {
        let m = ImportanceMap::new("a", 2, 1, vec![1.0, 3.0]).unwrap();
        let z = standardize(m.values());
        assert!((z[0] + 1.0).abs() < 1e-7 && (z[1] - 1.0).abs() < 1e-7);
        let r = standardize_rectify(&m);
        assert_eq!(r.values()[0], 0.0);
        assert!((r.values()[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn constant_map_rectifies_to_empty() {
        let m = ImportanceMap::new("c", 3, 3, vec![2.0; 9]).unwrap();
        let r = standardize_rectify(&m);
        assert!(r.is_empty());
        let z = ImportanceMap::zeros("z", 4, 4);
        assert!(standardize_rectify(&z).is_empty());
    }

    #[test]
    fn random_map_standardizes() {
        let mut rng = seeding::root(5);
        let v: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let z = standardize(&v);
        let mean = z.iter().sum::<f64>() / 64.0;
        let std = (z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0).sqrt();
        assert!(mean.abs() <= 1e-9);
        assert!((std - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn graph_standardize_matches_map_version() {
        let mut rng = seeding::root(9);
        let v: Vec<f64> = (0..2 * 12).map(|_| rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 3, 4], v.clone()).unwrap());
        let z = standardize_rectify_node(&mut g, x).unwrap();
        for b in 0..2 {
            let m = ImportanceMap::new("m", 4, 3, v[b * 12..(b + 1) * 12].to_vec()).unwrap();
            let r = standardize_rectify(&m);
            for (p, q) in g.value(z).values()[b * 12..(b + 1) * 12].iter().zip(r.values()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_parsing() {
        let c = HarmonizeConfig::parse("lambda1 = 2.5\nepochs=4 # short\nhflip=false\n").unwrap();
        assert_eq!(c.lambda1, 2.5);
        assert_eq!(c.epochs, 4);
        assert!(!c.hflip);
        let j = HarmonizeConfig::parse(r#"{"lambda2": 0.01, "batch": 8}"#).unwrap();
        assert_eq!(j.lambda2, 0.01);
        assert_eq!(j.batch, 8);
        assert!(HarmonizeConfig::parse("epochs=1\nwarmup_epochs=3").is_err());
        assert!(HarmonizeConfig::parse("label_smoothing=1.0").is_err());
        assert!(HarmonizeConfig::parse("bogus line").is_err());
    }

    #[test]
    fn schedule_warmup_then_cosine() {
        let c = HarmonizeConfig {
            lr: 1.0,
            epochs: 4,
            warmup_epochs: 1,
            ..Default::default()
        };
        assert!((c.lr_at(0, 2) - 0.5).abs() < 1e-15);
        assert!((c.lr_at(1, 2) - 1.0).abs() < 1e-15);
        assert!((c.lr_at(2, 2) - 1.0).abs() < 1e-15);
        assert!(c.lr_at(7, 2) < 0.1);
        let nowarm = HarmonizeConfig { warmup_epochs: 0, ..c };
        assert_eq!(nowarm.lr_at(0, 2), 1.0);
    }

    #[test]
    fn mixup_weight_one_is_identity() {
        let a = Mixed {
            image: vec![1.0, 2.0],
            targets: vec![0.9, 0.1],
            saliency_class: 0,
            map: Some(ImportanceMap::new("a", 2, 1, vec![0.5, 1.0]).unwrap()),
        };
        let b = Mixed {
            image: vec![-3.0, 7.0],
            targets: vec![0.1, 0.9],
            saliency_class: 1,
            map: None,
        };
        let m = mix(&a, &b, 1.0);
        assert_eq!(m.image, a.image);
        assert_eq!(m.targets, a.targets);
        assert_eq!(m.saliency_class, 0);
        assert_eq!(m.map, a.map);
        assert!(mix(&a, &b, 0.5).map.is_none());
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = seeding::root(seed);
        (0..n)
            .map(|i| {
                let label = i % 3;
                let mut img: Vec<f64> = (0..36).map(|_| rng.random::<f64>() * 0.1).collect();
                img[label * 12 + 7] += 1.0;
                let mut mv = vec![0.0; 36];
                mv[label * 12 + 7] = 1.0;
                mv[label * 12 + 8] = 0.5;
                TrainSample {
                    id: format!("s{i}"),
                    image: Tensor::new(vec![1, 6, 6], img).unwrap(),
                    label,
                    human_map: Some(ImportanceMap::new(format!("s{i}"), 6, 6, mv).unwrap()),
                }
            })
            .collect()
    }

    #[test]
    fn lambda1_zero_ignores_maps() {
        let model = Model::init(Architecture::toy_convnet(1, 6, 2, 3), 3).unwrap();
        let s = toy_samples(4, 1);
        let refs: Vec<&TrainSample> = s.iter().collect();
        let batch = Batch::from_samples(&refs, 3, 0.0, 2).unwrap();
        let cfg = HarmonizeConfig {
            lambda1: 0.0,
            ..Default::default()
        };
        let v = evaluate_loss(&model, &batch, &cfg).unwrap();
        assert_eq!(v.align, 0.0);
        assert!((v.total - v.cce - 1e-4 * model.squared_norm()).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_leaves_params_unchanged() {
        let model = Model::init(Architecture::toy_convnet(1, 6, 2, 3), 3).unwrap();
        let s = toy_samples(6, 2);
        let cfg = HarmonizeConfig {
            lr: 0.0,
            epochs: 2,
            warmup_epochs: 1,
            batch: 4,
            pyramid_levels: 2,
            ..Default::default()
        };
        let out = fit(&model, &s, &[], &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.history.len(), 2);
        assert!(fit(&model, &[], &[], &cfg).is_err());
    }
}
