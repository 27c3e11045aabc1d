//! Geometric RoI features and small gradient-trained heads.
//!
//! A feature is the delta from the RoI to its best-matching GT, plus noise, plus that
//! GT's appearance vector. Extraction depends on the box it is evaluated at, so moving
//! an RoI changes its feature: the premise behind re-extracting features at the refined
//! box before predicting IoU.
//!
//! Heads are one-hidden-layer tanh perceptrons trained with plain SGD on mini-batch
//! means. The regressor outputs four deltas; the IoU predictor outputs one sigmoid value.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{encode_unchecked, BBox, Deltas};
use crate::error::{Error, Result};
use crate::loss::smooth_l1;
use crate::rng::{derive_seed, seeded};
use crate::rpn_sim::{sigmoid, Scene};
use crate::sampler::{IntervalConfig, LabeledSample};

/// Noise level and seed for feature extraction. Noise is a deterministic function of
/// `(seed, scene, box)`, so extracting twice at the same box yields the same vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureExtractor {
    pub sigma_feat: f64,
    pub seed: u64,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self {
            sigma_feat: 0.04,
            seed: 0,
        }
    }
}

/// Deltas are an order of magnitude smaller than the unit-variance appearance inputs.
pub const GEOMETRIC_INPUT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub geometric: [f64; 4],
    pub appearance: Vec<f64>,
    pub gt_index: usize,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        4 + self.appearance.len()
    }

    /// Network input: scaled geometric part followed by appearance.
    pub fn input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(self.geometric.iter().map(|g| g * GEOMETRIC_INPUT_SCALE));
        v.extend_from_slice(&self.appearance);
        v
    }
}

impl FeatureExtractor {
    pub fn new(sigma_feat: f64, seed: u64) -> Self {
        Self { sigma_feat, seed }
    }

    pub fn featurize(&self, b: &BBox, scene: &Scene) -> Result<FeatureVector> {
        b.validate()?;
        let (gi, _) = scene.best_match(b).ok_or(Error::Unmatched(*b))?;
        let gt = &scene.gts[gi];
        let mut geometric = encode_unchecked(b, &gt.bbox).to_array();
        if self.sigma_feat > 0.0 {
            let key = [b.cx, b.cy, b.w, b.h]
                .iter()
                .fold(derive_seed(self.seed, scene.id), |acc, v| derive_seed(acc, v.to_bits()));
            let mut rng = seeded(key);
            for g in &mut geometric {
                let z: f64 = StandardNormal.sample(&mut rng);
                *g += self.sigma_feat * z;
            }
        }
        Ok(FeatureVector {
            geometric,
            appearance: gt.appearance.clone(),
            gt_index: gi,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regressor,
    IouPredictor,
}

impl HeadKind {
    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::Regressor => 4,
            HeadKind::IouPredictor => 1,
        }
    }
}

/// `out = W2 tanh(W1 x + b1) + b2`, with a sigmoid on top for the IoU predictor.
/// Weight matrices are row-major, `w1` is `hidden x input_dim`, `w2` is `output_dim x hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// A featurized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: f64,
    pub interval: usize,
}

impl HeadModel {
    /// Hidden weights ~ N(0, 1/input_dim), output weights ~ N(0, out_std^2), biases zero.
    pub fn init<R: Rng + ?Sized>(kind: HeadKind, input_dim: usize, hidden: usize, out_std: f64, rng: &mut R) -> Self {
        let out = kind.output_dim();
        let hid = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("finite std");
        let head = Normal::new(0.0, out_std).expect("finite std");
        Self {
            kind,
            input_dim,
            hidden,
            w1: (0..hidden * input_dim).map(|_| hid.sample(rng)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..out * hidden).map(|_| head.sample(rng)).collect(),
            b2: vec![0.0; out],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.kind.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        self.params_mut().nth(i).expect("parameter index in range")
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    /// Pre-activation hidden pass, returns `tanh` activations and raw outputs `z`.
    fn pass(&self, x: &[f64], h: &mut [f64], z: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim);
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let a: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j];
            *hj = a.tanh();
        }
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            *zk = row.iter().zip(h.iter()).map(|(w, v)| w * v).sum::<f64>() + self.b2[k];
        }
    }

    /// Model outputs for input `x` (sigmoid applied for the IoU predictor).
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        let mut z = vec![0.0; self.output_dim()];
        self.pass(x, &mut h, &mut z);
        if self.kind == HeadKind::IouPredictor {
            z[0] = sigmoid(z[0]);
        }
        z
    }

    pub fn predict_deltas(&self, f: &FeatureVector) -> Deltas {
        debug_assert_eq!(self.kind, HeadKind::Regressor);
        Deltas::from_slice(&self.forward(&f.input()))
    }

    pub fn predict_iou(&self, f: &FeatureVector) -> f64 {
        debug_assert_eq!(self.kind, HeadKind::IouPredictor);
        self.forward(&f.input())[0]
    }

    /// Weighted mean smooth-L1 over `batch`, `sum(w * L) / sum(w)`; accumulates its
    /// gradient into `grad` (same layout as [`HeadModel::flat_params`]) when given.
    /// Normalizing by the weight sum keeps the step size independent of the weights.
    pub fn batch_loss<B: Borrow<Example>>(&self, batch: &[B], beta: f64, mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let weight_sum: f64 = batch.iter().map(|e| e.borrow().weight).sum();
        if !(weight_sum > 0.0) {
            return 0.0;
        }
        let inv_n = 1.0 / weight_sum;
        let (n_w1, n_b1, n_w2) = (self.w1.len(), self.b1.len(), self.w2.len());
        let mut h = vec![0.0; self.hidden];
        let mut z = vec![0.0; self.output_dim()];
        let mut dz = vec![0.0; self.output_dim()];
        let mut dh = vec![0.0; self.hidden];
        let mut total = 0.0;
        for ex in batch {
            let ex = ex.borrow();
            self.pass(&ex.input, &mut h, &mut z);
            for k in 0..z.len() {
                let (out, dout_dz) = match self.kind {
                    HeadKind::Regressor => (z[k], 1.0),
                    HeadKind::IouPredictor => {
                        let p = sigmoid(z[k]);
                        (p, p * (1.0 - p))
                    }
                };
                let (l, dl) = smooth_l1(out - ex.target[k], beta);
                total += ex.weight * l;
                dz[k] = ex.weight * dl * dout_dz * inv_n;
            }
            let Some(g) = grad.as_deref_mut() else { continue };
            let (gw1, rest) = g.split_at_mut(n_w1);
            let (gb1, rest) = rest.split_at_mut(n_b1);
            let (gw2, gb2) = rest.split_at_mut(n_w2);
            dh.fill(0.0);
            for k in 0..dz.len() {
                gb2[k] += dz[k];
                let row = k * self.hidden;
                for j in 0..self.hidden {
                    gw2[row + j] += dz[k] * h[j];
                    dh[j] += dz[k] * self.w2[row + j];
                }
            }
            for j in 0..self.hidden {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                gb1[j] += da;
                let row = j * self.input_dim;
                for (i, xi) in ex.input.iter().enumerate() {
                    gw1[row + i] += da * xi;
                }
            }
        }
        total * inv_n
    }

    fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format_version: ModelDocument::VERSION,
            kind: self.kind,
            activation: "tanh".into(),
            layers: vec![
                LayerDocument {
                    shape: [self.hidden, self.input_dim],
                    weights: self.w1.clone(),
                    bias: self.b1.clone(),
                },
                LayerDocument {
                    shape: [self.output_dim(), self.hidden],
                    weights: self.w2.clone(),
                    bias: self.b2.clone(),
                },
            ],
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.format_version != ModelDocument::VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        let [l1, l2] = doc.layers.as_slice() else {
            return Err(Error::Config("model must have exactly two layers".into()));
        };
        let [hidden, input_dim] = l1.shape;
        let ok = l1.weights.len() == hidden * input_dim
            && l1.bias.len() == hidden
            && l2.shape == [doc.kind.output_dim(), hidden]
            && l2.weights.len() == hidden * doc.kind.output_dim()
            && l2.bias.len() == doc.kind.output_dim();
        if !ok {
            return Err(Error::Config("model layer shapes are inconsistent".into()));
        }
        let m = HeadModel {
            kind: doc.kind,
            input_dim,
            hidden,
            w1: l1.weights.clone(),
            b1: l1.bias.clone(),
            w2: l2.weights.clone(),
            b2: l2.bias.clone(),
        };
        if !m.is_finite() {
            return Err(Error::Config("model parameters must be finite".into()));
        }
        Ok(m)
    }
}

/// On-disk model form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub kind: HeadKind,
    pub activation: String,
    pub layers: Vec<LayerDocument>,
}

impl ModelDocument {
    pub const VERSION: u32 = 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    /// `[rows, cols]` of the row-major weight matrix.
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Fixed number of SGD steps; overrides `epochs` when nonzero.
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Apply per-interval loss weights (regressor only).
    pub weighted: bool,
    pub beta: f64,
    pub init_out_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            steps: 6000,
            learning_rate: 0.5,
            batch_size: 64,
            seed: 0,
            hidden: 32,
            weighted: false,
            beta: 1.0,
            init_out_std: 0.001,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be at least 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        Ok(())
    }
}

/// A sample tied to the scene it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene: usize,
    pub sample: LabeledSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub model: HeadModel,
    /// Mean training-set loss at initialization and after each epoch-equivalent.
    pub trace: Vec<f64>,
    pub steps: usize,
}

/// Featurized regression examples; targets are deltas onto the recorded GT.
pub fn regression_examples(
    samples: &[SceneSample],
    scenes: &[Scene],
    extractor: &FeatureExtractor,
    cfg: &IntervalConfig,
    weighted: bool,
) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let scene = &scenes[s.scene];
            let f = extractor.featurize(&s.sample.bbox, scene)?;
            let target = encode_unchecked(&s.sample.bbox, &scene.gts[s.sample.gt_index].bbox);
            Ok(Example {
                input: f.input(),
                target: target.to_array().to_vec(),
                weight: if weighted { cfg.weights[s.sample.interval] } else { 1.0 },
                interval: s.sample.interval,
            })
        })
        .collect()
}

/// Featurized IoU examples. Every sample must be a positive (IoU >= 0.5).
pub fn iou_examples(samples: &[SceneSample], scenes: &[Scene], extractor: &FeatureExtractor) -> Result<Vec<Example>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if !(s.sample.iou >= 0.5) {
                return Err(Error::NegativeTrainingSample {
                    index: i,
                    iou: s.sample.iou,
                });
            }
            let f = extractor.featurize(&s.sample.bbox, &scenes[s.scene])?;
            Ok(Example {
                input: f.input(),
                target: vec![s.sample.iou],
                weight: 1.0,
                interval: s.sample.interval,
            })
        })
        .collect()
}

/// Mini-batch SGD on pre-built examples.
pub fn train_head(kind: HeadKind, examples: &[Example], hyper: &TrainConfig) -> Result<TrainedHead> {
    hyper.validate()?;
    let first = examples.first().ok_or(Error::Empty("training set"))?;
    let input_dim = first.input.len();
    let mut rng = seeded(hyper.seed);
    let mut model = HeadModel::init(kind, input_dim, hyper.hidden, hyper.init_out_std, &mut rng);

    let n = examples.len();
    let per_epoch = n.div_ceil(hyper.batch_size);
    let total_steps = if hyper.steps > 0 {
        hyper.steps
    } else {
        hyper.epochs * per_epoch
    };

    let full_loss = |m: &HeadModel| m.batch_loss(examples, hyper.beta, None);
    let mut trace = vec![full_loss(&model)];
    let mut grad = vec![0.0; model.param_count()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut batch: Vec<&Example> = Vec::with_capacity(hyper.batch_size);

    for step in 0..total_steps {
        batch.clear();
        while batch.len() < hyper.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let loss = model.batch_loss(&batch, hyper.beta, Some(&mut grad));
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        model.sgd_step(&grad, hyper.learning_rate);
        if !model.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        if (step + 1) % per_epoch == 0 || step + 1 == total_steps {
            let l = full_loss(&model);
            if !l.is_finite() {
                return Err(Error::Diverged { step, loss: l });
            }
            trace.push(l);
        }
    }
    Ok(TrainedHead {
        model,
        trace,
        steps: total_steps,
    })
}

/// Trains the delta regressor, with per-interval weights when `hyper.weighted`.
pub fn train_regressor(
    samples: &[SceneSample],
    scenes: &[Scene],
    extractor: &FeatureExtractor,
    cfg: &IntervalConfig,
    hyper: &TrainConfig,
) -> Result<TrainedHead> {
    let ex = regression_examples(samples, scenes, extractor, cfg, hyper.weighted)?;
    train_head(HeadKind::Regressor, &ex, hyper)
}

/// Trains the IoU predictor on positives only.
pub fn train_iou_predictor(
    samples: &[SceneSample],
    scenes: &[Scene],
    extractor: &FeatureExtractor,
    hyper: &TrainConfig,
) -> Result<TrainedHead> {
    let ex = iou_examples(samples, scenes, extractor)?;
    train_head(HeadKind::IouPredictor, &ex, hyper)
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all parameters of
/// the mean batch loss.
pub fn grad_check(model: &HeadModel, batch: &[Example], eps: f64, beta: f64) -> f64 {
    let mut analytic = vec![0.0; model.param_count()];
    model.batch_loss(batch, beta, Some(&mut analytic));
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + eps;
        let up = probe.batch_loss(batch, beta, None);
        *probe.param_mut(i) = orig - eps;
        let down = probe.batch_loss(batch, beta, None);
        *probe.param_mut(i) = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    worst
}
