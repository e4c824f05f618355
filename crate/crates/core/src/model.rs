//! Small softmax classifier trained by mini-batch SGD on
//! `mean weighted cross-entropy + lambda * L_fair`.
//!
//! With `hidden = 0` the model is linear (`softmax(W x + b)`), otherwise it
//! has one tanh hidden layer (`softmax(W2 tanh(W1 x + b1) + b2)`).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{self, AuditReport, Mode};
use crate::batch::ProbBatch;
use crate::data::Split;
use crate::error::{input_err, Error, Result};
use crate::fairloss::{combined_loss, LossKind, PerSampleLoss};
use crate::stats::LOG_FLOOR;

pub const MODEL_FORMAT: &str = "fairreg-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const HISTORY_FORMAT_VERSION: u32 = 1;
/// Hidden width used by the command line and the bundled experiments.
pub const DEFAULT_HIDDEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// 0 for a linear model.
    pub hidden: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn n_params(&self) -> usize {
        let (d, h, k) = (self.input_dim, self.hidden, self.classes);
        if h == 0 {
            k * d + k
        } else {
            h * d + h + k * h + k
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(input_err!(
                "architecture needs input_dim >= 1 and classes >= 2, got {self:?}"
            ));
        }
        Ok(())
    }
}

/// Flat parameter vector. Layout: `[W1 (h x d), b1 (h), W2 (k x h), b2 (k)]`,
/// or `[W (k x d), b (k)]` for a linear model; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    arch: Architecture,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            values: vec![0.0; arch.n_params()],
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, k) = (arch.input_dim, arch.hidden, arch.classes);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, v: &mut [f64]| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in &mut v[range] {
                *x = rng.random_range(-bound..=bound);
            }
        };
        if h == 0 {
            fill(0..k * d, d, &mut p.values);
        } else {
            fill(0..h * d, d, &mut p.values);
            let w2 = h * d + h;
            fill(w2..w2 + k * h, h, &mut p.values);
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            arch: self.arch,
            values: self.values.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(input_err!(
                "unsupported model format {} v{}",
                file.format,
                file.version
            ));
        }
        file.arch.validate()?;
        if file.values.len() != file.arch.n_params() {
            return Err(input_err!(
                "model has {} values, architecture needs {}",
                file.values.len(),
                file.arch.n_params()
            ));
        }
        if file.values.iter().any(|v| !v.is_finite()) {
            return Err(input_err!("model contains non-finite parameters"));
        }
        Ok(Self {
            arch: file.arch,
            values: file.values,
        })
    }

    fn check_features(&self, features: &[f64]) -> Result<usize> {
        let d = self.arch.input_dim;
        if features.len() % d != 0 {
            return Err(input_err!(
                "feature matrix of {} values is not a multiple of input_dim {d}",
                features.len()
            ));
        }
        Ok(features.len() / d)
    }

    /// Logits of one sample; fills `hidden` with the tanh activations.
    fn logits_into(&self, x: &[f64], hidden: &mut Vec<f64>, logits: &mut [f64]) {
        let (d, h, k) = (self.arch.input_dim, self.arch.hidden, self.arch.classes);
        let v = &self.values;
        let (w, b, input, fan_in): (&[f64], &[f64], &[f64], usize) = if h == 0 {
            (&v[..k * d], &v[k * d..], x, d)
        } else {
            hidden.clear();
            for j in 0..h {
                let row = &v[j * d..(j + 1) * d];
                let z = v[h * d + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                hidden.push(z.tanh());
            }
            let w2 = h * d + h;
            (&v[w2..w2 + k * h], &v[w2 + k * h..], &hidden[..], h)
        };
        for a in 0..k {
            let row = &w[a * fan_in..(a + 1) * fan_in];
            logits[a] = b[a] + row.iter().zip(input).map(|(p, q)| p * q).sum::<f64>();
        }
    }

    /// Softmax probabilities, row-major `n x classes`.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_features(features)?;
        let (d, k) = (self.arch.input_dim, self.arch.classes);
        let mut out = vec![0.0; n * k];
        let mut hidden = Vec::with_capacity(self.arch.hidden);
        for i in 0..n {
            let row = &mut out[i * k..(i + 1) * k];
            self.logits_into(&features[i * d..(i + 1) * d], &mut hidden, row);
            softmax_in_place(row);
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        features: &[f64],
        target: Vec<usize>,
        sensitive: Vec<usize>,
        k_s: usize,
    ) -> Result<ProbBatch> {
        let probs = self.predict(features)?;
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(input_err!("forward pass produced non-finite probabilities"));
        }
        ProbBatch::new(probs, self.arch.classes, k_s, target, sensitive)
    }

    pub fn forward_split(&self, split: &Split) -> Result<ProbBatch> {
        self.forward(
            &split.features,
            split.target.clone(),
            split.sensitive.clone(),
            split.k_s,
        )
    }

    /// Backpropagates `d_probs` (row-major, per sample) to the parameters.
    fn backward(&self, features: &[f64], probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
        let (d, h, k) = (self.arch.input_dim, self.arch.hidden, self.arch.classes);
        let v = &self.values;
        let mut grad = vec![0.0; v.len()];
        let mut hidden = Vec::with_capacity(h);
        let mut logits = vec![0.0; k];
        let mut d_logits = vec![0.0; k];
        let mut d_hidden = vec![0.0; h];
        for (i, x) in features.chunks_exact(d).enumerate() {
            let p = &probs[i * k..(i + 1) * k];
            let g = &d_probs[i * k..(i + 1) * k];
            // softmax Jacobian: dz_a = p_a (g_a - sum_b p_b g_b)
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for a in 0..k {
                d_logits[a] = p[a] * (g[a] - dot);
            }
            if h == 0 {
                for a in 0..k {
                    for (j, xj) in x.iter().enumerate() {
                        grad[a * d + j] += d_logits[a] * xj;
                    }
                    grad[k * d + a] += d_logits[a];
                }
                continue;
            }
            self.logits_into(x, &mut hidden, &mut logits);
            let w2 = h * d + h;
            let b2 = w2 + k * h;
            d_hidden.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..k {
                for j in 0..h {
                    grad[w2 + a * h + j] += d_logits[a] * hidden[j];
                    d_hidden[j] += d_logits[a] * v[w2 + a * h + j];
                }
                grad[b2 + a] += d_logits[a];
            }
            for j in 0..h {
                let dz = d_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                for (m, xm) in x.iter().enumerate() {
                    grad[j * d + m] += dz * xm;
                }
                grad[h * d + j] += dz;
            }
        }
        grad
    }

    /// Training objective on one batch and its gradient w.r.t. the
    /// parameters: mean weighted cross-entropy plus `lambda * L_fair`.
    pub fn objective(
        &self,
        features: &[f64],
        target: &[usize],
        sensitive: &[usize],
        k_s: usize,
        weights: &ClassWeights,
        fairness: Option<(LossKind, f64)>,
    ) -> Result<Objective> {
        let batch = self.forward(features, target.to_vec(), sensitive.to_vec(), k_s)?;
        let mut ce = weighted_cross_entropy(&batch, weights)?;
        let inv_n = 1.0 / batch.len() as f64;
        ce.values.iter_mut().for_each(|v| *v *= inv_n);
        ce.grad.iter_mut().for_each(|v| *v *= inv_n);
        let (kind, lambda) = fairness.unwrap_or((LossKind::Iou, 0.0));
        let total = combined_loss(&batch, &ce, kind, lambda)?;
        let grad = self.backward(features, batch.probs(), &total.grad);
        Ok(Objective {
            value: total.value,
            grad,
            accuracy: audit::accuracy(&batch),
        })
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        s += *z;
    }
    for z in row.iter_mut() {
        *z /= s;
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub grad: Vec<f64>,
    pub accuracy: f64,
}

/// Per-class loss weights, normalized to mean one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(k_t: usize) -> Self {
        Self(vec![1.0; k_t])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Effective-number weighting: `w_i ∝ (1 - beta) / (1 - beta^n_i)`.
pub fn class_weights(counts: &[usize], beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(input_err!("class_weight_beta must lie in [0, 1), got {beta}"));
    }
    if counts.is_empty() {
        return Err(input_err!("no classes"));
    }
    if let Some(a) = counts.iter().position(|&n| n == 0) {
        return Err(input_err!("class {a} is absent from the training data"));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powf(n as f64)))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights(raw.iter().map(|w| w / mean).collect()))
}

/// `-w[y] ln max(p_y, LOG_FLOOR)` per sample, with its probability gradient.
pub fn weighted_cross_entropy(batch: &ProbBatch, weights: &ClassWeights) -> Result<PerSampleLoss> {
    if weights.0.len() != batch.k_t() {
        return Err(input_err!(
            "{} class weights for {} classes",
            weights.0.len(),
            batch.k_t()
        ));
    }
    let k = batch.k_t();
    let mut values = Vec::with_capacity(batch.len());
    let mut grad = vec![0.0; batch.probs().len()];
    for (i, row) in batch.rows().enumerate() {
        let y = batch.target()[i];
        let w = weights.0[y];
        let p = row[y];
        values.push(-w * p.max(LOG_FLOOR).ln());
        if p > LOG_FLOOR {
            grad[i * k + y] = -w / p;
        }
    }
    Ok(PerSampleLoss { values, grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub loss_kind: Option<LossKind>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub class_weight_beta: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            loss_kind: None,
            batch_size: 256,
            learning_rate: 0.5,
            epochs: 60,
            seed: 1,
            class_weight_beta: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for continuing from a trained baseline: a tenth of the
    /// baseline step size, more epochs.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.loss_kind.is_none() {
            return bad("lambda > 0 needs a loss_kind".to_string());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".to_string());
        }
        if let Some(b) = self.class_weight_beta {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("class_weight_beta must lie in [0, 1), got {b}"));
            }
        }
        Ok(())
    }

    fn fairness(&self) -> Option<(LossKind, f64)> {
        match self.loss_kind {
            Some(k) if self.lambda > 0.0 => Some((k, self.lambda)),
            _ => None,
        }
    }
}

/// One row of the training history. Held-out metrics are soft-mode audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout: Option<AuditReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// Fairness-loss evaluations made by the objective during this run.
    pub fairness_evaluations: u64,
}

pub fn history_to_json(history: &[EpochRecord]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(history)?;
    s.push('\n');
    Ok(s)
}

/// Mini-batch SGD from `init`. Chain two calls (baseline with `lambda = 0`,
/// then the fairness term) to fine-tune.
pub fn train(
    train_split: &Split,
    heldout: Option<&Split>,
    config: &TrainConfig,
    init: ModelParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = train_split.len();
    if n == 0 {
        return Err(input_err!("empty training set"));
    }
    if config.batch_size > n {
        return Err(input_err!(
            "batch_size {} exceeds the {} training samples",
            config.batch_size,
            n
        ));
    }
    if init.arch.input_dim != train_split.dim || init.arch.classes != train_split.k_t {
        return Err(input_err!(
            "model {:?} does not fit data with {} features and {} classes",
            init.arch,
            train_split.dim,
            train_split.k_t
        ));
    }
    let weights = match config.class_weight_beta {
        Some(beta) => class_weights(&train_split.class_counts(), beta)?,
        None => ClassWeights::uniform(train_split.k_t),
    };
    let fairness = config.fairness();
    let evals_before = crate::fairloss::objective_evaluations();

    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let d = train_split.dim;
    let mut history = Vec::with_capacity(config.epochs);
    let mut features = Vec::with_capacity(config.batch_size * d);
    let mut target = Vec::with_capacity(config.batch_size);
    let mut sensitive = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            // too few samples for group statistics
            if chunk.len() < train_split.k_s.max(2) {
                continue;
            }
            features.clear();
            target.clear();
            sensitive.clear();
            for &i in chunk {
                features.extend_from_slice(train_split.row(i));
                target.push(train_split.target[i]);
                sensitive.push(train_split.sensitive[i]);
            }
            let obj = params
                .objective(&features, &target, &sensitive, train_split.k_s, &weights, fairness)
                .map_err(|e| match e {
                    Error::Input(detail) => Error::NonFinite { epoch, batch: b, detail },
                    other => other,
                })?;
            if !obj.value.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("objective = {}", obj.value),
                });
            }
            for (p, g) in params.values.iter_mut().zip(&obj.grad) {
                *p -= config.learning_rate * g;
            }
            loss_sum += obj.value * chunk.len() as f64;
            acc_sum += obj.accuracy * chunk.len() as f64;
            seen += chunk.len();
        }
        let heldout_report = match heldout {
            Some(split) if !split.is_empty() => {
                Some(audit::audit_batch(&params.forward_split(split)?, Mode::Soft))
            }
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: acc_sum / seen as f64,
            heldout: heldout_report,
        });
    }
    Ok(TrainOutcome {
        params,
        history,
        fairness_evaluations: crate::fairloss::objective_evaluations() - evals_before,
    })
}
