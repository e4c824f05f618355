//! Test-only helpers: random batches, finite differences, and brute-force
//! loss implementations that work directly on samples instead of going
//! through the joint-table estimator.
#![allow(dead_code)]

use fairreg::{LossKind, ProbBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax of Gaussian-ish logits; entries strictly inside (0, 1).
pub fn random_batch(rng: &mut impl Rng, n: usize, k_t: usize, k_s: usize, spread: f64) -> ProbBatch {
    let mut probs = Vec::with_capacity(n * k_t);
    for _ in 0..n {
        let logits: Vec<f64> = (0..k_t).map(|_| spread * (rng.random::<f64>() * 2.0 - 1.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        probs.extend(e.iter().map(|v| v / s));
    }
    let target = (0..n).map(|_| rng.random_range(0..k_t)).collect();
    let sensitive = (0..n).map(|_| rng.random_range(0..k_s)).collect();
    ProbBatch::new(probs, k_t, k_s, target, sensitive).unwrap()
}

/// Central differences w.r.t. every probability entry, each perturbed alone.
pub fn finite_difference(batch: &ProbBatch, f: impl Fn(&ProbBatch) -> f64, step: f64) -> Vec<f64> {
    let base = batch.probs().to_vec();
    (0..base.len())
        .map(|j| {
            let mut up = base.clone();
            up[j] += step;
            let mut down = base.clone();
            down[j] -= step;
            let fu = f(&batch.with_probs(up).unwrap());
            let fd = f(&batch.with_probs(down).unwrap());
            (fu - fd) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error over entries where either gradient exceeds `floor`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// brute-force oracles
// ---------------------------------------------------------------------------

pub struct Samples<'a> {
    pub batch: &'a ProbBatch,
}

impl<'a> Samples<'a> {
    fn n(&self) -> f64 {
        self.batch.len() as f64
    }

    fn idx(&self, pred: impl Fn(usize, usize) -> bool) -> Vec<usize> {
        let b = self.batch;
        (0..b.len())
            .filter(|&i| pred(b.target()[i], b.sensitive()[i]))
            .collect()
    }

    /// Mean of `probs[i][a]` over the given samples.
    fn mean_prob(&self, rows: &[usize], a: usize) -> f64 {
        rows.iter().map(|&i| self.batch.row(i)[a]).sum::<f64>() / rows.len() as f64
    }
}

/// Independent O(N K_t K_t K_s) accumulation, cell by cell.
pub fn joint_oracle(batch: &ProbBatch) -> Vec<f64> {
    let (k_t, k_s) = (batch.k_t(), batch.k_s());
    let mut out = Vec::new();
    for a in 0..k_t {
        for b in 0..k_t {
            for c in 0..k_s {
                let mut s = 0.0;
                for i in 0..batch.len() {
                    if batch.target()[i] == b && batch.sensitive()[i] == c {
                        s += batch.row(i)[a];
                    }
                }
                out.push(s / batch.len() as f64);
            }
        }
    }
    out
}

pub fn dp_l2_oracle(batch: &ProbBatch) -> f64 {
    let s = Samples { batch };
    let all: Vec<usize> = (0..batch.len()).collect();
    let mut total = 0.0;
    for a in 0..batch.k_t() {
        let overall = s.mean_prob(&all, a);
        for c in 0..batch.k_s() {
            let rows = s.idx(|_, sc| sc == c);
            if rows.is_empty() {
                continue;
            }
            total += (s.mean_prob(&rows, a) - overall).powi(2);
        }
    }
    total
}

/// KL form: `sum p(a, c) ln(p(a, c) / (p(a) p(c)))`.
pub fn dp_mi_oracle(batch: &ProbBatch) -> f64 {
    let s = Samples { batch };
    let n = s.n();
    let mut total = 0.0;
    for a in 0..batch.k_t() {
        let p_a: f64 = (0..batch.len()).map(|i| batch.row(i)[a]).sum::<f64>() / n;
        for c in 0..batch.k_s() {
            let rows = s.idx(|_, sc| sc == c);
            if rows.is_empty() {
                continue;
            }
            let p_c = rows.len() as f64 / n;
            let p_ac = rows.iter().map(|&i| batch.row(i)[a]).sum::<f64>() / n;
            if p_ac > 0.0 {
                total += p_ac * (p_ac / (p_a * p_c)).ln();
            }
        }
    }
    total
}

pub fn eo_l2_oracle(batch: &ProbBatch) -> f64 {
    let s = Samples { batch };
    let mut total = 0.0;
    for b in 0..batch.k_t() {
        let class_rows = s.idx(|t, _| t == b);
        if class_rows.is_empty() {
            continue;
        }
        for c in 0..batch.k_s() {
            let rows = s.idx(|t, sc| t == b && sc == c);
            if rows.is_empty() {
                continue;
            }
            for a in 0..batch.k_t() {
                total += (s.mean_prob(&rows, a) - s.mean_prob(&class_rows, a)).powi(2);
            }
        }
    }
    total
}

/// Unweighted sum over true classes of the within-class KL form.
pub fn eo_mi_oracle(batch: &ProbBatch) -> f64 {
    let s = Samples { batch };
    let mut total = 0.0;
    for b in 0..batch.k_t() {
        let class_rows = s.idx(|t, _| t == b);
        if class_rows.is_empty() {
            continue;
        }
        let n_b = class_rows.len() as f64;
        for a in 0..batch.k_t() {
            let p_a = s.mean_prob(&class_rows, a);
            for c in 0..batch.k_s() {
                let rows = s.idx(|t, sc| t == b && sc == c);
                if rows.is_empty() {
                    continue;
                }
                let p_c = rows.len() as f64 / n_b;
                let p_ac = rows.iter().map(|&i| batch.row(i)[a]).sum::<f64>() / n_b;
                if p_ac > 0.0 {
                    total += p_ac * (p_ac / (p_a * p_c)).ln();
                }
            }
        }
    }
    total
}

/// Per-sample intersection / union accumulation.
pub struct IouOracle {
    pub per_group: Vec<Option<f64>>,
    pub overall: f64,
}

pub fn iou_oracle(batch: &ProbBatch) -> IouOracle {
    let (k_t, k_s) = (batch.k_t(), batch.k_s());
    let cell = |a: usize, group: Option<usize>| -> Option<f64> {
        let mut inter = 0.0;
        let mut union = 0.0;
        for i in 0..batch.len() {
            if group.is_some_and(|c| batch.sensitive()[i] != c) {
                continue;
            }
            let p = batch.row(i)[a];
            let hit = if batch.target()[i] == a { 1.0 } else { 0.0 };
            inter += p * hit;
            union += p + hit - p * hit;
        }
        (union > 0.0).then(|| inter / union)
    };
    let mean = |v: Vec<Option<f64>>| -> Option<f64> {
        let present: Vec<f64> = v.into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    };
    let per_group = (0..k_s)
        .map(|c| {
            if !batch.sensitive().contains(&c) {
                None
            } else {
                mean((0..k_t).map(|a| cell(a, Some(c))).collect())
            }
        })
        .collect();
    let overall = mean((0..k_t).map(|a| cell(a, None)).collect()).unwrap();
    IouOracle { per_group, overall }
}

pub fn iou_loss_oracle(batch: &ProbBatch) -> f64 {
    let o = iou_oracle(batch);
    o.per_group.iter().flatten().map(|g| (g - o.overall).powi(2)).sum()
}

pub fn oracle(kind: LossKind, batch: &ProbBatch) -> f64 {
    match kind {
        LossKind::Iou => iou_loss_oracle(batch),
        LossKind::EoL2 => eo_l2_oracle(batch),
        LossKind::EoMi => eo_mi_oracle(batch),
        LossKind::DpL2 => dp_l2_oracle(batch),
        LossKind::DpMi => dp_mi_oracle(batch),
    }
}

// ---------------------------------------------------------------------------
// biased synthetic set with a cross-entropy baseline
// ---------------------------------------------------------------------------

use fairreg::data::{generate, Dataset, Partition, Split, SyntheticSpec};
use fairreg::model::{train, Architecture, ModelParams, TrainConfig, DEFAULT_HIDDEN};

pub struct Setup {
    pub data: Dataset,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub baseline: ModelParams,
}

impl Setup {
    pub fn input(&self) -> fairreg::sweep::SweepInput<'_> {
        fairreg::sweep::SweepInput {
            train: &self.train,
            val: &self.val,
            test: &self.test,
            baseline: &self.baseline,
        }
    }
}

/// Generates `spec` and trains the default lambda = 0 baseline on it.
pub fn setup(spec: &SyntheticSpec) -> Setup {
    let data = generate(spec).unwrap();
    let (train_split, val, test) = (
        data.split(Partition::Train),
        data.split(Partition::Val),
        data.split(Partition::Test),
    );
    let arch = Architecture { input_dim: data.dim, hidden: DEFAULT_HIDDEN, classes: data.k_t };
    let baseline = train(&train_split, None, &TrainConfig::default(), ModelParams::init(arch, 1).unwrap())
        .unwrap()
        .params;
    Setup { data, train: train_split, val, test, baseline }
}

/// The default biased set (rho = 0.8, 90/10 groups) with data seed `seed`.
pub fn biased(seed: u64) -> Setup {
    setup(&SyntheticSpec { seed, ..SyntheticSpec::default() })
}

/// Same size, no injected bias, balanced groups.
pub fn unbiased(seed: u64) -> Setup {
    setup(&SyntheticSpec {
        seed,
        bias_strength: 0.0,
        group_imbalance: vec![0.5, 0.5],
        ..SyntheticSpec::default()
    })
}
