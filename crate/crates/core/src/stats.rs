//! Batch estimate of the joint distribution of (predicted target, true
//! target, true sensitive) and the marginals, conditionals and entropies
//! derived from it.
//!
//! The estimate is soft: each sample spreads its predicted probability row
//! over the predicted axis, so every cell is linear in the probabilities and
//! `d table[a][b][c] / d probs[i][a] = [b = y_t*(i)] [c = y_s*(i)] / N`.
//!
//! All quantities are per batch. Nothing is accumulated across batches.

use crate::batch::ProbBatch;
use crate::error::{input_err, Result};

/// Arguments of `ln` are clamped here so that `0 ln 0` style terms stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

const SUM_TOL: f64 = 1e-9;

/// Axes of the joint table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    /// Predicted target class.
    Pred,
    /// Ground-truth target class.
    Target,
    /// Ground-truth sensitive group.
    Sensitive,
}

impl Axis {
    const ALL: [Axis; 3] = [Axis::Pred, Axis::Target, Axis::Sensitive];

    fn index(self) -> usize {
        self as usize
    }
}

/// Soft estimate of `p(y_t, y_t*, y_s*)` over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    k_t: usize,
    k_s: usize,
    /// `table[(a * k_t + b) * k_s + c]`, a = predicted, b = true target, c = group.
    table: Vec<f64>,
    /// Empirical `(y_t*, y_s*)` frequencies, `labels[b * k_s + c]`.
    labels: Vec<f64>,
    n_samples: usize,
}

/// A distribution over a subset of the joint axes, stored row-major in the
/// order of `axes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub axes: Vec<Axis>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Distribution {
    pub fn get(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, &d) in index.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.values[flat]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Result of conditioning on one axis value.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditional {
    Present(Distribution),
    /// The conditioning value carries no mass in this batch.
    Absent,
}

impl Conditional {
    pub fn present(self) -> Option<Distribution> {
        match self {
            Conditional::Present(d) => Some(d),
            Conditional::Absent => None,
        }
    }
}

/// `table[a][b][c] = (1/N) sum_i probs[i][a] [y_t*(i) = b] [y_s*(i) = c]`.
pub fn estimate_joint(batch: &ProbBatch) -> JointDistribution {
    let (k_t, k_s) = (batch.k_t(), batch.k_s());
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut table = vec![0.0; k_t * k_t * k_s];
    let mut labels = vec![0.0; k_t * k_s];
    for ((row, &b), &c) in batch.rows().zip(batch.target()).zip(batch.sensitive()) {
        labels[b * k_s + c] += inv_n;
        for (a, &p) in row.iter().enumerate() {
            table[(a * k_t + b) * k_s + c] += p * inv_n;
        }
    }
    JointDistribution {
        k_t,
        k_s,
        table,
        labels,
        n_samples: n,
    }
}

/// Chains a gradient w.r.t. the joint cells back to the probability entries.
pub(crate) fn joint_grad_to_probs(batch: &ProbBatch, d_table: &[f64]) -> Vec<f64> {
    let (k_t, k_s) = (batch.k_t(), batch.k_s());
    let inv_n = 1.0 / batch.len() as f64;
    let mut grad = Vec::with_capacity(batch.len() * k_t);
    for (&b, &c) in batch.target().iter().zip(batch.sensitive()) {
        grad.extend((0..k_t).map(|a| d_table[(a * k_t + b) * k_s + c] * inv_n));
    }
    grad
}

impl JointDistribution {
    /// Builds a joint from an explicit table, e.g. for tests. The label
    /// frequencies are taken as the table's `(y_t*, y_s*)` marginal.
    pub fn from_table(table: Vec<f64>, k_t: usize, k_s: usize, n_samples: usize) -> Result<Self> {
        if table.len() != k_t * k_t * k_s {
            return Err(input_err!("table has {} cells, expected {k_t}x{k_t}x{k_s}", table.len()));
        }
        if table.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(input_err!("table entries must be finite and nonnegative"));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(input_err!("table sums to {total}, expected 1"));
        }
        let mut labels = vec![0.0; k_t * k_s];
        for a in 0..k_t {
            for b in 0..k_t {
                for c in 0..k_s {
                    labels[b * k_s + c] += table[(a * k_t + b) * k_s + c];
                }
            }
        }
        Ok(Self {
            k_t,
            k_s,
            table,
            labels,
            n_samples,
        })
    }

    pub fn k_t(&self) -> usize {
        self.k_t
    }

    pub fn k_s(&self) -> usize {
        self.k_s
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Cell `(predicted a, true target b, group c)`.
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.table[(a * self.k_t + b) * self.k_s + c]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Empirical frequency of `(y_t* = b, y_s* = c)`, independent of predictions.
    pub fn label_freq(&self, b: usize, c: usize) -> f64 {
        self.labels[b * self.k_s + c]
    }

    pub fn group_freq(&self, c: usize) -> f64 {
        (0..self.k_t).map(|b| self.label_freq(b, c)).sum()
    }

    pub fn target_freq(&self, b: usize) -> f64 {
        (0..self.k_s).map(|c| self.label_freq(b, c)).sum()
    }

    /// Soft `p(y_t = a, y_s* = c)`.
    pub fn pred_group(&self, a: usize, c: usize) -> f64 {
        (0..self.k_t).map(|b| self.get(a, b, c)).sum()
    }

    fn dims(&self) -> [usize; 3] {
        [self.k_t, self.k_t, self.k_s]
    }

    /// Sums out every axis not listed in `axes`. The result is ordered by
    /// `axes` as given.
    pub fn marginal(&self, axes: &[Axis]) -> Result<Distribution> {
        if axes.is_empty() {
            return Err(input_err!("marginal needs at least one axis to keep"));
        }
        for (i, ax) in axes.iter().enumerate() {
            if axes[..i].contains(ax) {
                return Err(input_err!("axis {ax:?} listed twice"));
            }
        }
        let dims = self.dims();
        let shape: Vec<usize> = axes.iter().map(|ax| dims[ax.index()]).collect();
        let mut values = vec![0.0; shape.iter().product()];
        for a in 0..self.k_t {
            for b in 0..self.k_t {
                for c in 0..self.k_s {
                    let coord = [a, b, c];
                    let mut flat = 0;
                    for (ax, d) in axes.iter().zip(&shape) {
                        flat = flat * d + coord[ax.index()];
                    }
                    values[flat] += self.get(a, b, c);
                }
            }
        }
        Ok(Distribution {
            axes: axes.to_vec(),
            shape,
            values,
        })
    }

    /// Distribution over the two remaining axes given `axis = value`, in
    /// canonical axis order.
    pub fn conditional(&self, axis: Axis, value: usize) -> Result<Conditional> {
        let dims = self.dims();
        if value >= dims[axis.index()] {
            return Err(input_err!("{axis:?} value {value} out of range"));
        }
        let rest: Vec<Axis> = Axis::ALL.into_iter().filter(|&ax| ax != axis).collect();
        let shape: Vec<usize> = rest.iter().map(|ax| dims[ax.index()]).collect();
        let mut values = vec![0.0; shape[0] * shape[1]];
        for a in 0..self.k_t {
            for b in 0..self.k_t {
                for c in 0..self.k_s {
                    let coord = [a, b, c];
                    if coord[axis.index()] != value {
                        continue;
                    }
                    let i = coord[rest[0].index()];
                    let j = coord[rest[1].index()];
                    values[i * shape[1] + j] += self.get(a, b, c);
                }
            }
        }
        let mass: f64 = values.iter().sum();
        if mass <= 0.0 {
            return Ok(Conditional::Absent);
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Conditional::Present(Distribution {
            axes: rest,
            shape,
            values,
        }))
    }
}

/// `p ln p` with the log argument floored at [`LOG_FLOOR`].
pub(crate) fn plogp(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.max(LOG_FLOOR).ln()
    }
}

/// Derivative of [`plogp`].
pub(crate) fn d_plogp(p: f64) -> f64 {
    if p > LOG_FLOOR {
        p.ln() + 1.0
    } else {
        LOG_FLOOR.ln()
    }
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if let Some(p) = dist.iter().find(|p| !(**p >= 0.0)) {
        return Err(input_err!("negative or NaN probability {p}"));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(input_err!("distribution sums to {total}, expected 1"));
    }
    Ok(entropy_unchecked(dist).max(0.0))
}

pub(crate) fn entropy_unchecked(dist: &[f64]) -> f64 {
    -dist.iter().map(|&p| plogp(p)).sum::<f64>()
}
