//! The per-batch prediction record every loss and metric consumes.

use crate::error::{input_err, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// Predicted class probabilities for `n` samples together with their
/// ground-truth target and sensitive labels.
///
/// Probabilities are stored row-major, `n * k_t` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    probs: Vec<f64>,
    target: Vec<usize>,
    sensitive: Vec<usize>,
    k_t: usize,
    k_s: usize,
}

impl ProbBatch {
    /// Validated constructor: entries in `[0, 1]`, rows summing to one,
    /// labels in range, `k_t, k_s >= 2`, `n >= 1`.
    pub fn new(
        probs: Vec<f64>,
        k_t: usize,
        k_s: usize,
        target: Vec<usize>,
        sensitive: Vec<usize>,
    ) -> Result<Self> {
        let batch = Self::new_relaxed(probs, k_t, k_s, target, sensitive)?;
        for (i, row) in batch.rows().enumerate() {
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(input_err!("row {i}: probability {p} outside [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(input_err!("row {i}: probabilities sum to {s}, expected 1"));
            }
        }
        Ok(batch)
    }

    /// Like [`ProbBatch::new`] but only requires finite probability entries.
    ///
    /// The losses are defined for arbitrary entry values, which is what a
    /// per-entry finite-difference check perturbs.
    pub fn new_relaxed(
        probs: Vec<f64>,
        k_t: usize,
        k_s: usize,
        target: Vec<usize>,
        sensitive: Vec<usize>,
    ) -> Result<Self> {
        if k_t < 2 || k_s < 2 {
            return Err(input_err!("need k_t >= 2 and k_s >= 2, got {k_t} and {k_s}"));
        }
        let n = target.len();
        if n == 0 {
            return Err(input_err!("empty batch"));
        }
        if sensitive.len() != n {
            return Err(input_err!(
                "{} target labels but {} sensitive labels",
                n,
                sensitive.len()
            ));
        }
        if probs.len() != n * k_t {
            return Err(input_err!(
                "probability buffer has {} entries, expected {n} x {k_t}",
                probs.len()
            ));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite()) {
            return Err(input_err!("non-finite probability {p}"));
        }
        if let Some((i, t)) = target.iter().enumerate().find(|(_, &t)| t >= k_t) {
            return Err(input_err!("row {i}: target label {t} out of range 0..{k_t}"));
        }
        if let Some((i, s)) = sensitive.iter().enumerate().find(|(_, &s)| s >= k_s) {
            return Err(input_err!("row {i}: sensitive label {s} out of range 0..{k_s}"));
        }
        Ok(Self {
            probs,
            target,
            sensitive,
            k_t,
            k_s,
        })
    }

    /// Builds a batch from per-sample probability rows.
    pub fn from_rows(
        rows: &[Vec<f64>],
        k_s: usize,
        target: Vec<usize>,
        sensitive: Vec<usize>,
    ) -> Result<Self> {
        let k_t = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != k_t) {
            return Err(input_err!("row {i} has {} entries, expected {k_t}", rows[i].len()));
        }
        Self::new(rows.concat(), k_t, k_s, target, sensitive)
    }

    /// One-hot predictions, i.e. a classifier that puts all mass on `predicted[i]`.
    pub fn one_hot(
        predicted: &[usize],
        k_t: usize,
        k_s: usize,
        target: Vec<usize>,
        sensitive: Vec<usize>,
    ) -> Result<Self> {
        let mut probs = vec![0.0; predicted.len() * k_t];
        for (i, &a) in predicted.iter().enumerate() {
            if a >= k_t {
                return Err(input_err!("row {i}: predicted class {a} out of range"));
            }
            probs[i * k_t + a] = 1.0;
        }
        Self::new(probs, k_t, k_s, target, sensitive)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn k_t(&self) -> usize {
        self.k_t
    }

    pub fn k_s(&self) -> usize {
        self.k_s
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k_t..(i + 1) * self.k_t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.k_t)
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn sensitive(&self) -> &[usize] {
        &self.sensitive
    }

    /// Per-row argmax, ties resolved toward the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }

    /// Replaces every row by the one-hot vector of its argmax.
    pub fn hardened(&self) -> Self {
        let mut probs = vec![0.0; self.probs.len()];
        for (i, a) in self.argmax().into_iter().enumerate() {
            probs[i * self.k_t + a] = 1.0;
        }
        Self {
            probs,
            ..self.clone()
        }
    }

    /// Same labels, different probability buffer. The buffer is only checked
    /// for shape and finiteness.
    pub fn with_probs(&self, probs: Vec<f64>) -> Result<Self> {
        Self::new_relaxed(
            probs,
            self.k_t,
            self.k_s,
            self.target.clone(),
            self.sensitive.clone(),
        )
    }

    /// Keeps the rows whose index satisfies `keep`; `None` if nothing is kept.
    pub fn select(&self, mut keep: impl FnMut(usize) -> bool) -> Option<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        if idx.is_empty() {
            return None;
        }
        let probs = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Some(Self {
            probs,
            target: idx.iter().map(|&i| self.target[i]).collect(),
            sensitive: idx.iter().map(|&i| self.sensitive[i]).collect(),
            k_t: self.k_t,
            k_s: self.k_s,
        })
    }

    /// Number of distinct sensitive groups with at least one sample.
    pub fn present_groups(&self) -> usize {
        let mut seen = vec![false; self.k_s];
        for &s in &self.sensitive {
            seen[s] = true;
        }
        seen.into_iter().filter(|&b| b).count()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (a, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = a;
        }
    }
    best
}
