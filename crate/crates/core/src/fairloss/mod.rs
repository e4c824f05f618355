//! Differentiable group-fairness losses.
//!
//! Every loss here is a function of the soft joint table estimated by
//! [`estimate_joint`] and of the batch's ground-truth label frequencies. Each
//! one computes its value together with `dL/d table`; the gradient w.r.t. the
//! per-sample probabilities then follows from the linear estimator.
//!
//! Marginals that involve only ground-truth axes (`p(y_s*)`, `p(y_t*)`,
//! `p(y_t*, y_s*)`) are read from the label counts and treated as constants.
//! Conditioning values with no samples in the batch are skipped.

mod iou;

use serde::{Deserialize, Serialize};

use crate::batch::ProbBatch;
use crate::error::{input_err, Result};
use crate::stats::{d_plogp, estimate_joint, joint_grad_to_probs, plogp, JointDistribution};

pub use iou::{iou_components, iou_loss, IouComponents};

/// The five fairness objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "iou")]
    Iou,
    #[serde(rename = "eo-l2")]
    EoL2,
    #[serde(rename = "eo-mi")]
    EoMi,
    #[serde(rename = "dp-l2")]
    DpL2,
    #[serde(rename = "dp-mi")]
    DpMi,
}

impl LossKind {
    /// Report column order.
    pub const ALL: [LossKind; 5] = [
        LossKind::Iou,
        LossKind::EoL2,
        LossKind::EoMi,
        LossKind::DpL2,
        LossKind::DpMi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Iou => "iou",
            LossKind::EoL2 => "eo-l2",
            LossKind::EoMi => "eo-mi",
            LossKind::DpL2 => "dp-l2",
            LossKind::DpMi => "dp-mi",
        }
    }

    /// Key used in JSON reports.
    pub fn report_key(self) -> &'static str {
        match self {
            LossKind::Iou => "l_iou",
            LossKind::EoL2 => "l2_eo",
            LossKind::EoMi => "mi_eo",
            LossKind::DpL2 => "l2_dp",
            LossKind::DpMi => "mi_dp",
        }
    }

    pub fn evaluate(self, batch: &ProbBatch) -> LossResult {
        match self {
            LossKind::Iou => iou_loss(batch),
            LossKind::EoL2 => eo_l2(batch),
            LossKind::EoMi => eo_mi(batch),
            LossKind::DpL2 => dp_l2(batch),
            LossKind::DpMi => dp_mi(batch),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "iou" | "l-iou" => Ok(LossKind::Iou),
            "eo-l2" | "l2-eo" => Ok(LossKind::EoL2),
            "eo-mi" | "mi-eo" => Ok(LossKind::EoMi),
            "dp-l2" | "l2-dp" => Ok(LossKind::DpL2),
            "dp-mi" | "mi-dp" => Ok(LossKind::DpMi),
            other => Err(input_err!("unknown fairness loss '{other}'")),
        }
    }
}

/// Degenerate-batch diagnostics. The loss value is still well defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWarning {
    /// Fewer than two sensitive groups occur in the batch.
    SingleGroup,
    /// No true target class is shared by two or more sensitive groups.
    NoComparableStrata,
}

/// Loss value and its gradient w.r.t. every probability entry (`n * k_t`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
    pub warnings: Vec<LossWarning>,
}

/// Value and probability-gradient of a loss defined on the joint table.
pub(crate) struct JointLoss {
    pub value: f64,
    pub d_table: Vec<f64>,
    pub warnings: Vec<LossWarning>,
}

impl JointLoss {
    fn chain(self, batch: &ProbBatch) -> LossResult {
        LossResult {
            value: self.value,
            grad: joint_grad_to_probs(batch, &self.d_table),
            warnings: self.warnings,
        }
    }
}

fn group_warnings(joint: &JointDistribution) -> Vec<LossWarning> {
    let present = (0..joint.k_s()).filter(|&c| joint.group_freq(c) > 0.0).count();
    if present < 2 {
        vec![LossWarning::SingleGroup]
    } else {
        Vec::new()
    }
}

fn strata_warnings(joint: &JointDistribution) -> Vec<LossWarning> {
    let mut w = group_warnings(joint);
    let comparable = (0..joint.k_t())
        .any(|b| (0..joint.k_s()).filter(|&c| joint.label_freq(b, c) > 0.0).count() >= 2);
    if !comparable {
        w.push(LossWarning::NoComparableStrata);
    }
    w
}

/// Squared deviation of the group-conditional prediction rates from the
/// overall prediction rate:
/// `sum_{a,c} [p(y_t=a | y_s*=c) - p(y_t=a)]^2` over groups present in the batch.
///
/// Relative to a plain squared distance between `p(y_t, y_s*)` and
/// `p(y_t) p(y_s*)`, each addend here carries an extra `1 / p(y_s*=c)^2`
/// weight. The conditional form is the one implemented.
pub fn dp_l2(batch: &ProbBatch) -> LossResult {
    dp_l2_joint(&estimate_joint(batch)).chain(batch)
}

pub(crate) fn dp_l2_joint(joint: &JointDistribution) -> JointLoss {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let groups: Vec<f64> = (0..k_s).map(|c| joint.group_freq(c)).collect();
    let pred_group: Vec<f64> = (0..k_t * k_s)
        .map(|i| joint.pred_group(i / k_s, i % k_s))
        .collect();

    let mut value = 0.0;
    // dL/d p(y_t=a, y_s*=c)
    let mut d_pg = vec![0.0; k_t * k_s];
    for a in 0..k_t {
        let row = &pred_group[a * k_s..(a + 1) * k_s];
        let pred: f64 = row.iter().sum();
        let mut dev_sum = 0.0;
        for c in (0..k_s).filter(|&c| groups[c] > 0.0) {
            let dev = row[c] / groups[c] - pred;
            value += dev * dev;
            d_pg[a * k_s + c] += 2.0 * dev / groups[c];
            dev_sum += dev;
        }
        for c in 0..k_s {
            d_pg[a * k_s + c] -= 2.0 * dev_sum;
        }
    }

    JointLoss {
        value,
        d_table: spread_pred_group(joint, &d_pg),
        warnings: group_warnings(joint),
    }
}

/// Mutual information between the prediction and the sensitive group,
/// `H(y_t) + H(y_s*) - H(y_t, y_s*)`.
pub fn dp_mi(batch: &ProbBatch) -> LossResult {
    dp_mi_joint(&estimate_joint(batch)).chain(batch)
}

pub(crate) fn dp_mi_joint(joint: &JointDistribution) -> JointLoss {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let mut h_pred = 0.0;
    let mut h_joint = 0.0;
    let mut d_pg = vec![0.0; k_t * k_s];
    for a in 0..k_t {
        let pred: f64 = (0..k_s).map(|c| joint.pred_group(a, c)).sum();
        h_pred -= plogp(pred);
        let d_pred = -d_plogp(pred);
        for c in 0..k_s {
            let pg = joint.pred_group(a, c);
            h_joint -= plogp(pg);
            d_pg[a * k_s + c] = d_pred + d_plogp(pg);
        }
    }
    let h_group: f64 = -(0..k_s).map(|c| plogp(joint.group_freq(c))).sum::<f64>();

    JointLoss {
        value: (h_pred + h_group - h_joint).max(0.0),
        d_table: spread_pred_group(joint, &d_pg),
        warnings: group_warnings(joint),
    }
}

/// Every `table[a][b][c]` contributes to `p(y_t=a, y_s*=c)` with unit weight.
fn spread_pred_group(joint: &JointDistribution, d_pg: &[f64]) -> Vec<f64> {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let mut d_table = vec![0.0; k_t * k_t * k_s];
    for a in 0..k_t {
        for b in 0..k_t {
            for c in 0..k_s {
                d_table[(a * k_t + b) * k_s + c] = d_pg[a * k_s + c];
            }
        }
    }
    d_table
}

/// Squared deviation of the stratum-conditional prediction rates from the
/// class-conditional ones:
/// `sum_{a,b,c} [p(y_t=a | y_t*=b, y_s*=c) - p(y_t=a | y_t*=b)]^2`,
/// skipping strata `(b, c)` without samples.
pub fn eo_l2(batch: &ProbBatch) -> LossResult {
    eo_l2_joint(&estimate_joint(batch)).chain(batch)
}

pub(crate) fn eo_l2_joint(joint: &JointDistribution) -> JointLoss {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let idx = |a: usize, b: usize, c: usize| (a * k_t + b) * k_s + c;
    let mut value = 0.0;
    let mut d_table = vec![0.0; k_t * k_t * k_s];
    for b in 0..k_t {
        let t_b = joint.target_freq(b);
        if t_b <= 0.0 {
            continue;
        }
        for a in 0..k_t {
            let class_rate = (0..k_s).map(|c| joint.get(a, b, c)).sum::<f64>() / t_b;
            let mut dev_sum = 0.0;
            for c in 0..k_s {
                let s_bc = joint.label_freq(b, c);
                if s_bc <= 0.0 {
                    continue;
                }
                let dev = joint.get(a, b, c) / s_bc - class_rate;
                value += dev * dev;
                d_table[idx(a, b, c)] += 2.0 * dev / s_bc;
                dev_sum += dev;
            }
            for c in 0..k_s {
                d_table[idx(a, b, c)] -= 2.0 * dev_sum / t_b;
            }
        }
    }
    JointLoss {
        value,
        d_table,
        warnings: strata_warnings(joint),
    }
}

/// Sum over true target classes `b` of the mutual information between the
/// prediction and the sensitive group within that class:
/// `sum_b [H(y_t | b) + H(y_s* | b) - H(y_t, y_s* | b)]`.
///
/// The per-class terms are not weighted by `p(y_t* = b)`; with that weight
/// the sum would be the conditional mutual information.
pub fn eo_mi(batch: &ProbBatch) -> LossResult {
    eo_mi_joint(&estimate_joint(batch)).chain(batch)
}

pub(crate) fn eo_mi_joint(joint: &JointDistribution) -> JointLoss {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let idx = |a: usize, b: usize, c: usize| (a * k_t + b) * k_s + c;
    let mut value = 0.0;
    let mut d_table = vec![0.0; k_t * k_t * k_s];
    for b in 0..k_t {
        let t_b = joint.target_freq(b);
        if t_b <= 0.0 {
            continue;
        }
        let h_group: f64 = -(0..k_s)
            .map(|c| plogp(joint.label_freq(b, c) / t_b))
            .sum::<f64>();
        let mut h_pred = 0.0;
        let mut h_joint = 0.0;
        for a in 0..k_t {
            let pred = (0..k_s).map(|c| joint.get(a, b, c)).sum::<f64>() / t_b;
            h_pred -= plogp(pred);
            let d_pred = -d_plogp(pred);
            for c in 0..k_s {
                let r = joint.get(a, b, c) / t_b;
                h_joint -= plogp(r);
                d_table[idx(a, b, c)] = (d_pred + d_plogp(r)) / t_b;
            }
        }
        value += h_pred + h_group - h_joint;
    }
    JointLoss {
        value: value.max(0.0),
        d_table,
        warnings: strata_warnings(joint),
    }
}

/// Per-sample classification losses and their probability gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleLoss {
    pub values: Vec<f64>,
    /// `n * k_t`, row-major.
    pub grad: Vec<f64>,
}

impl PerSampleLoss {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

thread_local! {
    static OBJECTIVE_EVALUATIONS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of fairness-loss evaluations made by [`combined_loss`] on the
/// current thread.
pub fn objective_evaluations() -> u64 {
    OBJECTIVE_EVALUATIONS.with(|c| c.get())
}

/// `sum_i ce_i + lambda * L_fair(batch)` with the matching gradient. With
/// `lambda == 0` the fairness term is not evaluated at all.
pub fn combined_loss(
    batch: &ProbBatch,
    per_sample: &PerSampleLoss,
    kind: LossKind,
    lambda: f64,
) -> Result<LossResult> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(input_err!("lambda must be finite and nonnegative, got {lambda}"));
    }
    if per_sample.values.len() != batch.len() || per_sample.grad.len() != batch.probs().len() {
        return Err(input_err!("per-sample loss shape does not match the batch"));
    }
    let mut value = per_sample.sum();
    let mut grad = per_sample.grad.clone();
    let mut warnings = Vec::new();
    if lambda > 0.0 {
        OBJECTIVE_EVALUATIONS.with(|c| c.set(c.get() + 1));
        let fair = kind.evaluate(batch);
        value += lambda * fair.value;
        for (g, f) in grad.iter_mut().zip(&fair.grad) {
            *g += lambda * f;
        }
        warnings = fair.warnings;
    }
    Ok(LossResult {
        value,
        grad,
        warnings,
    })
}

/// Contraction factor of the linear squeeze, `0 < alpha <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqueezeParams {
    alpha: f64,
}

impl SqueezeParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(input_err!("squeeze alpha must lie in (0, 1], got {alpha}"));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Mixes every prediction row with the uniform distribution:
/// `p' = alpha p + (1 - alpha) / k_t`. Decisions are unchanged.
pub fn squeeze(batch: &ProbBatch, params: SqueezeParams) -> ProbBatch {
    let alpha = params.alpha;
    let floor = (1.0 - alpha) / batch.k_t() as f64;
    let probs = batch.probs().iter().map(|&p| p * alpha + floor).collect();
    batch
        .with_probs(probs)
        .expect("squeezing preserves shape and finiteness")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed_batch() -> ProbBatch {
        ProbBatch::from_rows(
            &[
                vec![0.9, 0.1],
                vec![0.35, 0.65],
                vec![0.2, 0.8],
                vec![0.55, 0.45],
                vec![0.7, 0.3],
                vec![0.15, 0.85],
            ],
            2,
            vec![0, 1, 1, 0, 0, 1],
            vec![0, 0, 1, 1, 0, 1],
        )
        .unwrap()
    }

    #[test]
    fn dp_single_group_is_zero_with_warning() {
        let b = ProbBatch::from_rows(
            &[vec![0.9, 0.1], vec![0.4, 0.6], vec![0.2, 0.8]],
            2,
            vec![0, 1, 1],
            vec![0, 0, 0],
        )
        .unwrap();
        for r in [dp_l2(&b), dp_mi(&b)] {
            assert!(r.value.abs() < 1e-15);
            assert_eq!(r.warnings, vec![LossWarning::SingleGroup]);
        }
        for r in [eo_l2(&b), eo_mi(&b)] {
            assert!(r.value.abs() < 1e-15);
            assert!(r.warnings.contains(&LossWarning::NoComparableStrata));
        }
    }

    #[test]
    fn constant_predictor_is_dp_fair() {
        let q = [0.3, 0.5, 0.2];
        let rows = vec![q.to_vec(); 5];
        let b = ProbBatch::from_rows(&rows, 2, vec![0, 1, 2, 1, 0], vec![0, 0, 1, 1, 1]).unwrap();
        assert!(dp_l2(&b).value < 1e-12);
        assert!(dp_mi(&b).value < 1e-12);
        assert!(dp_l2(&b).warnings.is_empty());
    }

    #[test]
    fn aligned_predictor_has_ln2_dp_mi() {
        let b = ProbBatch::one_hot(&[0, 1, 0, 1], 2, 2, vec![0, 0, 1, 1], vec![0, 1, 0, 1]).unwrap();
        assert!((dp_mi(&b).value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_is_eo_fair() {
        let t = vec![0, 1, 1, 0, 2, 2];
        let b = ProbBatch::one_hot(&t, 3, 2, t.clone(), vec![0, 0, 1, 1, 0, 1]).unwrap();
        assert!(eo_l2(&b).value < 1e-12);
        assert!(eo_mi(&b).value < 1e-12);
        assert!(eo_l2(&b).grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn dp_l2_matches_direct_sum() {
        let b = mixed_batch();
        // group 0: rows 0, 1, 4; group 1: rows 2, 3, 5
        let g0: f64 = (0.9 + 0.35 + 0.7) / 3.0;
        let g1: f64 = (0.2 + 0.55 + 0.15) / 3.0;
        let all = (g0 + g1) / 2.0;
        let expected = 2.0 * ((g0 - all).powi(2) + (g1 - all).powi(2));
        assert!((dp_l2(&b).value - expected).abs() < 1e-14);
    }

    #[test]
    fn combined_loss_lambda_zero_and_negative() {
        let b = mixed_batch();
        let ce = PerSampleLoss {
            values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            grad: vec![0.0; 12],
        };
        let r = combined_loss(&b, &ce, LossKind::DpMi, 0.0).unwrap();
        assert_eq!(r.value, ce.sum());
        assert!(combined_loss(&b, &ce, LossKind::DpMi, -1.0).is_err());
        let r = combined_loss(&b, &ce, LossKind::DpL2, 10.0).unwrap();
        assert!((r.value - (ce.sum() + 10.0 * dp_l2(&b).value)).abs() < 1e-12);
    }

    #[test]
    fn squeeze_binary_example() {
        let b = ProbBatch::from_rows(&[vec![0.9, 0.1]], 2, vec![0], vec![0]).unwrap();
        let s = squeeze(&b, SqueezeParams::new(0.5).unwrap());
        assert!((s.row(0)[0] - 0.7).abs() < 1e-15);
        assert!((s.row(0)[1] - 0.3).abs() < 1e-15);
        assert_eq!(squeeze(&b, SqueezeParams::new(1.0).unwrap()), b);
        assert!(SqueezeParams::new(0.0).is_err());
        assert!(SqueezeParams::new(1.5).is_err());
    }

    #[test]
    fn loss_kind_parsing() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
            assert_eq!(k.report_key().parse::<LossKind>().unwrap(), k);
        }
        assert!("fancy".parse::<LossKind>().is_err());
    }
}
