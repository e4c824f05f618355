//! Intersection-over-union per target class and sensitive group, and the
//! loss penalizing group IoUs that deviate from the overall IoU.
//!
//! Per sample, the intersection with class `a` is `probs[i][a] [y_t* = a]`
//! and the union is `probs[i][a] + [y_t* = a] - probs[i][a] [y_t* = a]`.
//! Both are averaged over the batch (restricted to a group where needed)
//! before dividing. For one-hot predictions this is the usual hard IoU.
//! In joint-table terms, with `c` the group:
//!
//! ```text
//! inter(a, c) = table[a][a][c]
//! union(a, c) = p(y_t=a, y_s*=c) + p(y_t*=a, y_s*=c) - table[a][a][c]
//! ```
//!
//! Cells with zero union are absent and left out of every average.

use super::{JointLoss, LossResult, LossWarning};
use crate::batch::ProbBatch;
use crate::stats::{estimate_joint, JointDistribution};

/// IoU values of one batch. `None` marks an absent class or group.
#[derive(Debug, Clone, PartialEq)]
pub struct IouComponents {
    pub k_t: usize,
    pub k_s: usize,
    /// `per_class_group[a * k_s + c]`.
    pub per_class_group: Vec<Option<f64>>,
    pub per_group: Vec<Option<f64>>,
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
}

impl IouComponents {
    pub fn class_group(&self, a: usize, c: usize) -> Option<f64> {
        self.per_class_group[a * self.k_s + c]
    }
}

struct Accumulated {
    inter: Vec<f64>,
    union: Vec<f64>,
    inter_class: Vec<f64>,
    union_class: Vec<f64>,
}

fn accumulate(joint: &JointDistribution) -> Accumulated {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let mut acc = Accumulated {
        inter: vec![0.0; k_t * k_s],
        union: vec![0.0; k_t * k_s],
        inter_class: vec![0.0; k_t],
        union_class: vec![0.0; k_t],
    };
    for a in 0..k_t {
        for c in 0..k_s {
            let i = joint.get(a, a, c);
            let u = joint.pred_group(a, c) + joint.label_freq(a, c) - i;
            acc.inter[a * k_s + c] = i;
            acc.union[a * k_s + c] = u;
            acc.inter_class[a] += i;
            acc.union_class[a] += u;
        }
    }
    acc
}

fn ratio(inter: f64, union: f64) -> Option<f64> {
    (union > 0.0).then(|| inter / union)
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, count) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (count > 0).then(|| sum / count as f64)
}

pub(crate) fn components_joint(joint: &JointDistribution) -> IouComponents {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let acc = accumulate(joint);
    let per_class_group: Vec<Option<f64>> = acc
        .inter
        .iter()
        .zip(&acc.union)
        .map(|(&i, &u)| ratio(i, u))
        .collect();
    let per_group = (0..k_s)
        .map(|c| {
            if joint.group_freq(c) <= 0.0 {
                None
            } else {
                mean_present((0..k_t).map(|a| per_class_group[a * k_s + c]))
            }
        })
        .collect();
    let per_class: Vec<Option<f64>> = acc
        .inter_class
        .iter()
        .zip(&acc.union_class)
        .map(|(&i, &u)| ratio(i, u))
        .collect();
    // A nonempty batch always has a class with positive label mass.
    let overall = mean_present(per_class.iter().copied()).unwrap_or(0.0);
    IouComponents {
        k_t,
        k_s,
        per_class_group,
        per_group,
        per_class,
        overall,
    }
}

pub fn iou_components(batch: &ProbBatch) -> IouComponents {
    components_joint(&estimate_joint(batch))
}

/// `sum_c [IoU(c) - IoU]^2` over groups present in the batch.
pub fn iou_loss(batch: &ProbBatch) -> LossResult {
    iou_loss_joint(&estimate_joint(batch)).chain(batch)
}

pub(crate) fn iou_loss_joint(joint: &JointDistribution) -> JointLoss {
    let (k_t, k_s) = (joint.k_t(), joint.k_s());
    let acc = accumulate(joint);
    let comp = components_joint(joint);
    let overall = comp.overall;

    let mut value = 0.0;
    let mut d_overall = 0.0;
    let mut d_group = vec![0.0; k_s];
    for (c, g) in comp.per_group.iter().enumerate() {
        if let Some(g) = g {
            let dev = g - overall;
            value += dev * dev;
            d_group[c] = 2.0 * dev;
            d_overall -= 2.0 * dev;
        }
    }

    let present_classes = comp.per_class.iter().flatten().count().max(1) as f64;
    let mut d_inter = vec![0.0; k_t * k_s];
    let mut d_union = vec![0.0; k_t * k_s];
    for c in 0..k_s {
        if comp.per_group[c].is_none() {
            continue;
        }
        let m_c = (0..k_t)
            .filter(|&a| comp.class_group(a, c).is_some())
            .count() as f64;
        for a in 0..k_t {
            let k = a * k_s + c;
            if comp.class_group(a, c).is_some() {
                let u = acc.union[k];
                d_inter[k] += d_group[c] / m_c / u;
                d_union[k] -= d_group[c] / m_c * acc.inter[k] / (u * u);
            }
        }
    }
    for a in 0..k_t {
        if comp.per_class[a].is_none() {
            continue;
        }
        let (i, u) = (acc.inter_class[a], acc.union_class[a]);
        let di = d_overall / present_classes / u;
        let du = -d_overall / present_classes * i / (u * u);
        for c in 0..k_s {
            d_inter[a * k_s + c] += di;
            d_union[a * k_s + c] += du;
        }
    }

    // inter(a, c) depends on table[a][a][c]; union(a, c) on table[a][b][c], b != a.
    let mut d_table = vec![0.0; k_t * k_t * k_s];
    for a in 0..k_t {
        for b in 0..k_t {
            for c in 0..k_s {
                let k = a * k_s + c;
                d_table[(a * k_t + b) * k_s + c] = if a == b { d_inter[k] } else { d_union[k] };
            }
        }
    }

    let present_groups = comp.per_group.iter().flatten().count();
    JointLoss {
        value,
        d_table,
        warnings: if present_groups < 2 {
            vec![LossWarning::SingleGroup]
        } else {
            Vec::new()
        },
    }
}
