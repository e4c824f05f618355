//! Evaluation metrics and reports for a batch of predictions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::ProbBatch;
use crate::data;
use crate::error::{input_err, Result};
use crate::fairloss::{iou_components, LossKind, LossWarning};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Which estimator the fairness metrics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Probability-weighted statistics, the quantities the losses optimize.
    #[default]
    Soft,
    /// Statistics of the argmax decisions.
    Hard,
}

impl std::str::FromStr for Mode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Mode::Soft),
            "hard" => Ok(Mode::Hard),
            other => Err(input_err!("unknown audit mode '{other}', expected soft or hard")),
        }
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the target.
pub fn accuracy(batch: &ProbBatch) -> f64 {
    let correct = batch
        .argmax()
        .iter()
        .zip(batch.target())
        .filter(|(p, t)| p == t)
        .count();
    correct as f64 / batch.len() as f64
}

/// Rank-based (Mann-Whitney) ROC AUC of the class-1 probability, with tied
/// scores given their average rank. `None` when only one class occurs.
pub fn auc(batch: &ProbBatch) -> Result<Option<f64>> {
    if batch.k_t() != 2 {
        return Err(input_err!("AUC needs a binary target, got k_t = {}", batch.k_t()));
    }
    let scores: Vec<f64> = batch.rows().map(|r| r[1]).collect();
    let positive: Vec<bool> = batch.target().iter().map(|&t| t == 1).collect();
    Ok(rank_auc(&scores, &positive))
}

pub(crate) fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Some(u / (p * n))
}

/// Bessel-corrected standard deviation of the IoUs of the groups present in
/// the batch; `None` with fewer than two present groups.
pub fn sigma_iou(batch: &ProbBatch) -> Option<f64> {
    let comp = iou_components(batch);
    let present: Vec<f64> = comp.per_group.iter().flatten().copied().collect();
    bessel_std(&present)
}

pub fn bessel_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((ss / (m - 1.0)).sqrt())
}

/// Accuracy, AUC and every fairness metric for one set of predictions.
///
/// Field names are the stable JSON contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mode: Mode,
    pub n_samples: usize,
    pub k_t: usize,
    pub k_s: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub l_iou: f64,
    pub l2_eo: f64,
    pub mi_eo: f64,
    pub l2_dp: f64,
    pub mi_dp: f64,
    pub iou_overall: f64,
    pub iou_per_group: Vec<Option<f64>>,
    pub sigma_iou: Option<f64>,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn fairness(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Iou => self.l_iou,
            LossKind::EoL2 => self.l2_eo,
            LossKind::EoMi => self.mi_eo,
            LossKind::DpL2 => self.l2_dp,
            LossKind::DpMi => self.mi_dp,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fixed-width table, one header row and one value row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3e}"));
        let _ = writeln!(
            out,
            "{:<6} {:>7} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "mode", "Acc", "AUC", "L_iou", "L2_eo", "MI_eo", "L2_dp", "MI_dp", "sigma_IoU"
        );
        let mode = match self.mode {
            Mode::Soft => "soft",
            Mode::Hard => "hard",
        };
        let _ = writeln!(
            out,
            "{:<6} {:>7.4} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            mode,
            self.accuracy,
            self.auc.map_or("-".to_string(), |v| format!("{v:.4}")),
            fmt(Some(self.l_iou)),
            fmt(Some(self.l2_eo)),
            fmt(Some(self.mi_eo)),
            fmt(Some(self.l2_dp)),
            fmt(Some(self.mi_dp)),
            fmt(self.sigma_iou),
        );
        let groups: Vec<String> = self
            .iou_per_group
            .iter()
            .enumerate()
            .map(|(c, v)| format!("g{c}={}", v.map_or("absent".to_string(), |v| format!("{v:.4}"))))
            .collect();
        let _ = writeln!(out, "IoU overall {:.4}; per group {}", self.iou_overall, groups.join(" "));
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

fn warning_text(w: LossWarning) -> &'static str {
    match w {
        LossWarning::SingleGroup => "fewer than two sensitive groups present",
        LossWarning::NoComparableStrata => "no target class is shared by two sensitive groups",
    }
}

/// Audits an in-memory batch. AUC always ranks the soft class-1 scores;
/// everything else follows `mode`.
pub fn audit_batch(batch: &ProbBatch, mode: Mode) -> AuditReport {
    let auc = if batch.k_t() == 2 {
        auc(batch).ok().flatten()
    } else {
        None
    };
    let hardened;
    let b = match mode {
        Mode::Soft => batch,
        Mode::Hard => {
            hardened = batch.hardened();
            &hardened
        }
    };

    let mut warnings: Vec<String> = Vec::new();
    let mut push = |w: String| {
        if !warnings.contains(&w) {
            warnings.push(w);
        }
    };
    let values: Vec<f64> = LossKind::ALL
        .iter()
        .map(|k| {
            let r = k.evaluate(b);
            for w in r.warnings {
                push(warning_text(w).to_string());
            }
            r.value
        })
        .collect();

    let comp = iou_components(b);
    for (c, g) in comp.per_group.iter().enumerate() {
        if g.is_none() {
            push(format!("sensitive group {c} absent"));
        }
    }
    for a in 0..b.k_t() {
        if !b.target().contains(&a) {
            push(format!("target class {a} absent"));
        }
    }
    if b.k_t() == 2 && auc.is_none() {
        push("AUC undefined: only one target class present".to_string());
    }
    let present: Vec<f64> = comp.per_group.iter().flatten().copied().collect();

    AuditReport {
        mode,
        n_samples: b.len(),
        k_t: b.k_t(),
        k_s: b.k_s(),
        accuracy: accuracy(b),
        auc,
        l_iou: values[0],
        l2_eo: values[1],
        mi_eo: values[2],
        l2_dp: values[3],
        mi_dp: values[4],
        iou_overall: comp.overall,
        iou_per_group: comp.per_group.clone(),
        sigma_iou: bessel_std(&present),
        warnings,
    }
}

/// Reads a prediction dump and audits it.
pub fn audit_dump(path: &Path, mode: Mode, k_s: Option<usize>) -> Result<AuditReport> {
    let batch = data::read_dump(path, k_s)?;
    Ok(audit_batch(&batch, mode))
}

/// Two-column plot data, e.g. lambda against sigma_IoU.
pub fn plot_data(x_name: &str, y_name: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{x_name} {y_name}\n");
    for (x, y) in points {
        let _ = writeln!(out, "{x:.17e} {y:.17e}");
    }
    out
}
