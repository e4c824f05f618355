//! Lambda selection: a geometric ladder or seeded log-uniform random
//! search, each trial fine-tuning the same baseline. The selected trial
//! minimizes validation sigma_IoU among trials meeting the accuracy floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_batch, AuditReport, Mode};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::fairloss::LossKind;
use crate::model::{train, ModelParams, TrainConfig};

/// Default accuracy allowance below the baseline.
pub const DEFAULT_FLOOR_MARGIN: f64 = 0.02;
pub const SWEEP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ladder,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ladder" => Ok(Strategy::Ladder),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::Config(format!("unknown strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_low: f64,
    /// Exclusive upper end of the range.
    pub lambda_high: f64,
    /// Number of random trials, or the ladder's maximum length.
    pub n_trials: usize,
    pub strategy: Strategy,
    pub ladder_ratio: f64,
    /// `None` means baseline validation accuracy minus 0.02.
    pub accuracy_floor: Option<f64>,
    pub loss_kind: LossKind,
    /// Seeds the lambda draws of the random search.
    pub seed: u64,
    /// Fine-tuning settings; `lambda` and `loss_kind` are set per trial.
    pub finetune: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_low: 0.1,
            lambda_high: 1000.0,
            n_trials: 20,
            strategy: Strategy::Ladder,
            ladder_ratio: 10f64.sqrt(),
            accuracy_floor: None,
            loss_kind: LossKind::Iou,
            seed: 1,
            finetune: TrainConfig::finetune(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_low > 0.0 && self.lambda_low < self.lambda_high)
            || !self.lambda_high.is_finite()
        {
            return bad(format!(
                "lambda range must satisfy 0 < low < high, got [{}, {})",
                self.lambda_low, self.lambda_high
            ));
        }
        if self.n_trials == 0 {
            return bad("n_trials must be >= 1".to_string());
        }
        if !(self.ladder_ratio > 1.0) || !self.ladder_ratio.is_finite() {
            return bad(format!("ladder_ratio must exceed 1, got {}", self.ladder_ratio));
        }
        if let Some(f) = self.accuracy_floor {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("accuracy_floor must lie in [0, 1], got {f}"));
            }
        }
        self.finetune.validate()
    }

    /// The ladder `low * r^k` below `high`, at most `n_trials` rungs.
    pub fn ladder_lambdas(&self) -> Vec<f64> {
        (0..self.n_trials)
            .map(|k| self.lambda_low * self.ladder_ratio.powi(k as i32))
            .take_while(|&l| l < self.lambda_high)
            .collect()
    }

    /// Log-uniform draws over `[low, high)` from the seeded generator.
    pub fn random_lambdas(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = (self.lambda_low.ln(), self.lambda_high.ln());
        (0..self.n_trials)
            .map(|_| rng.random_range(lo..hi).exp().min(self.lambda_high.next_down()))
            .collect()
    }
}

/// Validation metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub sigma_iou: Option<f64>,
    /// sigma_IoU of the argmax predictions.
    pub hard_sigma_iou: Option<f64>,
    pub l_iou: f64,
    pub l2_eo: f64,
    pub mi_eo: f64,
    pub l2_dp: f64,
    pub mi_dp: f64,
    pub meets_floor: bool,
}

impl TrialRecord {
    fn from_reports(trial: usize, lambda: f64, seed: u64, soft: &AuditReport, hard: &AuditReport, floor: f64) -> Self {
        Self {
            trial,
            lambda,
            seed,
            accuracy: soft.accuracy,
            sigma_iou: soft.sigma_iou,
            hard_sigma_iou: hard.sigma_iou,
            l_iou: soft.l_iou,
            l2_eo: soft.l2_eo,
            mi_eo: soft.mi_eo,
            l2_dp: soft.l2_dp,
            mi_dp: soft.mi_dp,
            meets_floor: soft.accuracy >= floor,
        }
    }

    pub fn fairness(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Iou => self.l_iou,
            LossKind::EoL2 => self.l2_eo,
            LossKind::EoMi => self.mi_eo,
            LossKind::DpL2 => self.l2_dp,
            LossKind::DpMi => self.mi_dp,
        }
    }

    fn sigma_or_inf(&self) -> f64 {
        self.sigma_iou.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub loss_kind: LossKind,
    pub strategy: Strategy,
    pub accuracy_floor: f64,
    /// The lambda = 0 model, trial index 0 by convention.
    pub baseline: TrialRecord,
    pub trials: Vec<TrialRecord>,
    /// `None` when the baseline was kept.
    pub selected_trial: Option<usize>,
    pub selected_lambda: f64,
    pub stop_reason: Option<String>,
    pub warnings: Vec<String>,
    pub baseline_test: AuditReport,
    pub selected_test: AuditReport,
}

impl SweepResult {
    pub fn selected(&self) -> &TrialRecord {
        match self.selected_trial {
            Some(i) => &self.trials[i],
            None => &self.baseline,
        }
    }

    /// One trial record per line.
    pub fn trials_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `(lambda, value)` pairs for plotting, in trial order.
    pub fn series(&self, f: impl Fn(&TrialRecord) -> f64) -> Vec<(f64, f64)> {
        self.trials.iter().map(|t| (t.lambda, f(t))).collect()
    }
}

/// Data and starting point shared by every trial.
pub struct SweepInput<'a> {
    pub train: &'a Split,
    pub val: &'a Split,
    pub test: &'a Split,
    pub baseline: &'a ModelParams,
}

pub struct SweepOutcome {
    pub result: SweepResult,
    pub selected_params: ModelParams,
}

fn evaluate(params: &ModelParams, split: &Split) -> Result<(AuditReport, AuditReport)> {
    let batch = params.forward_split(split)?;
    Ok((audit_batch(&batch, Mode::Soft), audit_batch(&batch, Mode::Hard)))
}

fn run_trial(input: &SweepInput, config: &SweepConfig, lambda: f64) -> Result<ModelParams> {
    let tc = TrainConfig {
        lambda,
        loss_kind: Some(config.loss_kind),
        ..config.finetune.clone()
    };
    Ok(train(input.train, None, &tc, input.baseline.clone())?.params)
}

pub fn run(input: &SweepInput, config: &SweepConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let (base_soft, base_hard) = evaluate(input.baseline, input.val)?;
    let floor = config
        .accuracy_floor
        .unwrap_or((base_soft.accuracy - DEFAULT_FLOOR_MARGIN).max(0.0));
    let baseline = TrialRecord::from_reports(0, 0.0, config.finetune.seed, &base_soft, &base_hard, floor);
    let mut warnings = Vec::new();
    if !baseline.meets_floor {
        warnings.push(format!(
            "baseline accuracy {:.4} is below the floor {floor:.4}",
            baseline.accuracy
        ));
    }

    let mut trials: Vec<(TrialRecord, ModelParams)> = Vec::new();
    let mut stop_reason = None;
    match config.strategy {
        Strategy::Ladder => {
            let lambdas = config.ladder_lambdas();
            for (k, &lambda) in lambdas.iter().enumerate() {
                let params = run_trial(input, config, lambda)?;
                let (soft, hard) = evaluate(&params, input.val)?;
                let rec = TrialRecord::from_reports(k, lambda, config.finetune.seed, &soft, &hard, floor);
                let below = !rec.meets_floor;
                trials.push((rec, params));
                if below {
                    stop_reason = Some(format!(
                        "accuracy {:.4} fell below the floor {floor:.4} at lambda {lambda}",
                        soft.accuracy
                    ));
                    break;
                }
            }
            if stop_reason.is_none() {
                stop_reason = Some("reached the top of the lambda range".to_string());
            }
        }
        Strategy::Random => {
            let results: Vec<Result<(TrialRecord, ModelParams)>> = config
                .random_lambdas()
                .into_par_iter()
                .enumerate()
                .map(|(k, lambda)| {
                    let params = run_trial(input, config, lambda)?;
                    let (soft, hard) = evaluate(&params, input.val)?;
                    let rec = TrialRecord::from_reports(k, lambda, config.finetune.seed, &soft, &hard, floor);
                    Ok((rec, params))
                })
                .collect();
            for r in results {
                trials.push(r?);
            }
        }
    }

    let selected_trial = select(trials.iter().map(|(t, _)| t));
    if selected_trial.is_none() {
        warnings.push("no trial met the accuracy floor; keeping the lambda = 0 baseline".to_string());
    }
    let selected_params = match selected_trial {
        Some(i) => trials[i].1.clone(),
        None => input.baseline.clone(),
    };
    let baseline_test = audit_batch(&input.baseline.forward_split(input.test)?, Mode::Soft);
    let selected_test = audit_batch(&selected_params.forward_split(input.test)?, Mode::Soft);
    let trials: Vec<TrialRecord> = trials.into_iter().map(|(t, _)| t).collect();
    Ok(SweepOutcome {
        result: SweepResult {
            loss_kind: config.loss_kind,
            strategy: config.strategy,
            accuracy_floor: floor,
            selected_lambda: selected_trial.map_or(0.0, |i| trials[i].lambda),
            baseline,
            trials,
            selected_trial,
            stop_reason,
            warnings,
            baseline_test,
            selected_test,
        },
        selected_params,
    })
}

/// Index of the floor-meeting trial with the smallest sigma_IoU; ties keep
/// the earliest trial.
pub fn select<'a>(trials: impl IntoIterator<Item = &'a TrialRecord>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.into_iter().enumerate() {
        if !t.meets_floor {
            continue;
        }
        let s = t.sigma_or_inf();
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    /// Rank correlation of lambda with validation sigma_IoU.
    pub spearman_fairness: f64,
    /// Rank correlation of lambda with validation accuracy.
    pub spearman_accuracy: f64,
    /// Trials not dominated in (sigma_IoU lower, accuracy higher).
    pub pareto_set: Vec<usize>,
}

/// `None` for fewer than three trials.
pub fn trend(trials: &[TrialRecord]) -> Option<Trend> {
    if trials.len() < 3 {
        return None;
    }
    let lambdas: Vec<f64> = trials.iter().map(|t| t.lambda).collect();
    let sigma: Vec<f64> = trials.iter().map(TrialRecord::sigma_or_inf).collect();
    let acc: Vec<f64> = trials.iter().map(|t| t.accuracy).collect();
    Some(Trend {
        spearman_fairness: spearman(&lambdas, &sigma),
        spearman_accuracy: spearman(&lambdas, &acc),
        pareto_set: pareto(&sigma, &acc)
            .into_iter()
            .map(|i| trials[i].trial)
            .collect(),
    })
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of the average ranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn pareto(sigma: &[f64], acc: &[f64]) -> Vec<usize> {
    (0..sigma.len())
        .filter(|&i| {
            !(0..sigma.len()).any(|j| {
                sigma[j] <= sigma[i] && acc[j] >= acc[i] && (sigma[j] < sigma[i] || acc[j] > acc[i])
            })
        })
        .collect()
}
