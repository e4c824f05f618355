mod common;

use common::*;
use fairreg::data::Split;
use fairreg::model::{
    class_weights, train, weighted_cross_entropy, Architecture, ClassWeights, ModelParams, TrainConfig,
};
use fairreg::{Error, LossKind, ProbBatch};
use rand::Rng;

fn random_features(r: &mut impl Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| r.random::<f64>() * 4.0 - 2.0).collect()
}

fn random_params(r: &mut impl Rng, arch: Architecture) -> ModelParams {
    let mut p = ModelParams::zeros(arch).unwrap();
    p.values.iter_mut().for_each(|v| *v = r.random::<f64>() * 2.0 - 1.0);
    p
}

/// Plain matrix products and softmax, no shared code with the library.
fn forward_oracle(p: &ModelParams, x: &[f64]) -> Vec<f64> {
    let Architecture { input_dim: d, hidden: h, classes: k } = p.arch;
    let v = &p.values;
    let mut out = Vec::new();
    for row in x.chunks(d) {
        let (input, w_off, b_off, fan): (Vec<f64>, usize, usize, usize) = if h == 0 {
            (row.to_vec(), 0, k * d, d)
        } else {
            let hid = (0..h)
                .map(|j| (v[h * d + j] + (0..d).map(|m| v[j * d + m] * row[m]).sum::<f64>()).tanh())
                .collect();
            (hid, h * d + h, h * d + h + k * h, h)
        };
        let z: Vec<f64> = (0..k)
            .map(|a| v[b_off + a] + (0..fan).map(|m| v[w_off + a * fan + m] * input[m]).sum::<f64>())
            .collect();
        let e: Vec<f64> = z.iter().map(|zi| zi.exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|ei| ei / s));
    }
    out
}

#[test]
fn forward_matches_matrix_oracle() {
    let mut r = rng(31);
    for hidden in [0, 1, 5] {
        let arch = Architecture { input_dim: 4, hidden, classes: 3 };
        let p = random_params(&mut r, arch);
        let x = random_features(&mut r, 9, 4);
        let got = p.predict(&x).unwrap();
        for (g, w) in got.iter().zip(forward_oracle(&p, &x)) {
            assert!((g - w).abs() < 1e-14);
        }
    }
}

#[test]
fn forward_rejects_wrong_feature_width() {
    let p = ModelParams::zeros(Architecture { input_dim: 3, hidden: 0, classes: 2 }).unwrap();
    assert!(matches!(p.predict(&[1.0; 7]), Err(Error::Input(_))));
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let mut r = rng(32);
    let cases = [(0usize, 3usize, 2usize, 2usize, 12usize), (4, 5, 2, 2, 16), (8, 8, 3, 3, 16), (3, 2, 2, 5, 10)];
    for &(hidden, d, k_t, k_s, n) in &cases {
        let arch = Architecture { input_dim: d, hidden, classes: k_t };
        let p = random_params(&mut r, arch);
        let x = random_features(&mut r, n, d);
        let t: Vec<usize> = (0..n).map(|_| r.random_range(0..k_t)).collect();
        let s: Vec<usize> = (0..n).map(|i| i % k_s).collect();
        let w = ClassWeights::uniform(k_t);
        for fairness in [None, Some((LossKind::Iou, 2.0)), Some((LossKind::EoL2, 3.0)), Some((LossKind::EoMi, 1.5)),
            Some((LossKind::DpL2, 2.5)), Some((LossKind::DpMi, 0.7))]
        {
            let obj = p.objective(&x, &t, &s, k_s, &w, fairness).unwrap();
            let numeric: Vec<f64> = (0..p.values.len())
                .map(|j| {
                    let eval = |delta: f64| {
                        let mut q = p.clone();
                        q.values[j] += delta;
                        q.objective(&x, &t, &s, k_s, &w, fairness).unwrap().value
                    };
                    (eval(1e-6) - eval(-1e-6)) / 2e-6
                })
                .collect();
            let err = max_rel_error(&obj.grad, &numeric, 1e-7);
            assert!(err < 1e-4, "h={hidden} d={d} {fairness:?}: rel err {err}");
        }
    }
}

#[test]
fn weighted_cross_entropy_matches_formula() {
    let b = ProbBatch::from_rows(
        &[vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.25, 0.5, 0.25], vec![1.0, 0.0, 0.0]],
        2,
        vec![0, 2, 0, 1],
        vec![0, 1, 1, 0],
    )
    .unwrap();
    let w = class_weights(&[50, 30, 20], 0.99).unwrap();
    let ce = weighted_cross_entropy(&b, &w).unwrap();
    let ws = w.as_slice();
    let want = [-ws[0] * 0.7f64.ln(), -ws[2] * 0.8f64.ln(), -ws[0] * 0.25f64.ln(), -ws[1] * 1e-12f64.ln()];
    for (g, e) in ce.values.iter().zip(want) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
    assert!(ce.grad.iter().all(|g| g.is_finite()));
}

#[test]
fn class_weight_formula_and_errors() {
    let beta: f64 = 0.9998;
    let w = class_weights(&[5898, 102], beta).unwrap();
    let raw = [(1.0 - beta) / (1.0 - beta.powi(5898)), (1.0 - beta) / (1.0 - beta.powi(102))];
    let mean = (raw[0] + raw[1]) / 2.0;
    for (g, r) in w.as_slice().iter().zip(raw) {
        assert!((g - r / mean).abs() < 1e-12);
    }
    assert!(w.as_slice()[1] > w.as_slice()[0]);
    assert_eq!(class_weights(&[7, 1, 40], 0.0).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    assert!(matches!(class_weights(&[10, 0], 0.5), Err(Error::Input(_))));
    assert!(class_weights(&[10, 10], 1.0).is_err());
}

fn separable(n: usize, seed: u64) -> Split {
    let mut r = rng(seed);
    let mut features = Vec::new();
    let mut target = Vec::new();
    for i in 0..n {
        let t = i % 2;
        let x0 = if t == 1 { 1.0 } else { -1.0 } * (0.5 + r.random::<f64>());
        features.extend([x0, r.random::<f64>() - 0.5]);
        target.push(t);
    }
    Split { features, dim: 2, target, sensitive: (0..n).map(|i| (i / 2) % 2).collect(), k_t: 2, k_s: 2 }
}

#[test]
fn separable_data_is_learned_within_fifty_epochs() {
    let data = separable(400, 33);
    let arch = Architecture { input_dim: 2, hidden: 0, classes: 2 };
    let cfg = TrainConfig { epochs: 50, batch_size: 32, ..TrainConfig::default() };
    let out = train(&data, Some(&data), &cfg, ModelParams::init(arch, 1).unwrap()).unwrap();
    let last = out.history.last().unwrap();
    assert!(last.train_accuracy >= 0.99, "{}", last.train_accuracy);
    assert!(last.heldout.as_ref().unwrap().accuracy >= 0.99);
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let s = biased(3);
    let arch = Architecture { input_dim: s.data.dim, hidden: 4, classes: 2 };
    let cfg = TrainConfig { epochs: 3, lambda: 5.0, loss_kind: Some(LossKind::Iou), seed: 9, ..TrainConfig::default() };
    let run = || train(&s.train, Some(&s.val), &cfg, ModelParams::init(arch, 4).unwrap()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.params.values, b.params.values);
    assert_eq!(a.history, b.history);
    let other = train(&s.train, None, &TrainConfig { seed: 10, ..cfg.clone() }, ModelParams::init(arch, 4).unwrap())
        .unwrap();
    assert_ne!(a.params.values, other.params.values);
}

#[test]
fn lambda_zero_never_evaluates_the_fairness_loss() {
    let data = separable(200, 34);
    let arch = Architecture { input_dim: 2, hidden: 3, classes: 2 };
    let before = fairreg::fairloss::objective_evaluations();
    let cfg = TrainConfig { epochs: 4, batch_size: 16, loss_kind: Some(LossKind::EoMi), ..TrainConfig::default() };
    let out = train(&data, None, &cfg, ModelParams::init(arch, 1).unwrap()).unwrap();
    assert_eq!(out.fairness_evaluations, 0);
    assert_eq!(fairreg::fairloss::objective_evaluations(), before);

    let with = train(&data, None, &TrainConfig { lambda: 1.0, ..cfg }, ModelParams::init(arch, 1).unwrap()).unwrap();
    // 200 / 16 -> 12 full batches and a final one of 8
    assert_eq!(with.fairness_evaluations, 4 * 13);
}

#[test]
fn step_scales_linearly_with_learning_rate() {
    let data = separable(64, 35);
    let arch = Architecture { input_dim: 2, hidden: 3, classes: 2 };
    let init = ModelParams::init(arch, 2).unwrap();
    let step = |lr: f64| {
        let cfg = TrainConfig { epochs: 1, batch_size: 64, learning_rate: lr, lambda: 1.0,
            loss_kind: Some(LossKind::DpL2), ..TrainConfig::default() };
        let out = train(&data, None, &cfg, init.clone()).unwrap().params;
        out.values.iter().zip(&init.values).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let (one, two, tiny) = (step(1e-3), step(2e-3), step(1e-12));
    for ((a, b), c) in one.iter().zip(&two).zip(&tiny) {
        assert!((2.0 * a - b).abs() <= 1e-9 * b.abs() + 1e-15);
        assert!(c.abs() < 1e-11);
    }
}

#[test]
fn fairness_term_improves_heldout_metrics() {
    let s = biased(2);
    let cfg = TrainConfig { lambda: 20.0, loss_kind: Some(LossKind::EoL2), ..TrainConfig::finetune() };
    let plain = train(&s.train, Some(&s.val), &TrainConfig { lambda: 0.0, ..cfg.clone() }, s.baseline.clone()).unwrap();
    let fair = train(&s.train, Some(&s.val), &cfg, s.baseline.clone()).unwrap();
    let p = plain.history.last().unwrap().heldout.clone().unwrap();
    let f = fair.history.last().unwrap().heldout.clone().unwrap();
    assert!(f.l2_eo < p.l2_eo / 5.0, "{} vs {}", f.l2_eo, p.l2_eo);
    assert!(f.mi_eo < p.mi_eo);
    assert!(f.sigma_iou.unwrap() < p.sigma_iou.unwrap());
}

#[test]
fn training_input_errors() {
    let data = separable(20, 36);
    let arch = Architecture { input_dim: 2, hidden: 0, classes: 2 };
    let init = ModelParams::init(arch, 1).unwrap();
    let big = TrainConfig { batch_size: 21, ..TrainConfig::default() };
    assert!(matches!(train(&data, None, &big, init.clone()), Err(Error::Input(_))));
    let wrong = ModelParams::init(Architecture { input_dim: 3, hidden: 0, classes: 2 }, 1).unwrap();
    assert!(matches!(train(&data, None, &TrainConfig { batch_size: 4, ..TrainConfig::default() }, wrong), Err(Error::Input(_))));
    let no_kind = TrainConfig { lambda: 1.0, batch_size: 4, ..TrainConfig::default() };
    assert!(matches!(train(&data, None, &no_kind, init), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let mut data = separable(40, 37);
    data.features[13] = f64::NAN;
    let arch = Architecture { input_dim: 2, hidden: 2, classes: 2 };
    let cfg = TrainConfig { batch_size: 8, epochs: 5, ..TrainConfig::default() };
    let err = train(&data, None, &cfg, ModelParams::init(arch, 1).unwrap()).unwrap_err();
    assert_eq!(err.category(), "non_finite", "{err}");
}
