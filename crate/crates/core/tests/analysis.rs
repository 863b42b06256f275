mod common;

use common::*;
use cxgrad::analysis::*;
use cxgrad::autodiff::Array;
use cxgrad::meta::*;
use cxgrad::nn::NUM_LAYERS;
use cxgrad::tasks::{sample_episode, Split};
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(n: usize, p: usize, seed: u64) -> Array {
    let mut r = rng(seed);
    Array::new(vec![n, p], (0..n * p).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `tr(K H L H)` with Gram matrices built row by row.
fn hsic(x: &Array, y: &Array) -> f64 {
    let n = x.shape()[0];
    let gram = |a: &Array| -> Vec<f64> {
        let p = a.shape()[1];
        let row = |i: usize| &a.data()[i * p..(i + 1) * p];
        (0..n * n)
            .map(|k| row(k / n).iter().zip(row(k % n)).map(|(u, v)| u * v).sum())
            .collect()
    };
    let center = |k: Vec<f64>| -> Vec<f64> {
        let rows: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let cols: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() / n as f64).collect();
        let all = rows.iter().sum::<f64>() / n as f64;
        (0..n * n).map(|idx| k[idx] - rows[idx / n] - cols[idx % n] + all).collect()
    };
    let (kc, lc) = (center(gram(x)), center(gram(y)));
    kc.iter().zip(&lc).map(|(a, b)| a * b).sum()
}

fn hsic_cka(x: &Array, y: &Array) -> f64 {
    hsic(x, y) / (hsic(x, x) * hsic(y, y)).sqrt()
}

#[test]
fn cka_matches_the_gram_matrix_formula() {
    for seed in 0..5 {
        let x = random_matrix(12, 5, seed);
        let y = random_matrix(12, 7, seed + 50);
        let d = (linear_cka(&x, &y).unwrap() - hsic_cka(&x, &y)).abs();
        assert!(d < 1e-10, "seed {seed}: {d:e}");
    }
}

#[test]
fn cka_is_one_under_rotation_and_shift() {
    let x = random_matrix(10, 2, 3);
    let (c, s) = (0.6f64, 0.8f64);
    let rotated: Vec<f64> = x
        .data()
        .chunks(2)
        .flat_map(|r| [c * r[0] - s * r[1] + 4.0, s * r[0] + c * r[1] - 1.0])
        .collect();
    let y = Array::new(vec![10, 2], rotated).unwrap();
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn cka_rejects_constant_features_and_mismatched_rows() {
    let flat = Array::full(&[6, 3], 2.0);
    let x = random_matrix(6, 3, 1);
    assert!(linear_cka(&flat, &x).is_err());
    assert!(linear_cka(&x, &random_matrix(5, 3, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cka_is_symmetric_and_scale_free(seed in 0u64..10_000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let x = random_matrix(8, 4, seed);
        let y = random_matrix(8, 3, seed ^ 0xfeed);
        let xy = linear_cka(&x, &y).unwrap();
        prop_assert!((xy - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
        let scaled = linear_cka(&x.map(|v| a * v), &y.map(|v| b * v)).unwrap();
        prop_assert!((xy - scaled).abs() < 1e-10);
        prop_assert!((0.0..=1.0).contains(&xy));
    }
}

fn result_with_norms(rows: Vec<Vec<f64>>) -> AdaptResult {
    let meta = tiny_meta(LearnerKind::Maml, 0);
    AdaptResult {
        theta: meta.theta,
        context: None,
        grad_norms: rows,
        support_losses: vec![],
        gammas: vec![],
        step_points: vec![],
        step_grads: vec![],
    }
}

#[test]
fn gradient_norms_average_over_steps_and_tasks() {
    let batch = [
        result_with_norms(vec![vec![1.0; NUM_LAYERS + 1]]),
        result_with_norms(vec![vec![3.0, 3.0, 3.0, 3.0, 5.0]]),
    ];
    let rec = layer_grad_norms(7, &batch).unwrap();
    assert_eq!(rec.norms(), [2.0, 2.0, 2.0, 2.0, 3.0]);
    assert_eq!((rec.iteration, rec.n_tasks, rec.n_steps), (7, 2, 1));
    assert!((rec.top_layer_share() - 2.0 / 11.0).abs() < 1e-15);
    assert!(layer_grad_norms(0, &[]).is_err());
}

#[test]
fn embeddings_cover_support_then_query() {
    let src = cxgrad::tasks::TaskSource::synthetic(&cxgrad::tasks::SyntheticConfig {
        image_size: 16,
        samples_per_class: 20,
        ..Default::default()
    })
    .unwrap();
    let ep = sample_episode(&src, Split::Test, 5, 5, 15, &mut rng(0)).unwrap();
    let model = cxgrad::nn::ModelConfig { n_way: 5, ..tiny_model() };
    let meta = MetaKnowledge::init(LearnerKind::Cxgrad, &model, &mut rng(1));
    let cfg = InnerLoopConfig::default();
    let rows = export_embeddings(&meta, &ep, &cfg, Stage::After).unwrap();
    assert_eq!(rows.len(), 100);
    assert!(rows[..25].iter().all(|r| r.set == "support"));
    assert!(rows[25..].iter().all(|r| r.set == "query"));
    // width 4 after four 2×2 pools of 16×16
    assert!(rows.iter().all(|r| r.features.len() == 4));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    write_embeddings_csv(&path, &rows).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 5 + 4);
    assert_eq!(reader.records().count(), 100);
}

#[test]
fn still_rates_leave_embeddings_unchanged() {
    let ep = tiny_episode(0);
    let cfg = InnerLoopConfig {
        alpha: 0.0,
        beta: 0.0,
        ..InnerLoopConfig::default()
    };
    let mut cx = tiny_meta(LearnerKind::Cxgrad, 2);
    // IGS at γ = 1 is the identity only on unit-norm layers
    cx.theta = cx.theta.unit_normalized().unwrap();
    for meta in [tiny_meta(LearnerKind::Maml, 2), cx] {
        let before = export_embeddings(&meta, &ep, &cfg, Stage::Before).unwrap();
        let after = export_embeddings(&meta, &ep, &cfg, Stage::After).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(max_abs_diff(&b.features, &a.features) < 1e-9);
        }
    }
}

#[test]
fn cka_is_one_when_the_backbone_does_not_move() {
    let src = tiny_source();
    let episodes = |seed| {
        let mut r = rng(seed);
        let src = src.clone();
        (0..3).map(move |_| sample_episode(&src, Split::Test, 3, 2, 3, &mut r))
    };
    let meta = tiny_meta(LearnerKind::Maml, 3);
    let still = InnerLoopConfig {
        alpha: 0.0,
        ..InnerLoopConfig::default()
    };
    let head = InnerLoopConfig {
        head_only: true,
        ..InnerLoopConfig::default()
    };
    for cfg in [still.clone(), head] {
        let recs = cka_all_layers(&meta, LearnerKind::Maml, episodes(0), &cfg).unwrap();
        assert_eq!(recs.len(), NUM_LAYERS);
        for r in recs {
            assert!((r.cka_mean - 1.0).abs() < 1e-12, "{r:?}");
            assert_eq!(r.n_tasks, 3);
        }
    }
    let moving = cka_before_after(&meta, LearnerKind::Maml, episodes(1), &InnerLoopConfig::default(), 4).unwrap();
    assert!(moving.cka_mean <= 1.0);
    assert!(cka_before_after(&meta, LearnerKind::Maml, episodes(1), &still, 0).is_err());
    assert!(cka_all_layers(&meta, LearnerKind::Maml, std::iter::empty(), &still).is_err());
}

fn quadratic_point(x: f64, curvature: f64) -> StepPoint {
    StepPoint {
        task: 0,
        params: vec![Array::from_vec(vec![x])],
        grad: vec![Array::from_vec(vec![curvature * x])],
    }
}

#[test]
fn quadratic_landscape_matches_closed_forms() {
    for c in [1.0, 3.0] {
        let alpha = 0.1;
        let x = 2.0;
        let (rec, sweep) = landscape_sweep(4, &[quadratic_point(x, c)], alpha, |_, p| {
            let v = p[0].data()[0];
            Ok((0.5 * c * v * v, vec![Array::from_vec(vec![c * v])]))
        })
        .unwrap();
        assert!((rec.effective_beta.unwrap() - c).abs() < 1e-12);
        let rates = sweep_rates(alpha);
        let loss = |r: f64| 0.5 * c * (x - r * c * x).powi(2);
        for (j, &r) in rates.iter().enumerate() {
            assert!((sweep.mean_loss[j] - loss(r)).abs() < 1e-12);
            assert!((sweep.mean_grad_change[j] - r * c * c * x).abs() < 1e-12);
        }
        let losses: Vec<f64> = rates.iter().map(|&r| loss(r)).collect();
        let spread = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((rec.loss_variation - spread).abs() < 1e-12);
        assert!((rec.gradient_predictiveness - (rates[7] - rates[0]) * c * c * x).abs() < 1e-12);
        assert!((sweep.loss_at_alpha - loss(alpha)).abs() < 1e-12);
        assert_eq!(sweep.rows(4).len(), SWEEP_POINTS);
    }
}

#[test]
fn sweep_rates_for_a_typical_alpha() {
    let want = [0.005, 0.01, 0.015, 0.02, 0.025, 0.03, 0.035, 0.04];
    assert!(max_abs_diff(&sweep_rates(0.01), &want) < 1e-15);
}

#[test]
fn landscape_metrics_run_on_real_adaptations() {
    let meta = tiny_meta(LearnerKind::Cxgrad, 4);
    let batch = [tiny_episode(0), tiny_episode(1)];
    let cfg = InnerLoopConfig {
        steps: 2,
        ..Default::default()
    };
    let (rec, sweep) = landscape_metrics(&meta, LearnerKind::Cxgrad, &batch, &cfg, 9).unwrap();
    assert_eq!(rec.iteration, 9);
    assert!(rec.loss_variation >= 0.0 && rec.gradient_predictiveness >= 0.0);
    assert!(rec.effective_beta.is_some_and(|b| b.is_finite() && b >= 0.0));
    assert_eq!(sweep.rates, sweep_rates(cfg.alpha));
    assert!(landscape_metrics(&meta, LearnerKind::Cxgrad, &[], &cfg, 0).is_err());
}

#[test]
fn records_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        LandscapeRecord {
            iteration: 1,
            loss_variation: 0.25,
            gradient_predictiveness: 1.5e-3,
            effective_beta: Some(2.0),
        },
        LandscapeRecord {
            iteration: 2,
            loss_variation: 0.0,
            gradient_predictiveness: 0.0,
            effective_beta: None,
        },
    ];
    let path = dir.path().join("nested/landscape.csv");
    write_csv(&path, &recs).unwrap();
    assert_eq!(read_csv::<LandscapeRecord>(&path).unwrap(), recs);

    let cka = vec![CkaRecord {
        layer: 2,
        cka_mean: 0.875,
        ci95: 0.01,
        n_tasks: 10,
    }];
    let path = dir.path().join("cka.csv");
    write_csv(&path, &cka).unwrap();
    assert_eq!(read_csv::<CkaRecord>(&path).unwrap(), cka);
}
