use std::sync::OnceLock;

use ndarray::Array1;
use selective_ad::detector::{build_eta, make_synthetic};
use selective_ad::experiment::{CovKind, Scenario};
use selective_ad::graph::{assemble_detector, forward};
use selective_ad::inference::{run_test, sweep_with, SweepConfig};
use selective_ad::tensor::{CovMatrix, Image};
use selective_ad::vae::{self, load_weights_str, normal_training_set, to_json, TrainConfig, VaeModel};

fn model() -> &'static VaeModel {
    static MODEL: OnceLock<VaeModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = normal_training_set(64, 1000, 1);
        vae::train(VaeModel::reference(64, 0).unwrap(), &data, &TrainConfig::default())
            .unwrap()
            .model
    })
}

fn testable_null_image(seed_from: u64, cov: &CovMatrix) -> Image {
    let g = assemble_detector(model(), 1.2, 3).unwrap();
    (seed_from..)
        .map(|s| Scenario::Null.image(64, cov, s).unwrap())
        .find(|x| forward(&g, x).unwrap().1.is_testable())
        .unwrap()
}

#[test]
fn graph_score_matches_direct_reconstruction() {
    let g = assemble_detector(model(), 1.2, 1).unwrap();
    let cov = CovMatrix::identity(64);
    for seed in 0..20 {
        let x = Scenario::Null.image(64, &cov, seed).unwrap();
        let direct: Array1<f64> = (model().reconstruct(&x).unwrap().pixels() - x.pixels()).mapv(f64::abs);
        let score = g.score(x.pixels()).unwrap();
        let gap = (&score - &direct).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(gap <= 1e-12, "seed {seed}: {gap:e}");
    }
}

#[test]
fn reloaded_model_gives_identical_p_values() {
    let text = to_json(model(), None).unwrap();
    let (reloaded, _) = load_weights_str(&text).unwrap();
    let cov = CovKind::Ar.matrix(64).unwrap();
    let a = assemble_detector(model(), 1.2, 3).unwrap();
    let b = assemble_detector(&reloaded, 1.2, 3).unwrap();
    for seed in 0..10 {
        let (x, _) = make_synthetic(64, 2.0, 16, &cov, seed).unwrap();
        assert_eq!(run_test(&a, &x, &cov).unwrap(), run_test(&b, &x, &cov).unwrap());
    }
}

#[test]
fn truncation_set_is_stable_under_smaller_steps() {
    let cov = CovMatrix::identity(64);
    let g = assemble_detector(model(), 1.2, 3).unwrap();
    let mut seed = 300;
    for _ in 0..5 {
        let x = testable_null_image(seed, &cov);
        seed += 1000;
        let (_, region) = forward(&g, &x).unwrap();
        let eta = build_eta(&region, 64).unwrap();
        let sd = cov.quad_form(eta.values()).unwrap().sqrt();
        let coarse = sweep_with(&g, &x, &cov, &eta, &SweepConfig::default()).unwrap();
        let fine = sweep_with(
            &g,
            &x,
            &cov,
            &eta,
            &SweepConfig {
                delta_factor: 0.5e-4,
                ..SweepConfig::default()
            },
        )
        .unwrap();
        let (zl, zu) = (coarse.diagnostics.z_min, coarse.diagnostics.z_max);
        let clipped = |s: &selective_ad::inference::TruncationSet| -> f64 {
            s.intervals().iter().map(|&(l, u)| (u.min(zu) - l.max(zl)).max(0.0)).sum()
        };
        let diff = (clipped(&coarse.truncation) - clipped(&fine.truncation)).abs();
        assert!(diff < 1e-6 * sd, "length changed by {diff:e} (sd {sd})");
    }
}

#[test]
fn anomalies_reconstruct_worse_than_normal_images() {
    let cov = CovMatrix::identity(64);
    let err = |x: &Image| -> f64 {
        let r = model().reconstruct(x).unwrap();
        (r.pixels() - x.pixels()).mapv(|v| v * v).sum()
    };
    let normal: f64 = (0..200)
        .map(|s| err(&Scenario::Null.image(64, &cov, 50_000 + s).unwrap()))
        .sum::<f64>()
        / 200.0;
    let planted: f64 = (0..200)
        .map(|s| err(&make_synthetic(64, 4.0, 16, &cov, 50_000 + s).unwrap().0))
        .sum::<f64>()
        / 200.0;
    assert!(normal < planted, "normal {normal} vs planted {planted}");
}

#[test]
fn trained_loss_decreases() {
    let data = normal_training_set(64, 1000, 1);
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let trace = vae::train(VaeModel::reference(64, 0).unwrap(), &data, &cfg).unwrap().loss_trace;
    assert!(trace.last().unwrap() < &trace[0]);
}

#[test]
fn planted_signal_is_usually_significant() {
    let cov = CovMatrix::identity(64);
    let g = assemble_detector(model(), 1.2, 3).unwrap();
    let mut small = 0;
    let mut tested = 0;
    for seed in 0..40 {
        let (x, _) = make_synthetic(64, 4.0, 16, &cov, 7_000 + seed).unwrap();
        if let Some(t) = run_test(&g, &x, &cov).unwrap().tested() {
            tested += 1;
            assert!(t.truncation.contains(t.observed));
            assert!(t.p_bonferroni >= t.p_naive);
            if t.p_selective <= 0.05 {
                small += 1;
            }
        }
    }
    assert!(tested >= 30 && 2 * small > tested, "{small} of {tested}");
}
