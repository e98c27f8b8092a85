//! Statistical and closed-form checks too slow or too large for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use upplda::metrics::{eer, ScoreSet};
use upplda::plda::{score_batch, train_em, ScoringMode, TrainConfig};
use upplda::preprocess::estimate_stats;
use upplda::synthetic::{self, derive_seed, mc_oracle_llr, SimConfig};
use upplda::{EmbeddingArchive, LabeledDataset, PldaModel, UncertainEmbedding};

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn sample_covariance(ds: &LabeledDataset) -> (DVector<f64>, DMatrix<f64>) {
    let vectors: Vec<&[f64]> = ds.utterances().map(|u| u.vector()).collect();
    let s = estimate_stats(vectors).unwrap();
    (s.mean, s.total_cov)
}

#[test]
fn sampled_total_covariance_matches_model() {
    let cfg = SimConfig {
        dim: 6,
        n_speakers: 50_000,
        utts_per_speaker: 2,
        n_trials: 0,
        uncertainty_scale: 0.0,
        seed: 21,
        ..Default::default()
    };
    let model = synthetic::random_model(&cfg).unwrap();
    let (ds, _) = synthetic::sample_from_model(&model, &cfg).unwrap();
    let (_, cov) = sample_covariance(&ds);
    let rel = rel_err(&cov, &model.total_cov_full());
    assert!(rel < 0.02, "{rel}");

    // With Φ_U = (c/τ) I, τ ~ U[1, 10]: E[Φ_U] = c ln(10) / 9 · I.
    let cfg = SimConfig {
        uncertainty_scale: 2.0,
        ..cfg
    };
    let (ds, _) = synthetic::sample_from_model(&model, &cfg).unwrap();
    let (_, cov) = sample_covariance(&ds);
    let expected = model.total_cov_full() + DMatrix::identity(6, 6) * (2.0 * 10f64.ln() / 9.0);
    let rel = rel_err(&cov, &expected);
    assert!(rel < 0.02, "{rel}");
}

#[test]
fn scalar_model_within_and_between_variances() {
    let model = PldaModel::from_diagonal(vec![0.0], vec![1.0], vec![1.0]).unwrap();
    let cfg = SimConfig {
        dim: 1,
        n_speakers: 20_000,
        utts_per_speaker: 5,
        n_trials: 0,
        uncertainty_scale: 0.0,
        seed: 22,
        ..Default::default()
    };
    let (ds, _) = synthetic::sample_from_model(&model, &cfg).unwrap();
    let (mut within, mut means) = (0.0, Vec::new());
    for utts in ds.speakers.values() {
        let m = utts.iter().map(|u| u.vector()[0]).sum::<f64>() / utts.len() as f64;
        within += utts.iter().map(|u| (u.vector()[0] - m).powi(2)).sum::<f64>();
        means.push(m);
    }
    let within = within / (ds.num_utterances() - ds.num_speakers()) as f64;
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let spread = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    // Var(speaker mean) = Φ_B + Σ / n_utts
    let between = spread - within / 5.0;
    assert!((within - 1.0).abs() < 0.02, "within {within}");
    assert!((between - 1.0).abs() < 0.05, "between {between}");
}

#[test]
fn marginal_density_is_the_sampling_law() {
    let cfg = SimConfig {
        dim: 3,
        n_speakers: 1_000_000,
        utts_per_speaker: 1,
        n_trials: 0,
        duration_min: 2.0,
        duration_max: 2.0,
        uncertainty_scale: 1.0,
        seed: 23,
        ..Default::default()
    };
    let model = synthetic::random_model(&cfg).unwrap();
    let (ds, _) = synthetic::sample_from_model(&model, &cfg).unwrap();
    let (mean, cov) = sample_covariance(&ds);
    let expected = model.total_cov_full() + DMatrix::identity(3, 3) * 0.5;
    assert!(rel_err(&cov, &expected) < 0.02);
    assert!((&mean - model.mean()).norm() / model.mean().norm() < 0.02);

    // The density evaluated by the model is that Gaussian.
    let chol = expected.clone().cholesky().unwrap();
    for u in ds.utterances().take(20) {
        let r = DVector::from_column_slice(u.vector()) - model.mean();
        let direct = -0.5
            * (3.0 * (2.0 * std::f64::consts::PI).ln()
                + 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
                + r.dot(&chol.solve(&r)));
        assert!((model.marginal_loglik(u).unwrap() - direct).abs() < 1e-10);
    }
}

#[test]
fn monte_carlo_oracle_reproduces_scalar_anchors() {
    let m = PldaModel::from_diagonal(vec![0.0], vec![1.0], vec![1.0]).unwrap();
    let e = UncertainEmbedding::new("e", vec![1.0], vec![0.0]);
    for (ut, closed) in [
        (0.0, 0.5 * (4.0f64 / 3.0).ln() + 1.0 / 6.0),
        (1.0, 0.5 * 1.2f64.ln() + 1.0 / 6.0 - 0.05),
    ] {
        let t = UncertainEmbedding::new("t", vec![1.0], vec![ut]);
        let mc = mc_oracle_llr(&m, &e, &t, 1_000_000, 31).unwrap();
        assert!((mc.estimate - closed).abs() <= 3.0 * mc.std_error, "{mc:?} vs {closed}");
        assert!((m.score_llr(&e, &t).unwrap() - closed).abs() < 1e-12);
    }
}

/// At `φ_e = φ_t = μ` the LLR is `−½ log det(I − (Φ_tot⁻¹ Φ_B)²)`.
#[test]
fn llr_at_the_mean_point() {
    for seed in 0..5 {
        let cfg = SimConfig {
            dim: 8,
            speaker_dim: Some(3 + seed as usize),
            seed,
            ..Default::default()
        };
        let model = synthetic::random_model(&cfg).unwrap();
        let h = model.total_cov_full().lu().solve(&model.between_cov_full()).unwrap();
        let det = (DMatrix::identity(8, 8) - &h * &h).determinant();
        let closed = -0.5 * det.ln();
        let mu = UncertainEmbedding::new("m", model.mean().as_slice().to_vec(), vec![0.0; 8]);
        assert!((model.score_llr(&mu, &mu).unwrap() - closed).abs() < 1e-9);
        assert!((model.score_plda(mu.vector(), mu.vector()).unwrap() - closed).abs() < 1e-9);
        let mc = mc_oracle_llr(&model, &mu, &mu, 200_000, seed).unwrap();
        assert!((mc.estimate - closed).abs() <= 3.0 * mc.std_error, "{mc:?} vs {closed}");
    }
}

#[test]
fn stats_converge_to_the_sampling_law() {
    let d = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = &g * g.transpose() + DMatrix::identity(d, d);
    let mu = DVector::from_fn(d, |i, _| 1.0 + i as f64);
    let l = sigma.clone().cholesky().unwrap().l();
    let samples: Vec<Vec<f64>> = (0..100_000)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            (&mu + &l * z).as_slice().to_vec()
        })
        .collect();
    let stats = estimate_stats(samples.iter().map(Vec::as_slice)).unwrap();
    assert!((&stats.mean - &mu).norm() / mu.norm() < 0.02);
    assert!(rel_err(&stats.total_cov, &sigma) < 0.02);
}

#[test]
fn em_estimate_is_consistent() {
    let cfg = SimConfig {
        dim: 8,
        n_speakers: 2000,
        utts_per_speaker: 10,
        n_trials: 0,
        uncertainty_scale: 0.0,
        seed: 25,
        ..Default::default()
    };
    let truth = synthetic::random_model(&cfg).unwrap();
    let (train, _) = synthetic::sample_from_model(
        &truth,
        &SimConfig {
            seed: derive_seed(25, 1),
            ..cfg
        },
    )
    .unwrap();
    let learned = train_em(&train, &TrainConfig::default()).unwrap();
    let rel = rel_err(&learned.total_cov_full(), &truth.total_cov_full());
    assert!(rel < 0.05, "{rel}");
}

#[test]
fn batch_scoring_is_deterministic_and_exact() {
    let cfg = SimConfig {
        dim: 8,
        n_speakers: 300,
        utts_per_speaker: 10,
        n_trials: 100_000,
        seed: 26,
        ..Default::default()
    };
    let set = synthetic::sample_dataset(&cfg).unwrap();
    let (archive, _) = set.dataset.to_archive(true).unwrap();
    let run = |threads: usize, mode| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| score_batch(&set.model, &archive, &set.trials, mode).unwrap())
    };
    for mode in [ScoringMode::Plda, ScoringMode::UpPlda] {
        let one = run(1, mode);
        let eight = run(8, mode);
        assert_eq!(one, eight);
        for (s, t) in one.entries.iter().zip(&set.trials).take(3) {
            let (e, x) = (archive.get(&t.enroll).unwrap(), archive.get(&t.test).unwrap());
            assert_eq!(s.score.to_bits(), set.model.score(e, x, mode).unwrap().to_bits());
        }
    }

    // PLDA mode ignores uncertainties.
    let zeroed = EmbeddingArchive::new(
        8,
        true,
        archive.entries().iter().map(|e| e.without_uncertainty()).collect(),
    )
    .unwrap();
    assert_eq!(
        run(1, ScoringMode::Plda),
        score_batch(&set.model, &zeroed, &set.trials, ScoringMode::Plda).unwrap()
    );
}

#[test]
fn eer_of_indistinguishable_classes_is_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut draw = |n| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
    let s = ScoreSet::from_scores(&draw(500), &draw(500));
    let e = eer(&s).unwrap();
    assert!((e - 0.5).abs() < 0.05, "{e}");
}
