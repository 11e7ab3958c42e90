use cdr::contrastive::{self, ScoreMatrix, SimilarityKind};
use cdr::renderer::{self, TextureFamily};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

const N: usize = 64;

#[test]
fn invariant_encoder_beats_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let log_n = (N as f64).ln();
    // z = x for both prediction and intervened label
    let x = gaussian(&mut rng, N, 8, 1.0);
    let loss = contrastive::cdr_loss(&x, &x, SimilarityKind::DotExp, None).unwrap();
    assert!(loss < log_n - 1.0, "loss {loss}");
}

/// Encoder that only sees the domain: z = embed(e). Intervened labels carry
/// an independent e′, naive labels the prediction's own e.
#[test]
fn domain_only_encoder_is_caught_by_cdr_but_not_by_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let log_n = (N as f64).ln();
    let trials = 400;
    let (mut cdr, mut naive) = (0.0, 0.0);
    for _ in 0..trials {
        let e = gaussian(&mut rng, N, 64, 1.0);
        let e_prime = gaussian(&mut rng, N, 64, 1.0);
        cdr += contrastive::cdr_loss(&e, &e_prime, SimilarityKind::Cosine, None).unwrap();
        naive += contrastive::naive_dr_loss(&e, &e, SimilarityKind::Cosine, None).unwrap();
    }
    let (cdr, naive) = (cdr / trials as f64, naive / trials as f64);
    // E[lse] - log N ≈ Var(cos)/2 = 1/(2d) for independent directions
    assert!((cdr - log_n).abs() < 0.02, "cdr {cdr} vs log N {log_n}");
    assert!(naive < log_n - 0.5, "naive {naive}");
}

#[test]
fn uncontrolled_loss_falls_as_label_noise_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 3;
    let x: Vec<Vec<Vec<f64>>> = (0..k).map(|_| gaussian(&mut rng, N, 8, 1.0)).collect();
    let noise: Vec<Vec<Vec<f64>>> = (0..k).map(|_| gaussian(&mut rng, N, 8, 1.0)).collect();
    let mut last = f64::INFINITY;
    for sigma in [2.0, 1.0, 0.5, 0.25, 0.0] {
        let labels: Vec<Vec<Vec<f64>>> = x
            .iter()
            .zip(&noise)
            .map(|(xs, ns)| xs.iter().zip(ns).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + sigma * v).collect()).collect())
            .collect();
        let loss = contrastive::cdr_uncontrolled_loss(&x, &labels, SimilarityKind::NegL2, None).unwrap();
        assert!(loss < last, "sigma {sigma}: {loss} !< {last}");
        last = loss;
    }
}

#[test]
fn uniform_scores_at_every_horizon_give_log_n() {
    let z = vec![vec![0.0; 4]; N];
    let horizons = vec![z.clone(); 6];
    let loss = contrastive::cdr_uncontrolled_loss(&horizons, &horizons, SimilarityKind::DotExp, None).unwrap();
    assert!((loss - (N as f64).ln()).abs() < 1e-12);
}

#[test]
fn same_domain_equals_naive_when_domains_coincide() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = renderer::sample_domain(&mut rng, &TextureFamily::ALL, 2).unwrap();
    let domains = vec![&d; 16];
    let p = gaussian(&mut rng, 16, 8, 1.0);
    let l = gaussian(&mut rng, 16, 8, 1.0);
    let a = contrastive::same_domain_loss(&p, &l, &domains, SimilarityKind::DotExp, None).unwrap();
    let b = contrastive::naive_dr_loss(&p, &l, SimilarityKind::DotExp, None).unwrap();
    assert_eq!(a, b);
}

fn square(n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..n).prop_flat_map(|n| (Just(n), prop::collection::vec(-30.0..30.0f64, n * n)))
}

proptest! {
    #[test]
    fn info_nce_is_nonnegative((n, logs) in square(12)) {
        let m = ScoreMatrix::from_log_scores(n, logs).unwrap();
        prop_assert!(contrastive::info_nce(&m) >= -1e-12);
    }

    #[test]
    fn info_nce_ignores_per_row_offsets((n, logs) in square(10), shift in prop::collection::vec(-100.0..100.0f64, 10)) {
        let base = contrastive::info_nce(&ScoreMatrix::from_log_scores(n, logs.clone()).unwrap());
        let shifted: Vec<f64> = logs.iter().enumerate().map(|(k, v)| v + shift[k / n]).collect();
        let moved = contrastive::info_nce(&ScoreMatrix::from_log_scores(n, shifted).unwrap());
        prop_assert!((base - moved).abs() < 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn positive_scores_and_their_logs_agree((n, logs) in square(10)) {
        let scores: Vec<f64> = logs.iter().map(|v| (v / 10.0).exp()).collect();
        let logs: Vec<f64> = logs.iter().map(|v| v / 10.0).collect();
        let a = contrastive::info_nce(&ScoreMatrix::from_scores(n, &scores).unwrap());
        let b = contrastive::info_nce(&ScoreMatrix::from_log_scores(n, logs).unwrap());
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn stabilized_scores_give_the_same_loss((n, logs) in square(10)) {
        let m = ScoreMatrix::from_log_scores(n, logs).unwrap();
        let s = ScoreMatrix::from_scores(n, &m.stabilized());
        // rows whose off-maximum entries underflow to zero cannot be rebuilt from scores
        prop_assume!(s.is_ok());
        let a = contrastive::info_nce(&m);
        let b = contrastive::info_nce(&s.unwrap());
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn cdr_with_unchanged_domain_is_naive(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = gaussian(&mut rng, n, 6, 1.0);
        let l = gaussian(&mut rng, n, 6, 1.0);
        for kind in [SimilarityKind::DotExp, SimilarityKind::NegL2, SimilarityKind::Cosine] {
            let a = contrastive::cdr_loss(&p, &l, kind, None).unwrap();
            let b = contrastive::naive_dr_loss(&p, &l, kind, None).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
