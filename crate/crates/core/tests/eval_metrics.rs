use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use s2ig_core::eval::{average_precision, fid, inception_score, rank_gallery, retrieval_map};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, mean: &[f64]) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| mean.iter().map(|m| { let e: f64 = StandardNormal.sample(rng); m + e }).collect())
        .collect()
}

fn random_set(seed: u64, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (0..d).map(|j| scale * rng.random_range(-1.0..1.0) + (i % 3) as f64 * j as f64 * 0.1).collect())
        .collect()
}

fn random_orthogonal(seed: u64, d: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    m.qr().q()
}

fn transform(rows: &[Vec<f64>], q: &DMatrix<f64>) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| (q * nalgebra::DVector::from_column_slice(r)).iter().copied().collect())
        .collect()
}

/// Closed form for one-dimensional features.
fn fid_1d(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        (m, v)
    };
    let (ma, va) = stats(a);
    let (mb, vb) = stats(b);
    (ma - mb).powi(2) + va + vb - 2.0 * (va * vb).sqrt()
}

#[test]
fn fid_of_a_set_with_itself_vanishes() {
    let x = random_set(1, 300, 12, 2.0);
    assert!(fid(&x, &x).unwrap() <= 1e-6);
}

#[test]
fn fid_matches_the_scalar_closed_form() {
    for seed in 0..10 {
        let a: Vec<f64> = random_set(seed, 50, 1, 1.0).into_iter().map(|r| r[0]).collect();
        let b: Vec<f64> = random_set(seed + 100, 70, 1, 3.0).into_iter().map(|r| r[0] + 0.7).collect();
        let wrap = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
        let got = fid(&wrap(&a), &wrap(&b)).unwrap();
        assert!((got - fid_1d(&a, &b)).abs() < 1e-9, "{got} vs {}", fid_1d(&a, &b));
    }
}

#[test]
fn fid_of_shifted_unit_gaussians_approaches_squared_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let gap = [1.0, -2.0, 0.5, 0.0];
    let expected: f64 = gap.iter().map(|g| g * g).sum();
    let real = gaussian(&mut rng, 10_000, &[0.0; 4]);
    let fake = gaussian(&mut rng, 10_000, &gap);
    let got = fid(&real, &fake).unwrap();
    assert!((got - expected).abs() / expected < 0.05, "fid {got} vs {expected}");
}

#[test]
fn fid_is_symmetric_and_rotation_invariant() {
    for seed in 0..10 {
        let a = random_set(seed, 80, 6, 1.0);
        let b = random_set(seed + 50, 60, 6, 2.5);
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() <= 1e-6 * ab.max(1.0));
        let q = random_orthogonal(seed, 6);
        let rotated = fid(&transform(&a, &q), &transform(&b, &q)).unwrap();
        assert!((ab - rotated).abs() <= 1e-4 * ab.max(1.0), "{ab} vs {rotated}");
    }
}

#[test]
fn fid_handles_rank_deficient_covariances() {
    // Fewer samples than dimensions: covariance is singular but the metric stays finite.
    let a = random_set(3, 4, 10, 1.0);
    let b = random_set(4, 5, 10, 1.0);
    let v = fid(&a, &b).unwrap();
    assert!(v.is_finite() && v >= 0.0);
}

/// Direct evaluation of the score on one split.
fn is_oracle(p: &[Vec<f64>]) -> f64 {
    let k = p[0].len();
    let n = p.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| p.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut kl = 0.0;
    for r in p {
        for j in 0..k {
            if r[j] > 0.0 {
                kl += r[j] * (r[j].ln() - marginal[j].ln());
            }
        }
    }
    (kl / n).exp()
}

fn softmax_rows(seed: u64, n: usize, k: usize, temp: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let l: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0) * temp).collect();
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            l.iter().map(|v| v.exp() / z).collect()
        })
        .collect()
}

#[test]
fn constant_predictions_score_one() {
    let p = vec![vec![0.2, 0.3, 0.5]; 40];
    let (m, s) = inception_score(&p, 10).unwrap();
    assert!((m - 1.0).abs() < 1e-6 && s < 1e-6);
}

#[test]
fn uniform_one_hot_predictions_score_k() {
    let k = 5;
    let p: Vec<Vec<f64>> = (0..50)
        .map(|i| (0..k).map(|j| if j == i % k { 1.0 } else { 0.0 }).collect())
        .collect();
    let (m, s) = inception_score(&p, 10).unwrap();
    assert!((m - k as f64).abs() < 1e-6 && s < 1e-6, "{m} {s}");
}

#[test]
fn split_scores_match_the_oracle() {
    let p = softmax_rows(9, 30, 4, 3.0);
    let (m, s) = inception_score(&p, 3).unwrap();
    let parts: Vec<f64> = p.chunks(10).map(is_oracle).collect();
    let mean = parts.iter().sum::<f64>() / 3.0;
    let std = (parts.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((m - mean).abs() < 1e-12 && (s - std).abs() < 1e-12);
}

proptest! {
    #[test]
    fn inception_score_lies_between_one_and_k(seed in 0u64..1000, k in 2usize..8, temp in 0.1f64..20.0) {
        let p = softmax_rows(seed, 20, k, temp);
        let (m, _) = inception_score(&p, 2).unwrap();
        prop_assert!(m >= 1.0 - 1e-12 && m <= k as f64 + 1e-9);
    }

    #[test]
    fn fid_is_non_negative(seed in 0u64..1000, d in 1usize..6) {
        let a = random_set(seed, 20, d, 1.0);
        let b = random_set(seed + 7, 20, d, 0.3);
        prop_assert!(fid(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn hand_case_ranking_gives_five_sixths() {
    // Gallery sorted by angle from the query: classes 0, 1, 0, 1.
    let gallery: Vec<Vec<f64>> = [0.0f64, 10.0, 20.0, 30.0]
        .iter()
        .map(|deg| vec![deg.to_radians().cos(), deg.to_radians().sin()])
        .collect();
    let classes = [0, 1, 0, 1];
    let order = rank_gallery(&[1.0, 0.0], &gallery);
    assert_eq!(order, vec![0, 1, 2, 3]);
    let rel: Vec<bool> = order.iter().map(|&i| classes[i] == 0).collect();
    assert!((average_precision(&rel).unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

fn clustered(n_per: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Vec::new();
    let mut c = Vec::new();
    for class in 0..k {
        for _ in 0..n_per {
            let mut v = vec![0.0; k];
            v[class] = 1.0;
            for x in &mut v {
                *x += rng.random_range(-0.05..0.05);
            }
            f.push(v);
            c.push(class);
        }
    }
    (f, c)
}

#[test]
fn perfectly_clustered_fakes_give_map_one() {
    let (real, rc) = clustered(4, 5, 1);
    let (fake, fc) = clustered(3, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = retrieval_map(&real, &rc, &fake, &fc, 2, &mut rng).unwrap();
    assert!((m - 1.0).abs() < 1e-12);
}

/// Expected AP of a uniformly random ranking, by direct shuffling.
fn random_ranking_ap(relevant: usize, total: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rel: Vec<bool> = (0..total).map(|i| i < relevant).collect();
    let mut sum = 0.0;
    for _ in 0..trials {
        rel.shuffle(&mut rng);
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (i, &r) in rel.iter().enumerate() {
            if r {
                hits += 1.0;
                ap += hits / (i + 1) as f64;
            }
        }
        sum += ap / relevant as f64;
    }
    sum / trials as f64
}

#[test]
fn random_features_sit_at_the_chance_baseline() {
    let (k, per_real, per_fake, d) = (4, 6, 3, 16);
    let rc: Vec<usize> = (0..k * per_real).map(|i| i / per_real).collect();
    let fc: Vec<usize> = (0..k * per_fake).map(|i| i / per_fake).collect();
    let mut total = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let real: Vec<Vec<f64>> = rc.iter().map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let fake: Vec<Vec<f64>> = fc.iter().map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        total += retrieval_map(&real, &rc, &fake, &fc, 2, &mut rng).unwrap();
    }
    let got = total / 50.0;
    let baseline = random_ranking_ap(per_fake, k * per_fake, 200_000, 5);
    // 400 query APs; the AP spread here is about 0.25, so 4 sigma is roughly 0.05.
    assert!((got - baseline).abs() < 0.05, "mAP {got} vs baseline {baseline}");
}

#[test]
fn map_ignores_rank_preserving_transforms() {
    let (real, rc) = clustered(4, 3, 3);
    let real: Vec<Vec<f64>> = real.iter().map(|r| r.iter().map(|v| v + 0.4).collect()).collect();
    let fake = random_set(11, 9, 3, 1.0);
    let fc: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let base = retrieval_map(&real, &rc, &fake, &fc, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let q = random_orthogonal(8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let rescale = |rows: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let s = rng.random_range(0.1..10.0);
                r.iter().map(|v| v * s).collect()
            })
            .collect()
    };
    let real2 = rescale(&transform(&real, &q), &mut rng);
    let fake2 = rescale(&transform(&fake, &q), &mut rng);
    let moved = retrieval_map(&real2, &rc, &fake2, &fc, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!((base - moved).abs() < 1e-12, "{base} vs {moved}");
}

#[test]
fn query_pool_is_seeded() {
    let (real, rc) = clustered(6, 3, 3);
    let fake = random_set(11, 9, 3, 1.0);
    let fc: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let run = |s| retrieval_map(&real, &rc, &fake, &fc, 2, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(run(5), run(5));
}

#[test]
fn classes_with_one_real_image_cannot_supply_two_queries() {
    let real = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let fake = real.clone();
    let err = retrieval_map(&real, &[0, 1, 1], &fake, &[0, 1, 1], 2, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(s2ig_core::Error::Protocol(_))));
}
