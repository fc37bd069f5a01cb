//! Inception score, Fréchet distance and class-query retrieval mAP.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Largest negative eigenvalue (relative to the largest magnitude) treated as round-off.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-3;

/// Mean and (population) standard deviation of the per-split score.
pub fn inception_score(probabilities: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = probabilities.len();
    if n == 0 {
        return Err(Error::Validation("inception score needs at least one image".into()));
    }
    if splits == 0 || n < splits {
        return Err(Error::Validation(format!("{n} images cannot fill {splits} splits")));
    }
    let k = probabilities[0].len();
    if probabilities.iter().any(|p| p.len() != k || p.iter().any(|v| !v.is_finite() || *v < 0.0)) {
        return Err(Error::Numerical("class probabilities must be finite, non-negative and equally sized".into()));
    }
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &probabilities[s * n / splits..(s + 1) * n / splits];
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mean_kl = part
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, m)| v * (v / m).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.len() < 2 {
        return Err(Error::Validation(format!("{what} set needs at least 2 samples, has {}", rows.len())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("{what} features have ragged dimensions")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} features contain non-finite values")));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// The trace of `(S_r S_f)^{1/2}` is computed from the eigenvalues of the
/// symmetric matrix `S_r^{1/2} S_f S_r^{1/2}`, which shares them.
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let xr = to_matrix(real, "real")?;
    let xf = to_matrix(fake, "fake")?;
    if xr.ncols() != xf.ncols() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            xr.ncols(),
            xf.ncols()
        )));
    }
    let (mr, cr) = mean_and_covariance(&xr);
    let (mf, cf) = mean_and_covariance(&xf);
    let root = psd_sqrt(&cr);
    let lambdas = symmetric_eigenvalues(&(&root * &cf * &root));
    let scale = lambdas.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let worst = lambdas.iter().cloned().fold(0.0f64, f64::min);
    if scale > 0.0 && -worst > NEGATIVE_EIGEN_TOLERANCE * scale {
        return Err(Error::Numerical(format!(
            "covariance product has eigenvalue {worst:e} against scale {scale:e}"
        )));
    }
    let tr_sqrt: f64 = lambdas.iter().map(|l| l.max(0.0).sqrt()).sum();
    let gap = (&mr - &mf).norm_squared();
    Ok((gap + cr.trace() + cf.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Average precision of one ranked list given per-position relevance.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> Result<f64> {
    let total = relevant_in_rank_order.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::Protocol("query has no relevant items in the gallery".into()));
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &r) in relevant_in_rank_order.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Gallery indices sorted by cosine distance to `query`; ties keep gallery order.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let dist: Vec<f64> = gallery.iter().map(|g| cosine_distance(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

/// Query pool: `per_class` seeded picks from each class of the real set.
pub fn choose_queries<R: Rng>(real_classes: &[usize], per_class: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in real_classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut picks = Vec::new();
    for (c, members) in &by_class {
        if members.len() < per_class {
            return Err(Error::Protocol(format!(
                "class {c} has {} real images; {per_class} queries are required",
                members.len()
            )));
        }
        let mut chosen: Vec<usize> = members.choose_multiple(rng, per_class).copied().collect();
        chosen.sort_unstable();
        picks.extend(chosen);
    }
    Ok(picks)
}

/// Mean average precision of real-image queries ranking generated images.
pub fn retrieval_map<R: Rng>(
    real_features: &[Vec<f64>],
    real_classes: &[usize],
    fake_features: &[Vec<f64>],
    fake_classes: &[usize],
    queries_per_class: usize,
    rng: &mut R,
) -> Result<f64> {
    if real_features.len() != real_classes.len() || fake_features.len() != fake_classes.len() {
        return Err(Error::Shape("features and labels differ in count".into()));
    }
    let queries = choose_queries(real_classes, queries_per_class, rng)?;
    let mut total = 0.0;
    for &q in &queries {
        let c = real_classes[q];
        if !fake_classes.contains(&c) {
            return Err(Error::Protocol(format!("class {c} has no generated images")));
        }
        let order = rank_gallery(&real_features[q], fake_features);
        let relevance: Vec<bool> = order.iter().map(|&i| fake_classes[i] == c).collect();
        total += average_precision(&relevance)?;
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_average_precision() {
        let ap = average_precision(&[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!(average_precision(&[false, false]).is_err());
    }

    #[test]
    fn too_few_images_or_splits() {
        assert!(inception_score(&[], 10).is_err());
        assert!(inception_score(&vec![vec![1.0, 0.0]; 3], 10).is_err());
    }

    #[test]
    fn fid_rejects_non_finite_and_mismatched() {
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(fid(&a, &[vec![f64::NAN, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(fid(&a, &[vec![0.0], vec![1.0]]).is_err());
        assert!(fid(&a[..1], &a).is_err());
    }

    #[test]
    fn missing_fakes_violate_the_protocol() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let real = vec![vec![1.0, 0.0]; 4];
        let err = retrieval_map(&real, &[0, 0, 1, 1], &[vec![1.0, 0.0]], &[0], 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
