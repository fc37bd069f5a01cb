//! Matching and distinctive objectives.
//!
//! Two implementations live here. The `f64` functions on plain vectors
//! return values together with hand-derived partial derivatives; they are
//! the reference the tests check against finite differences. The tensor
//! functions at the bottom are what training differentiates through.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::ops::log_softmax;

/// Paired embeddings plus their class labels and the same-class mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub image: Vec<Vec<f64>>,
    pub speech: Vec<Vec<f64>>,
    pub class_ids: Vec<usize>,
    /// Row-major `n x n`; entry `(i, j)` weights `V_j` in the normalizer of `A_i`.
    pub mask: Vec<Vec<f64>>,
}

impl EmbeddingBatch {
    pub fn new(image: Vec<Vec<f64>>, speech: Vec<Vec<f64>>, class_ids: Vec<usize>) -> Result<Self> {
        let n = class_ids.len();
        if image.len() != n || speech.len() != n {
            return Err(Error::Shape(format!(
                "{} image and {} speech embeddings for {n} labels",
                image.len(),
                speech.len()
            )));
        }
        let dim = image.first().map_or(0, Vec::len);
        if image.iter().chain(&speech).any(|v| v.len() != dim) {
            return Err(Error::Shape("embeddings must share one dimension".into()));
        }
        let mask = matching_mask(&class_ids);
        Ok(Self {
            image,
            speech,
            class_ids,
            mask,
        })
    }

    /// Replaces the mask; it must be `n x n` with binary entries.
    pub fn with_mask(mut self, mask: Vec<Vec<f64>>) -> Result<Self> {
        let n = self.len();
        if mask.len() != n || mask.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("mask must be {n}x{n}")));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// `M[i][j] = 0` when `i != j` and both items share a class, else 1.
pub fn matching_mask(class_ids: &[usize]) -> Vec<Vec<f64>> {
    class_ids
        .iter()
        .enumerate()
        .map(|(i, ci)| {
            class_ids
                .iter()
                .enumerate()
                .map(|(j, cj)| if i != j && ci == cj { 0.0 } else { 1.0 })
                .collect()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `S[i][j] = cos(A_i, V_j)`.
pub fn similarity_matrix(batch: &EmbeddingBatch) -> Result<Vec<Vec<f64>>> {
    let an = norms(&batch.speech, "speech")?;
    let vn = norms(&batch.image, "image")?;
    Ok(batch
        .speech
        .iter()
        .zip(&an)
        .map(|(a, na)| {
            batch
                .image
                .iter()
                .zip(&vn)
                .map(|(v, nv)| (dot(a, v) / (na * nv)).clamp(-1.0, 1.0))
                .collect()
        })
        .collect())
}

fn norms(vs: &[Vec<f64>], what: &str) -> Result<Vec<f64>> {
    vs.iter()
        .enumerate()
        .map(|(i, v)| {
            let n = norm(v);
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::Numerical(format!("{what} embedding {i} has norm {n}")))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingLoss {
    pub speech_to_image: f64,
    pub image_to_speech: f64,
    pub total: f64,
    pub grad_speech: Vec<Vec<f64>>,
    pub grad_image: Vec<Vec<f64>>,
}

/// Masked bidirectional softmax matching loss with analytic partials.
pub fn matching_loss(batch: &EmbeddingBatch, beta: f64) -> Result<MatchingLoss> {
    if !(beta > 0.0) {
        return Err(Error::Validation(format!("beta must be positive, got {beta}")));
    }
    let n = batch.len();
    let s = similarity_matrix(batch)?;
    let m = &batch.mask;
    for i in 0..n {
        if m[i].iter().all(|&x| x == 0.0) {
            return Err(Error::Numerical(format!("mask row {i} is all zero")));
        }
        if (0..n).all(|j| m[j][i] == 0.0) {
            return Err(Error::Numerical(format!("mask column {i} is all zero")));
        }
    }

    // Row-normalized weights for A->V (over j) and column-normalized for V->A (over rows j).
    let mut p = vec![vec![0.0; n]; n];
    let mut q = vec![vec![0.0; n]; n];
    let mut l_av = 0.0;
    let mut l_va = 0.0;
    for i in 0..n {
        let row_max = (0..n).filter(|&j| m[i][j] != 0.0).map(|j| beta * s[i][j]).fold(f64::MIN, f64::max);
        let z: f64 = (0..n).map(|j| m[i][j] * (beta * s[i][j] - row_max).exp()).sum();
        for j in 0..n {
            p[i][j] = m[i][j] * (beta * s[i][j] - row_max).exp() / z;
        }
        l_av -= beta * s[i][i] - row_max - z.ln();

        let col_max = (0..n).filter(|&j| m[j][i] != 0.0).map(|j| beta * s[j][i]).fold(f64::MIN, f64::max);
        let z: f64 = (0..n).map(|j| m[j][i] * (beta * s[j][i] - col_max).exp()).sum();
        for j in 0..n {
            q[j][i] = m[j][i] * (beta * s[j][i] - col_max).exp() / z;
        }
        l_va -= beta * s[i][i] - col_max - z.ln();
    }

    // dL/dS[i][j]
    let g: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    beta * (p[i][j] - delta) + beta * (q[i][j] - delta)
                })
                .collect()
        })
        .collect();

    let dim = batch.speech.first().map_or(0, Vec::len);
    let an: Vec<f64> = batch.speech.iter().map(|a| norm(a)).collect();
    let vn: Vec<f64> = batch.image.iter().map(|v| norm(v)).collect();
    let mut grad_speech = vec![vec![0.0; dim]; n];
    let mut grad_image = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let gij = g[i][j];
            if gij == 0.0 {
                continue;
            }
            let (a, v) = (&batch.speech[i], &batch.image[j]);
            for k in 0..dim {
                grad_speech[i][k] += gij * (v[k] / (an[i] * vn[j]) - s[i][j] * a[k] / (an[i] * an[i]));
                grad_image[j][k] += gij * (a[k] / (an[i] * vn[j]) - s[i][j] * v[k] / (vn[j] * vn[j]));
            }
        }
    }

    Ok(MatchingLoss {
        speech_to_image: l_av,
        image_to_speech: l_va,
        total: l_av + l_va,
        grad_speech,
        grad_image,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistinctiveLoss {
    pub total: f64,
    pub grad_speech_logits: Vec<Vec<f64>>,
    pub grad_image_logits: Vec<Vec<f64>>,
}

/// Class cross-entropy over both modalities' label-space logits.
pub fn distinctive_loss(
    speech_logits: &[Vec<f64>],
    image_logits: &[Vec<f64>],
    class_ids: &[usize],
) -> Result<DistinctiveLoss> {
    let n = class_ids.len();
    if speech_logits.len() != n || image_logits.len() != n {
        return Err(Error::Shape("logit rows must match the number of labels".into()));
    }
    let num_classes = speech_logits.first().map_or(0, Vec::len);
    if num_classes < 2 {
        return Err(Error::Validation(format!("need at least 2 classes, got {num_classes}")));
    }
    if let Some(c) = class_ids.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Validation(format!("class id {c} outside [0, {num_classes})")));
    }
    let mut total = 0.0;
    let mut grads = [vec![vec![0.0; num_classes]; n], vec![vec![0.0; num_classes]; n]];
    for (side, logits) in [speech_logits, image_logits].into_iter().enumerate() {
        for (i, row) in logits.iter().enumerate() {
            if row.len() != num_classes {
                return Err(Error::Shape("ragged logit rows".into()));
            }
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            total -= row[class_ids[i]] - max - z.ln();
            for (k, x) in row.iter().enumerate() {
                let p = (x - max).exp() / z;
                grads[side][i][k] = p - if k == class_ids[i] { 1.0 } else { 0.0 };
            }
        }
    }
    let [grad_speech_logits, grad_image_logits] = grads;
    Ok(DistinctiveLoss {
        total,
        grad_speech_logits,
        grad_image_logits,
    })
}

/// Unweighted sum of the two objectives.
pub fn sen_total_loss(matching: &MatchingLoss, distinctive: &DistinctiveLoss) -> f64 {
    matching.total + distinctive.total
}

/// Mask tensor `[n, n]` for a batch of labels.
pub fn mask_tensor(class_ids: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let n = class_ids.len();
    let flat: Vec<f64> = matching_mask(class_ids).into_iter().flatten().collect();
    Ok(Tensor::from_vec(flat, (n, n), device)?.to_dtype(dtype)?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Tensor form of the matching loss; returns `(L_m, L_{A-V}, L_{V-A})`.
pub fn matching_loss_tensor(speech: &Tensor, image: &Tensor, mask: &Tensor, beta: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let s = l2_normalize(speech)?.matmul(&l2_normalize(image)?.t()?)?;
    let logits = (s * beta)?;
    let diag = logits.diag()?;
    // |beta * S| <= beta, so exp stays finite for any sane beta.
    let e = (logits.exp()? * mask)?;
    let l_av = (e.sum(1)?.log()? - &diag)?.sum_all()?;
    let l_va = (e.sum(0)?.log()? - &diag)?.sum_all()?;
    Ok(((&l_av + &l_va)?, l_av, l_va))
}

trait Diag {
    fn diag(&self) -> candle_core::Result<Tensor>;
}

impl Diag for Tensor {
    fn diag(&self) -> candle_core::Result<Tensor> {
        let (n, _) = self.dims2()?;
        let eye = Tensor::eye(n, self.dtype(), self.device())?;
        (self * eye)?.sum(1)
    }
}

/// Tensor form of the distinctive loss.
pub fn distinctive_loss_tensor(speech_logits: &Tensor, image_logits: &Tensor, class_ids: &[usize]) -> Result<Tensor> {
    let (n, k) = speech_logits.dims2()?;
    let mut onehot = vec![0f32; n * k];
    for (i, &c) in class_ids.iter().enumerate() {
        if c >= k {
            return Err(Error::Validation(format!("class id {c} outside [0, {k})")));
        }
        onehot[i * k + c] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), speech_logits.device())?.to_dtype(speech_logits.dtype())?;
    let ls = (log_softmax(speech_logits)? * &onehot)?.sum_all()?;
    let lv = (log_softmax(image_logits)? * &onehot)?.sum_all()?;
    Ok((ls + lv)?.neg()?)
}
