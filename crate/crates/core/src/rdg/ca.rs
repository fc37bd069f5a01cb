//! Conditioning augmentation: a Gaussian around the speech condition.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Sample `c = mu + sigma * eps`.
    Train,
    /// Use `c = mu`.
    Infer,
}

/// Augmented condition for a batch: `[B, ca_dim]` tensors and the mean KL.
#[derive(Debug, Clone)]
pub struct ConditioningCode {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub c: Tensor,
    /// Batch mean of `KL(N(mu, sigma^2) || N(0, I))`.
    pub kl: Tensor,
}

/// Closed-form KL of a diagonal Gaussian against the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// Standard-normal tensor drawn from `rng`.
pub fn normal_tensor<R: Rng>(rng: &mut R, shape: (usize, usize), like: &Tensor) -> Result<Tensor> {
    let n = shape.0 * shape.1;
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}

#[derive(Debug, Clone)]
pub struct ConditioningAugmentation {
    fc: Linear,
    ca_dim: usize,
}

impl ConditioningAugmentation {
    pub fn new(ps: &mut ParamStore, name: &str, cond_dim: usize, ca_dim: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(ps, &format!("{name}.fc"), cond_dim, 2 * ca_dim)?,
            ca_dim,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.fc.in_dim()
    }

    pub fn forward<R: Rng>(&self, cond: &Tensor, mode: Mode, rng: &mut R) -> Result<ConditioningCode> {
        let (b, d) = cond.dims2()?;
        if d != self.cond_dim() {
            return Err(Error::Compatibility(format!(
                "condition has dimension {d}, augmentation expects {}",
                self.cond_dim()
            )));
        }
        let out = self.fc.forward(cond)?;
        let mu = out.narrow(1, 0, self.ca_dim)?;
        let logvar = out.narrow(1, self.ca_dim, self.ca_dim)?;
        let c = match mode {
            Mode::Infer => mu.clone(),
            Mode::Train => {
                let eps = normal_tensor(rng, (b, self.ca_dim), &mu)?;
                (&mu + ((&logvar * 0.5)?.exp()? * eps)?)?
            }
        };
        let kl = ((mu.sqr()? + logvar.exp()? - &logvar)? - 1.0)?
            .sum(1)?
            .mean(0)?
            .affine(0.5, 0.0)?;
        Ok(ConditioningCode { mu, logvar, c, kl })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_kl_cases() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        // Strictly convex in mu: midpoint below the chord.
        let f = |m: f64| kl_divergence(&[m], &[0.3]);
        assert!(f(0.5) < 0.5 * (f(-1.0) + f(2.0)));
    }

    #[test]
    fn tensor_kl_matches_closed_form_and_infer_is_deterministic() {
        let mut ps = ParamStore::new(1, DType::F64);
        let ca = ConditioningAugmentation::new(&mut ps, "ca", 5, 3).unwrap();
        let cond = Tensor::new(&[[0.2f64, -1.0, 0.5, 0.0, 1.5], [1.0, 1.0, -0.3, 0.2, 0.1]], &candle_core::Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ca.forward(&cond, Mode::Infer, &mut rng).unwrap();
        let b = ca.forward(&cond, Mode::Infer, &mut rng).unwrap();
        assert_eq!(a.c.to_vec2::<f64>().unwrap(), b.c.to_vec2::<f64>().unwrap());
        let mu: Vec<Vec<f64>> = a.mu.to_vec2().unwrap();
        let lv: Vec<Vec<f64>> = a.logvar.to_vec2().unwrap();
        let expected = (kl_divergence(&mu[0], &lv[0]) + kl_divergence(&mu[1], &lv[1])) / 2.0;
        assert!((a.kl.to_scalar::<f64>().unwrap() - expected).abs() < 1e-12);
        let t = ca.forward(&cond, Mode::Train, &mut rng).unwrap();
        assert_ne!(t.c.to_vec2::<f64>().unwrap(), mu);
    }
}
