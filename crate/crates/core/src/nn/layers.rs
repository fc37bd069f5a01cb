use candle_core::{Tensor, Var, D};

use super::conv::{conv2d, ConvGeometry};
use super::ops::sigmoid;
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[out_dim], bound)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `[.., in] -> [.., out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor();
        let y = match x.rank() {
            2 => x.matmul(&w.t()?)?,
            _ => x.broadcast_matmul(&w.t()?)?,
        };
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    geometry: ConvGeometry,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[out_ch], bound)?,
            geometry: ConvGeometry {
                stride: (stride, stride),
                padding: (padding, padding),
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.geometry)?;
        let o = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, o, 1, 1))?)?)
    }
}

/// Same-length 1-D convolution over time: `[B, C, T] -> [B, O, T]` (odd kernels).
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Var,
    bias: Var,
    geometry: ConvGeometry,
}

impl Conv1d {
    pub fn new(ps: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[out_ch, in_ch, 1, kernel], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[out_ch], bound)?,
            geometry: ConvGeometry {
                stride: (1, 1),
                padding: (0, kernel / 2),
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(&x.unsqueeze(2)?, self.weight.as_tensor(), self.geometry)?.squeeze(2)?;
        let o = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, o, 1))?)?)
    }
}

/// Gated recurrent unit with reset gate applied after the hidden projection.
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    hidden_dim: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(ps, &format!("{name}.input"), in_dim, 3 * hidden_dim)?,
            hidden: Linear::new(ps, &format!("{name}.hidden"), hidden_dim, 3 * hidden_dim)?,
            hidden_dim,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Runs over `[B, T, in]`; `mask` is `[B, T]` with 1 on real frames.
    /// Masked steps carry the previous state unchanged; `reverse` walks
    /// from the last frame to the first. Returns `[B, T, hidden]`.
    pub fn scan(&self, x: &Tensor, mask: &Tensor, reverse: bool) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let hd = self.hidden_dim;
        let projected = self.input.forward(x)?;
        let mut h = Tensor::zeros((b, hd), x.dtype(), x.device())?;
        let mut outputs: Vec<Option<Tensor>> = vec![None; t];
        let steps: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t).rev())
        } else {
            Box::new(0..t)
        };
        for step in steps {
            let gi = projected.narrow(1, step, 1)?.squeeze(1)?;
            let gh = self.hidden.forward(&h)?;
            let r = sigmoid(&(gi.narrow(1, 0, hd)? + gh.narrow(1, 0, hd)?)?)?;
            let z = sigmoid(&(gi.narrow(1, hd, hd)? + gh.narrow(1, hd, hd)?)?)?;
            let n = (gi.narrow(1, 2 * hd, hd)? + (r * gh.narrow(1, 2 * hd, hd)?)?)?.tanh()?;
            let candidate = ((z.ones_like()? - &z)? * n)?.add(&(z * &h)?)?;
            let m = mask.narrow(1, step, 1)?;
            h = (candidate.broadcast_mul(&m)? + h.broadcast_mul(&(m.ones_like()? - &m)?)?)?;
            outputs[step] = Some(h.clone());
        }
        let outputs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// Bidirectional GRU layer: `[B, T, in] -> [B, T, 2 * hidden]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    forward: GruCell,
    backward: GruCell,
}

impl BiGru {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            forward: GruCell::new(ps, &format!("{name}.fwd"), in_dim, hidden_dim)?,
            backward: GruCell::new(ps, &format!("{name}.bwd"), in_dim, hidden_dim)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden_dim()
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let f = self.forward.scan(x, mask, false)?;
        let b = self.backward.scan(x, mask, true)?;
        Ok(Tensor::cat(&[f, b], D::Minus1)?)
    }
}
