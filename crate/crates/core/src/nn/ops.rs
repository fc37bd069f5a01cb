//! Differentiable helpers built only from primitive tensor ops.

use candle_core::{DType, Tensor, D};

use crate::error::Result;

/// Logistic function via `tanh`, which stays finite for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Scales each spatial position of `[B, C, H, W]` (or each row of `[B, C]`)
/// to unit mean square across channels.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let ms = (x.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
    Ok(x.broadcast_div(&ms)?)
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax over the last dimension restricted to entries where `mask` is 1.
/// Masked entries come out exactly 0.
pub fn masked_softmax(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let neg = ((mask.ones_like()? - mask)? * -1e4)?;
    let s = ((scores * mask)? + neg)?;
    let max = s.max_keepdim(D::Minus1)?.detach();
    let e = (s.broadcast_sub(&max)?.exp()? * mask)?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

/// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
pub fn upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Non-overlapping average pooling of `[B, C, H, W]` by an integer factor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)?)
}

/// Broadcasts a `[B, D]` code over a `[h, w]` grid.
pub fn replicate_spatial(code: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, d) = code.dims2()?;
    Ok(code.reshape((b, d, 1, 1))?.broadcast_as((b, d, h, w))?.contiguous()?)
}

/// `[B, T]` mask with ones on the first `lengths[b]` steps.
pub fn length_mask(lengths: &[usize], max_len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut m = vec![0f32; lengths.len() * max_len];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(max_len) {
            m[b * max_len + t] = 1.0;
        }
    }
    Ok(Tensor::from_vec(m, (lengths.len(), max_len), device)?.to_dtype(dtype)?)
}

/// Mean of `-ln(clamp(p, eps, 1 - eps))`; also returns how many entries hit the clamp.
pub fn clamped_neg_log(p: &Tensor, eps: f64) -> Result<(Tensor, usize)> {
    let saturated = {
        let v: Vec<f64> = p.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        v.iter().filter(|&&x| !(eps..=1.0 - eps).contains(&x)).count()
    };
    Ok((p.clamp(eps, 1.0 - eps)?.log()?.neg()?.mean_all()?, saturated))
}
