//! 2-D convolution as a custom tensor op.
//!
//! Forward and backward both lower to im2col + GEMM over the whole batch, so
//! the input gradient never goes through a transposed convolution.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn new(x: &[usize], k: &[usize], g: ConvGeometry) -> candle_core::Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (x, k) else {
            candle_core::bail!("conv2d expects 4-d input and kernel, got {x:?} and {k:?}");
        };
        if kc != c {
            candle_core::bail!("conv2d channel mismatch: input has {c}, kernel expects {kc}");
        }
        let (sh, sw) = g.stride;
        let (ph, pw) = g.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}");
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

trait Float: Copy + Default + std::ops::AddAssign + 'static {
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);
}

macro_rules! impl_float {
    ($t:ty, $f:path) => {
        impl Float for $t {
            /// `c[m,n] (+)= op(a)[m,k] * op(b)[k,n]`, all row-major.
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: slice lengths checked above; strides describe row-major
                // (optionally transposed) matrices lying inside those slices.
                unsafe {
                    $f(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Unfolds the whole batch into `[K, N * P]`.
fn im2col<T: Float>(x: &[T], d: &Dims, g: ConvGeometry) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let np = d.n * p;
    let mut col = vec![T::default(); k * np];
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for ci in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst_row = &mut col[row * np..(row + 1) * np];
                for b in 0..d.n {
                    let src = &x[(b * d.c + ci) * d.h * d.w..(b * d.c + ci + 1) * d.h * d.w];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    for oy in 0..d.ho {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for ox in 0..d.wo {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[oy * d.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds `[K, N * P]` back onto `[N, C, H, W]`, summing overlaps.
fn col2im<T: Float>(col: &[T], d: &Dims, g: ConvGeometry) -> Vec<T> {
    let p = d.p();
    let np = d.n * p;
    let mut x = vec![T::default(); d.n * d.c * d.h * d.w];
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for ci in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src_row = &col[row * np..(row + 1) * np];
                for b in 0..d.n {
                    let dst = &mut x[(b * d.c + ci) * d.h * d.w..(b * d.c + ci + 1) * d.h * d.w];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oy in 0..d.ho {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.wo {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[iy as usize * d.w + ix as usize] += src[oy * d.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, N*P]` -> `[N, O, P]`
fn to_batch_major<T: Float>(y: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::default(); n * o * p];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..(b * o + oc + 1) * p].copy_from_slice(&y[oc * n * p + b * p..oc * n * p + (b + 1) * p]);
        }
    }
    out
}

/// `[N, O, P]` -> `[O, N*P]`
fn to_channel_major<T: Float>(y: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::default(); n * o * p];
    for b in 0..n {
        for oc in 0..o {
            out[oc * n * p + b * p..oc * n * p + (b + 1) * p].copy_from_slice(&y[(b * o + oc) * p..(b * o + oc + 1) * p]);
        }
    }
    out
}

fn forward<T: Float>(x: &[T], w: &[T], d: &Dims, g: ConvGeometry) -> Vec<T> {
    let col = im2col(x, d, g);
    let np = d.n * d.p();
    let mut y = vec![T::default(); d.o * np];
    T::gemm(d.o, d.k(), np, w, false, &col, false, &mut y, false);
    to_batch_major(&y, d.n, d.o, d.p())
}

fn backward<T: Float>(x: &[T], w: &[T], gy: &[T], d: &Dims, g: ConvGeometry) -> (Vec<T>, Vec<T>) {
    let col = im2col(x, d, g);
    let np = d.n * d.p();
    let gy = to_channel_major(gy, d.n, d.o, d.p());
    let mut gw = vec![T::default(); d.o * d.k()];
    T::gemm(d.o, np, d.k(), &gy, false, &col, true, &mut gw, false);
    let mut gcol = vec![T::default(); d.k() * np];
    T::gemm(d.k(), d.o, np, w, true, &gy, false, &mut gcol, false);
    (col2im(&gcol, d, g), gw)
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("conv2d requires contiguous operands"),
    }
}

struct Conv2dOp(ConvGeometry);

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "s2ig-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = Dims::new(l1.dims(), l2.dims(), self.0)?;
        let shape = Shape::from((d.n, d.o, d.ho, d.wo));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(forward(contiguous(x, l1)?, contiguous(w, l2)?, &d, self.0))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(forward(contiguous(x, l1)?, contiguous(w, l2)?, &d, self.0))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = Dims::new(x.dims(), w.dims(), self.0)?;
        let dev = x.device();
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (gx, gw) = backward::<f32>(&flat(x)?, &flat(w)?, &flat(grad)?, &d, self.0);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            DType::F64 => {
                let (gx, gw) = backward::<f64>(&flat(x)?, &flat(w)?, &flat(grad)?, &d, self.0);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            dt => candle_core::bail!("conv2d backward does not support {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

fn flat<T: candle_core::WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// `[N, C, H, W] * [O, C, KH, KW] -> [N, O, HO, WO]` (no bias).
pub fn conv2d(x: &Tensor, kernel: &Tensor, geometry: ConvGeometry) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2dOp(geometry))
}
