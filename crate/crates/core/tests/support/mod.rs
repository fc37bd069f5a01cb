#![allow(dead_code)]
//! Helpers shared by the integration tests: finite differences and loss oracles.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use s2ig_core::rdg::RdgConfig;

pub fn tiny(scales: Vec<usize>) -> RdgConfig {
    RdgConfig {
        z_dim: 4,
        ca_dim: 3,
        ngf: 4,
        ndf: 4,
        rs_channels: 4,
        scales,
        batch_size: 2,
        ..RdgConfig::ci()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

pub fn set_entry(var: &Var, idx: usize, value: f64) {
    let mut v: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    v[idx] = value;
    var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
}

pub fn central_difference(var: &Var, idx: usize, h: f64, loss: &dyn Fn() -> Tensor) -> f64 {
    let x0: f64 = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
    set_entry(var, idx, x0 + h);
    let up = scalar(&loss());
    set_entry(var, idx, x0 - h);
    let down = scalar(&loss());
    set_entry(var, idx, x0);
    (up - down) / (2.0 * h)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        // both effectively zero
        return if (a - b).abs() < 1e-9 { 0.0 } else { f64::INFINITY };
    }
    (a - b).abs() / scale
}

/// Compares autograd partials with central differences (step 1e-4) on
/// `picks` random entries; returns the worst relative error.
///
/// Leaky ReLU makes the loss piecewise smooth. A stencil that straddles a kink
/// is recognised by failing at 1e-4 while agreeing at 1e-6; such picks are
/// redrawn, at most `4 * picks` times.
pub fn worst_relative_error(vars: &[Var], loss: &dyn Fn() -> Tensor, rng: &mut ChaCha8Rng, picks: usize) -> f64 {
    let grads = loss().backward().unwrap();
    let mut worst = 0.0f64;
    let (mut clean, mut kinks) = (0, 0);
    while clean < picks {
        let var = &vars[rng.random_range(0..vars.len())];
        let idx = rng.random_range(0..var.elem_count());
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx])
            .unwrap_or(0.0);
        let rel = relative_error(analytic, central_difference(var, idx, 1e-4, loss));
        if rel > 1e-3 && relative_error(analytic, central_difference(var, idx, 1e-6, loss)) < 1e-3 {
            kinks += 1;
            assert!(kinks <= 4 * picks, "too many non-smooth stencils");
            continue;
        }
        worst = worst.max(rel);
        clean += 1;
    }
    worst
}

/// Straight-line evaluation of the matching loss: no max-shifting, no shared code.
pub fn oracle_matching(speech: &[Vec<f64>], image: &[Vec<f64>], classes: &[usize], beta: f64) -> f64 {
    let n = classes.len();
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let keep = |i: usize, j: usize| i == j || classes[i] != classes[j];
    let mut loss = 0.0;
    for i in 0..n {
        let num = (beta * cos(&speech[i], &image[i])).exp();
        let den_av: f64 = (0..n).filter(|&j| keep(i, j)).map(|j| (beta * cos(&speech[i], &image[j])).exp()).sum();
        let den_va: f64 = (0..n).filter(|&j| keep(j, i)).map(|j| (beta * cos(&speech[j], &image[i])).exp()).sum();
        loss -= (num / den_av).ln() + (num / den_va).ln();
    }
    loss
}

pub fn oracle_distinctive(speech: &[Vec<f64>], image: &[Vec<f64>], classes: &[usize]) -> f64 {
    let ce = |row: &[f64], c: usize| {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        -(row[c].exp() / z).ln()
    };
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| ce(&speech[i], c) + ce(&image[i], c))
        .sum()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}
