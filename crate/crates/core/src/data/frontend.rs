//! Log-Mel filterbank front end.
//!
//! Frames are Hamming-windowed, zero-padded to the next power of two, and
//! turned into power spectra; a bank of triangular filters spaced evenly on
//! the HTK Mel scale then pools the spectrum into `num_mel` energies, and the
//! result is `ln(energy + floor)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Framing and filterbank parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mel: usize,
    /// Added to every filterbank energy before the logarithm.
    pub log_floor: f64,
    /// Per-utterance mean/variance normalization of each Mel channel.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel: 40,
            log_floor: 1e-10,
            normalize: false,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Number of frames produced for `len` samples, or `None` if shorter than one window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let win = self.window_samples();
        (len >= win).then(|| (len - win) / self.shift_samples() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::Validation("sample_rate_hz must be positive".into()));
        }
        if !(self.frame_length_ms > 0.0 && self.frame_shift_ms > 0.0) {
            return Err(Error::Validation(
                "frame_length_ms and frame_shift_ms must be positive".into(),
            ));
        }
        if self.window_samples() == 0 || self.shift_samples() == 0 {
            return Err(Error::Validation(
                "frame length/shift round to zero samples at this sample rate".into(),
            ));
        }
        if self.num_mel == 0 {
            return Err(Error::Validation("num_mel must be at least 1".into()));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::Validation("log_floor must be a positive finite value".into()));
        }
        Ok(())
    }
}

/// A log-Mel spectrogram stored frame-major: `data[t * num_mel + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f32>,
    num_frames: usize,
    num_mel: usize,
}

impl Spectrogram {
    pub fn new(data: Vec<f32>, num_frames: usize, num_mel: usize) -> Result<Self> {
        if num_frames == 0 || num_mel == 0 {
            return Err(Error::Shape("spectrogram must have at least one frame and one bin".into()));
        }
        if data.len() != num_frames * num_mel {
            return Err(Error::Shape(format!(
                "spectrogram data has {} values, expected {num_frames}x{num_mel}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            data,
            num_frames,
            num_mel,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_mel(&self) -> usize {
        self.num_mel
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.num_mel..(t + 1) * self.num_mel]
    }

    /// Mean over time of every Mel channel.
    pub fn mean_frame(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.num_mel];
        for t in 0..self.num_frames {
            for (a, v) in acc.iter_mut().zip(self.frame(t)) {
                *a += *v as f64;
            }
        }
        acc.into_iter()
            .map(|a| (a / self.num_frames as f64) as f32)
            .collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular Mel filterbank over the `fft_size / 2 + 1` non-negative frequency bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Row-major `[num_mel][num_bins]`.
    weights: Vec<f64>,
    num_mel: usize,
    num_bins: usize,
    /// `num_mel + 2` corner frequencies in Hz; filter `m` spans `edges[m]..edges[m + 2]`.
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(num_mel: usize, fft_size: usize, sample_rate_hz: u32) -> Self {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let num_bins = fft_size / 2 + 1;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..num_mel + 2)
            .map(|i| mel_to_hz(top * i as f64 / (num_mel + 1) as f64))
            .collect();
        let bin_hz = sample_rate_hz as f64 / fft_size as f64;

        let mut weights = vec![0f64; num_mel * num_bins];
        for m in 0..num_mel {
            let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..num_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[m * num_bins + k] = w;
            }
        }
        Self {
            weights,
            num_mel,
            num_bins,
            edges_hz,
        }
    }

    pub fn num_mel(&self) -> usize {
        self.num_mel
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.num_bins..(m + 1) * self.num_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Reusable log-Mel extractor; holds the FFT plan, window and filterbank.
pub struct LogMelExtractor {
    config: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl LogMelExtractor {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        let win = config.window_samples();
        let window = (0..win)
            .map(|n| {
                if win == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1) as f64).cos()
                }
            })
            .collect();
        let n_fft = config.fft_size();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let filterbank = MelFilterbank::new(config.num_mel, n_fft, config.sample_rate_hz);
        Ok(Self {
            config,
            window,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, waveform: &[f32]) -> Result<Spectrogram> {
        if let Some(i) = waveform.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("waveform sample {i} is not finite")));
        }
        let cfg = &self.config;
        let num_frames = cfg.num_frames(waveform.len()).ok_or_else(|| {
            Error::Validation(format!(
                "waveform has {} samples, fewer than one {} ms frame ({} samples)",
                waveform.len(),
                cfg.frame_length_ms,
                cfg.window_samples()
            ))
        })?;
        let win = cfg.window_samples();
        let shift = cfg.shift_samples();
        let n_fft = cfg.fft_size();
        let num_mel = cfg.num_mel;

        let mut buf = vec![Complex::new(0f64, 0f64); n_fft];
        let mut scratch = vec![Complex::new(0f64, 0f64); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0f64; self.filterbank.num_bins()];
        let mut energies = vec![0f64; num_mel];
        let mut out = Vec::with_capacity(num_frames * num_mel);

        for t in 0..num_frames {
            let start = t * shift;
            for (n, c) in buf.iter_mut().enumerate() {
                *c = if n < win {
                    Complex::new(waveform[start + n] as f64 * self.window[n], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut energies);
            out.extend(energies.iter().map(|e| (e + cfg.log_floor).ln() as f32));
        }

        if cfg.normalize {
            normalize_channels(&mut out, num_frames, num_mel);
        }
        Spectrogram::new(out, num_frames, num_mel)
    }
}

fn normalize_channels(data: &mut [f32], num_frames: usize, num_mel: usize) {
    for m in 0..num_mel {
        let vals = (0..num_frames).map(|t| data[t * num_mel + m] as f64);
        let mean = vals.clone().sum::<f64>() / num_frames as f64;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / num_frames as f64;
        let std = var.sqrt().max(1e-5);
        for t in 0..num_frames {
            let v = &mut data[t * num_mel + m];
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
}

/// One-shot convenience wrapper around [`LogMelExtractor`].
pub fn compute_log_mel(
    waveform: &[f32],
    sample_rate_hz: u32,
    config: &FrontendConfig,
) -> Result<Spectrogram> {
    let cfg = FrontendConfig {
        sample_rate_hz,
        ..config.clone()
    };
    LogMelExtractor::new(cfg)?.compute(waveform)
}
