//! Differentiable MFCC front-end.
//!
//! Forward pipeline per frame: slice -> Hann window -> real DFT -> power
//! spectrum -> mel filterbank -> log with floor -> orthonormal DCT-II ->
//! first `n_coeffs` coefficients. The backward pass composes the exact
//! adjoint of every stage, mapping feature gradients back to raw-sample
//! gradients (the attack needs d(loss)/d(sample)).
//!
//! The DFT is an explicit linear transform (O(N^2) per frame, N = 512) so
//! that the adjoint is trivially exact; frames are processed in parallel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::par;

/// Front-end parameters. Defaults are a reasonable 16 kHz speech setup:
/// 32 ms frames with 50% hop, 26 mel filters, 13 cepstral coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: f64,
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000.0,
            frame_len: 512,
            hop: 256,
            n_mels: 26,
            n_coeffs: 13,
            mel_fmin: 0.0,
            mel_fmax: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.frame_len < 2 {
            return bad(format!("frame_len {} < 2", self.frame_len));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return bad(format!("hop {} not in 1..=frame_len", self.hop));
        }
        if self.n_mels == 0 || self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return bad(format!(
                "need 1 <= n_coeffs ({}) <= n_mels ({})",
                self.n_coeffs, self.n_mels
            ));
        }
        if !(self.mel_fmin >= 0.0 && self.mel_fmax > self.mel_fmin) {
            return bad(format!(
                "mel band [{}, {}] is invalid",
                self.mel_fmin, self.mel_fmax
            ));
        }
        if self.mel_fmax > self.sample_rate / 2.0 {
            return bad(format!(
                "mel_fmax {} above Nyquist {}",
                self.mel_fmax,
                self.sample_rate / 2.0
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad(format!("log_floor {} must be positive", self.log_floor));
        }
        Ok(())
    }

    /// Number of non-negative frequency bins of the real DFT.
    pub fn n_fft_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// T = floor((n_samples - frame_len)/hop) + 1; requires one full frame.
    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.frame_len {
            return Err(Error::TooShort {
                got: n_samples,
                need: self.frame_len,
            });
        }
        Ok((n_samples - self.frame_len) / self.hop + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels` x `n_fft_bins`. Each triangle has
/// peak value 1 at its center frequency; centers are equally spaced on the
/// mel scale between `mel_fmin` and `mel_fmax`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Result<Mat> {
    cfg.validate()?;
    let edges = mel_edge_frequencies(cfg);
    let bins = cfg.n_fft_bins();
    let bin_hz = cfg.sample_rate / cfg.frame_len as f64;
    let mut filters = Mat::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = filters.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            *w = rising.min(falling).max(0.0);
        }
    }
    Ok(filters)
}

/// The `n_mels + 2` Hz edge points of the triangle filters (equally spaced
/// in mel between fmin and fmax). Filter `m` spans edges `m..=m+2` with its
/// center at edge `m + 1`.
pub fn mel_edge_frequencies(cfg: &MfccConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.mel_fmin);
    let mel_hi = hz_to_mel(cfg.mel_fmax);
    let n_points = cfg.n_mels + 2;
    (0..n_points)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect()
}

/// T x n_coeffs feature matrix together with the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Mat,
    config: MfccConfig,
}

impl FeatureMatrix {
    /// Wrap an existing T x n_coeffs matrix (synthetic features, tests).
    pub fn from_values(values: Mat, config: MfccConfig) -> Result<Self> {
        config.validate()?;
        if values.cols() != config.n_coeffs {
            return Err(Error::ShapeMismatch(format!(
                "{} columns, config wants {}",
                values.cols(),
                config.n_coeffs
            )));
        }
        if !values.is_finite() {
            return Err(Error::InvalidConfig("non-finite feature values".into()));
        }
        Ok(Self { values, config })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }
}

/// Cached forward intermediates sufficient for the backward pass: per-frame
/// complex spectra and pre-log mel energies.
#[derive(Clone, Debug)]
pub struct MfccTape {
    re: Mat,          // T x bins
    im: Mat,          // T x bins
    mel_energy: Mat,  // T x n_mels, before the log floor
    n_samples: usize,
    config: MfccConfig,
}

impl MfccTape {
    pub fn frames(&self) -> usize {
        self.re.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    /// Pre-log mel energies of one frame.
    pub fn mel_energies(&self, frame: usize) -> &[f64] {
        self.mel_energy.row(frame)
    }
}

/// Precomputed transform tables for one configuration. Building this costs a
/// few hundred thousand trig evaluations, so hot paths construct it once and
/// reuse it across calls.
#[derive(Clone, Debug)]
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    cos_t: Mat, // bins x frame_len
    sin_t: Mat, // bins x frame_len
    filters: Mat, // n_mels x bins
    dct: Mat,   // n_coeffs x n_mels, orthonormal rows
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_len;
        let bins = cfg.n_fft_bins();
        // periodic Hann
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();
        let cos_t = Mat::from_rows(bins, n, |k, row| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (2.0 * PI * k as f64 * i as f64 / n as f64).cos();
            }
        });
        let sin_t = Mat::from_rows(bins, n, |k, row| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (2.0 * PI * k as f64 * i as f64 / n as f64).sin();
            }
        });
        let filters = mel_filterbank(&cfg)?;
        let m = cfg.n_mels as f64;
        let dct = Mat::from_rows(cfg.n_coeffs, cfg.n_mels, |j, row| {
            let scale = if j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            for (i, v) in row.iter_mut().enumerate() {
                *v = scale * (PI * (i as f64 + 0.5) * j as f64 / m).cos();
            }
        });
        Ok(Self {
            cfg,
            window,
            cos_t,
            sin_t,
            filters,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Mat {
        &self.filters
    }

    /// Extract features and record the tape needed for `backward`.
    pub fn forward(&self, samples: &[f64]) -> Result<(FeatureMatrix, MfccTape)> {
        let cfg = &self.cfg;
        let frames = cfg.frame_count(samples.len())?;
        let bins = cfg.n_fft_bins();

        struct FrameOut {
            coeffs: Vec<f64>,
            re: Vec<f64>,
            im: Vec<f64>,
            energy: Vec<f64>,
        }

        let per_frame = par::map_range(frames, |t| {
            let start = t * cfg.hop;
            let frame = &samples[start..start + cfg.frame_len];
            let windowed: Vec<f64> = frame
                .iter()
                .zip(&self.window)
                .map(|(x, w)| x * w)
                .collect();
            let mut re = vec![0.0; bins];
            let mut im = vec![0.0; bins];
            for k in 0..bins {
                re[k] = dot(self.cos_t.row(k), &windowed);
                im[k] = -dot(self.sin_t.row(k), &windowed);
            }
            let power: Vec<f64> = re
                .iter()
                .zip(&im)
                .map(|(r, i)| r * r + i * i)
                .collect();
            let energy: Vec<f64> = (0..cfg.n_mels)
                .map(|m| dot(self.filters.row(m), &power))
                .collect();
            let log_energy: Vec<f64> = energy.iter().map(|&e| e.max(cfg.log_floor).ln()).collect();
            let coeffs: Vec<f64> = (0..cfg.n_coeffs)
                .map(|j| dot(self.dct.row(j), &log_energy))
                .collect();
            FrameOut {
                coeffs,
                re,
                im,
                energy,
            }
        });

        let mut values = Mat::zeros(frames, cfg.n_coeffs);
        let mut re = Mat::zeros(frames, bins);
        let mut im = Mat::zeros(frames, bins);
        let mut mel_energy = Mat::zeros(frames, cfg.n_mels);
        for (t, f) in per_frame.into_iter().enumerate() {
            values.row_mut(t).copy_from_slice(&f.coeffs);
            re.row_mut(t).copy_from_slice(&f.re);
            im.row_mut(t).copy_from_slice(&f.im);
            mel_energy.row_mut(t).copy_from_slice(&f.energy);
        }
        Ok((
            FeatureMatrix {
                values,
                config: *cfg,
            },
            MfccTape {
                re,
                im,
                mel_energy,
                n_samples: samples.len(),
                config: *cfg,
            },
        ))
    }

    /// Map d(objective)/d(features) back to d(objective)/d(samples): DCT
    /// transpose, 1/u through the log (zero where the floor was active), mel
    /// transpose, power-spectrum adjoint through the real DFT, window, and
    /// overlap-add across frames.
    pub fn backward(&self, tape: &MfccTape, grad_features: &Mat) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if tape.config != *cfg {
            return Err(Error::ShapeMismatch(
                "tape produced under a different config".into(),
            ));
        }
        let frames = tape.frames();
        if grad_features.shape() != (frames, cfg.n_coeffs) {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?}, expected ({frames}, {})",
                grad_features.shape(),
                cfg.n_coeffs
            )));
        }
        let bins = cfg.n_fft_bins();

        let frame_grads = par::map_range(frames, |t| {
            let g_coeffs = grad_features.row(t);
            // DCT-II adjoint (transpose of the truncated orthonormal matrix)
            let mut g_log = vec![0.0; cfg.n_mels];
            for j in 0..cfg.n_coeffs {
                let gj = g_coeffs[j];
                if gj == 0.0 {
                    continue;
                }
                for (m, g) in g_log.iter_mut().enumerate() {
                    *g += self.dct.get(j, m) * gj;
                }
            }
            // log with floor mask
            let energy = tape.mel_energy.row(t);
            let g_energy: Vec<f64> = g_log
                .iter()
                .zip(energy)
                .map(|(g, &e)| if e > cfg.log_floor { g / e } else { 0.0 })
                .collect();
            // mel adjoint
            let mut g_power = vec![0.0; bins];
            for m in 0..cfg.n_mels {
                let ge = g_energy[m];
                if ge == 0.0 {
                    continue;
                }
                let filt = self.filters.row(m);
                for (k, g) in g_power.iter_mut().enumerate() {
                    *g += filt[k] * ge;
                }
            }
            // power spectrum adjoint: d(re^2 + im^2)
            let re = tape.re.row(t);
            let im = tape.im.row(t);
            let g_re: Vec<f64> = (0..bins).map(|k| 2.0 * re[k] * g_power[k]).collect();
            let g_im: Vec<f64> = (0..bins).map(|k| 2.0 * im[k] * g_power[k]).collect();
            // real-DFT adjoint back to the windowed frame
            let mut g_frame = vec![0.0; cfg.frame_len];
            for k in 0..bins {
                let (gr, gi) = (g_re[k], g_im[k]);
                if gr == 0.0 && gi == 0.0 {
                    continue;
                }
                let cos_row = self.cos_t.row(k);
                let sin_row = self.sin_t.row(k);
                for (i, g) in g_frame.iter_mut().enumerate() {
                    *g += cos_row[i] * gr - sin_row[i] * gi;
                }
            }
            // window adjoint
            for (g, w) in g_frame.iter_mut().zip(&self.window) {
                *g *= w;
            }
            g_frame
        });

        // overlap-add in frame order
        let mut g_samples = vec![0.0; tape.n_samples];
        for (t, g_frame) in frame_grads.iter().enumerate() {
            let start = t * cfg.hop;
            for (i, g) in g_frame.iter().enumerate() {
                g_samples[start + i] += g;
            }
        }
        Ok(g_samples)
    }
}

/// One-shot feature extraction; builds the transform tables on the fly.
pub fn mfcc_forward(samples: &[f64], cfg: &MfccConfig) -> Result<(FeatureMatrix, MfccTape)> {
    Mfcc::new(*cfg)?.forward(samples)
}

/// One-shot backward pass matching `mfcc_forward`.
pub fn mfcc_backward(tape: &MfccTape, grad_features: &Mat) -> Result<Vec<f64>> {
    Mfcc::new(tape.config)?.backward(tape, grad_features)
}
