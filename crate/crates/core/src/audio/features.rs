use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, AudioMetric};
use crate::error::{Error, Result};

/// `m(f) = 1127 ln(1 + f/700)`.
pub fn mel_scale(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::Domain(format!("frequency must be >= 0, got {f}")));
    }
    Ok(mel(f))
}

fn mel(f: f64) -> f64 {
    1127.0 * (f / 700.0).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub bands: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub window: usize,
    pub fft_length: usize,
    pub step: usize,
    pub log_floor: f64,
    pub apply_dct: bool,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            bands: 80,
            f_min: 80.0,
            f_max: 7600.0,
            window: 1024,
            fft_length: 1024,
            step: 256,
            log_floor: 1e-6,
            apply_dct: false,
        }
    }
}

impl FeatureParams {
    /// Number of analysis frames for a clip of `len` samples (no end padding).
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.step + 1
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.bands == 0 || self.step == 0 || self.window == 0 {
            return Err(Error::Config(
                "bands, step and window must be positive".into(),
            ));
        }
        if self.window > self.fft_length {
            return Err(Error::Config(format!(
                "window {} exceeds fft length {}",
                self.window, self.fft_length
            )));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max < nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max < {nyquist} Hz, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// Time x band matrix of log-mel energies (or their cosine transform).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    frames: Vec<f64>,
    n_frames: usize,
    n_bands: usize,
    pub params: FeatureParams,
}

impl FeatureFrame {
    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames, self.n_bands)
    }

    /// Row-major `T x B` values.
    pub fn as_slice(&self) -> &[f64] {
        &self.frames
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.frames
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_bands..(t + 1) * self.n_bands]
    }
}

impl AsRef<[f64]> for FeatureFrame {
    fn as_ref(&self) -> &[f64] {
        &self.frames
    }
}

/// Intermediate values of one forward pass, needed by [`FeatureExtractor::backward`].
#[derive(Debug, Clone)]
pub struct FeatureCache {
    len: usize,
    spectra: Vec<Complex<f64>>,
    magnitudes: Vec<f64>,
    mel: Vec<f64>,
}

/// Precomputed window, filterbank and FFT plans for one parameter set and
/// sample rate.
pub struct FeatureExtractor {
    params: FeatureParams,
    sample_rate: u32,
    window: Vec<f64>,
    /// `n_bins x bands`, row-major.
    mel_weights: Vec<f64>,
    /// `bands x bands` orthonormal DCT-II, row `k` is basis `k`.
    dct: Option<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("params", &self.params)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl FeatureExtractor {
    pub fn new(params: FeatureParams, sample_rate: u32) -> Result<Self> {
        params.validate(sample_rate)?;
        let n = params.window;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
            .collect();
        let mel_weights = mel_filterbank(&params, sample_rate);
        let dct = params.apply_dct.then(|| dct_matrix(params.bands));
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(params.fft_length);
        let ifft = planner.plan_fft_inverse(params.fft_length);
        Ok(Self {
            params,
            sample_rate,
            window,
            mel_weights,
            dct,
            fft,
            ifft,
        })
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Filterbank weights, `n_bins x bands` row-major.
    pub fn mel_weights(&self) -> &[f64] {
        &self.mel_weights
    }

    /// Center frequency of each band in Hz.
    pub fn band_centers_hz(&self) -> Vec<f64> {
        band_edges_mel(&self.params)[1..=self.params.bands]
            .iter()
            .map(|m| 700.0 * ((m / 1127.0).exp() - 1.0))
            .collect()
    }

    pub fn extract(&self, samples: &[f64]) -> Result<FeatureFrame> {
        Ok(self.extract_cached(samples)?.0)
    }

    pub fn extract_cached(&self, samples: &[f64]) -> Result<(FeatureFrame, FeatureCache)> {
        let p = &self.params;
        if samples.len() < p.window {
            return Err(Error::Length {
                len: samples.len(),
                min: p.window,
            });
        }
        let n_frames = p.n_frames(samples.len());
        let n_bins = p.n_bins();
        let bands = p.bands;

        let mut spectra = Vec::with_capacity(n_frames * n_bins);
        let mut magnitudes = Vec::with_capacity(n_frames * n_bins);
        let mut mel = vec![0.0; n_frames * bands];
        let mut buf = vec![Complex::new(0.0, 0.0); p.fft_length];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];

        for t in 0..n_frames {
            let start = t * p.step;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < p.window {
                    Complex::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            let mel_row = &mut mel[t * bands..(t + 1) * bands];
            for (k, x) in buf[..n_bins].iter().enumerate() {
                let mag = x.norm();
                spectra.push(*x);
                magnitudes.push(mag);
                if mag != 0.0 {
                    let w = &self.mel_weights[k * bands..(k + 1) * bands];
                    for (m, wk) in mel_row.iter_mut().zip(w) {
                        *m += wk * mag;
                    }
                }
            }
        }

        let mut frames: Vec<f64> = mel.iter().map(|m| (m + p.log_floor).ln()).collect();
        if let Some(dct) = &self.dct {
            for row in frames.chunks_mut(bands) {
                let logmel = row.to_vec();
                for (k, out) in row.iter_mut().enumerate() {
                    *out = dct[k * bands..(k + 1) * bands]
                        .iter()
                        .zip(&logmel)
                        .map(|(c, v)| c * v)
                        .sum();
                }
            }
        }

        let frame = FeatureFrame {
            frames,
            n_frames,
            n_bands: bands,
            params: p.clone(),
        };
        let cache = FeatureCache {
            len: samples.len(),
            spectra,
            magnitudes,
            mel,
        };
        Ok((frame, cache))
    }

    /// Vector-Jacobian product: maps `∂L/∂features` (row-major `T x B`) to
    /// `∂L/∂samples`. Bins with zero magnitude contribute the zero subgradient.
    pub fn backward(&self, cache: &FeatureCache, grad: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let n_bins = p.n_bins();
        let bands = p.bands;
        let n_frames = cache.mel.len() / bands;
        assert_eq!(grad.len(), n_frames * bands, "feature gradient shape");

        let mut out = vec![0.0; cache.len];
        let mut buf = vec![Complex::new(0.0, 0.0); p.fft_length];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        let mut g_log = vec![0.0; bands];
        let mut g_mag = vec![0.0; n_bins];

        for t in 0..n_frames {
            let g_row = &grad[t * bands..(t + 1) * bands];
            match &self.dct {
                Some(dct) => {
                    g_log.iter_mut().for_each(|g| *g = 0.0);
                    for (k, gk) in g_row.iter().enumerate() {
                        for (gl, c) in g_log.iter_mut().zip(&dct[k * bands..(k + 1) * bands]) {
                            *gl += gk * c;
                        }
                    }
                }
                None => g_log.copy_from_slice(g_row),
            }
            for (b, gl) in g_log.iter_mut().enumerate() {
                *gl /= cache.mel[t * bands + b] + p.log_floor;
            }
            for (k, gm) in g_mag.iter_mut().enumerate() {
                *gm = self.mel_weights[k * bands..(k + 1) * bands]
                    .iter()
                    .zip(&g_log)
                    .map(|(w, g)| w * g)
                    .sum();
            }
            // ∂|X_k|/∂frame_n = Re(conj(X_k) e^{-iθkn}) / |X_k|, summed over the
            // one-sided bins: Re(Σ_k Z_k e^{+iθkn}) with Z_k = g_k X_k / |X_k|.
            for c in buf.iter_mut() {
                *c = Complex::new(0.0, 0.0);
            }
            for k in 0..n_bins {
                let mag = cache.magnitudes[t * n_bins + k];
                if mag > 0.0 {
                    buf[k] = cache.spectra[t * n_bins + k] * (g_mag[k] / mag);
                }
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * p.step;
            for i in 0..p.window {
                out[start + i] += buf[i].re * self.window[i];
            }
        }
        out
    }
}

fn band_edges_mel(p: &FeatureParams) -> Vec<f64> {
    let lo = mel(p.f_min);
    let hi = mel(p.f_max);
    let count = p.bands + 2;
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Triangular filters spaced uniformly in mels; the DC bin carries no weight.
fn mel_filterbank(p: &FeatureParams, sample_rate: u32) -> Vec<f64> {
    let n_bins = p.n_bins();
    let nyquist = sample_rate as f64 / 2.0;
    let edges = band_edges_mel(p);
    let mut weights = vec![0.0; n_bins * p.bands];
    for k in 1..n_bins {
        let m = mel(nyquist * k as f64 / (n_bins - 1) as f64);
        for b in 0..p.bands {
            let (lo, center, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let rising = (m - lo) / (center - lo);
            let falling = (hi - m) / (hi - center);
            weights[k * p.bands + b] = rising.min(falling).max(0.0);
        }
    }
    weights
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = scale
                * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

pub fn extract_features(clip: &AudioClip, params: &FeatureParams) -> Result<FeatureFrame> {
    FeatureExtractor::new(params.clone(), clip.sample_rate)?.extract(&clip.samples)
}

fn check_pair(y1: &AudioClip, y2: &AudioClip) -> Result<()> {
    if y1.len() != y2.len() {
        return Err(Error::Shape(format!(
            "clip lengths differ: {} vs {}",
            y1.len(),
            y2.len()
        )));
    }
    if y1.sample_rate != y2.sample_rate {
        return Err(Error::Shape(format!(
            "sample rates differ: {} vs {}",
            y1.sample_rate, y2.sample_rate
        )));
    }
    Ok(())
}

pub fn audio_distance(
    y1: &AudioClip,
    y2: &AudioClip,
    mode: AudioMetric,
    params: &FeatureParams,
) -> Result<f64> {
    check_pair(y1, y2)?;
    match mode {
        AudioMetric::L2 => Ok(y1
            .samples
            .iter()
            .zip(&y2.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()),
        AudioMetric::Mfcc => {
            let fx = FeatureExtractor::new(params.clone(), y1.sample_rate)?;
            let f1 = fx.extract(&y1.samples)?;
            let f2 = fx.extract(&y2.samples)?;
            Ok(f1
                .as_slice()
                .iter()
                .zip(f2.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum())
        }
    }
}

/// Distance and its gradient with respect to the samples of `y1`.
pub fn audio_distance_with_grad(
    y1: &AudioClip,
    y2: &AudioClip,
    mode: AudioMetric,
    params: &FeatureParams,
) -> Result<(f64, Vec<f64>)> {
    check_pair(y1, y2)?;
    match mode {
        AudioMetric::L2 => {
            let d = audio_distance(y1, y2, mode, params)?;
            let grad = if d > 0.0 {
                y1.samples
                    .iter()
                    .zip(&y2.samples)
                    .map(|(a, b)| (a - b) / d)
                    .collect()
            } else {
                vec![0.0; y1.len()]
            };
            Ok((d, grad))
        }
        AudioMetric::Mfcc => {
            let fx = FeatureExtractor::new(params.clone(), y1.sample_rate)?;
            let (f1, cache) = fx.extract_cached(&y1.samples)?;
            let f2 = fx.extract(&y2.samples)?;
            let diff: Vec<f64> = f1
                .as_slice()
                .iter()
                .zip(f2.as_slice())
                .map(|(a, b)| a - b)
                .collect();
            let d = diff.iter().map(|x| x * x).sum();
            let g: Vec<f64> = diff.iter().map(|x| 2.0 * x).collect();
            Ok((d, fx.backward(&cache, &g)))
        }
    }
}
