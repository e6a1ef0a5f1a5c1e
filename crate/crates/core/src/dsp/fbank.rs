use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    pub num_mels: usize,
    pub low_freq: f64,
    /// Upper band edge in Hz; `<= 0` means Nyquist.
    pub high_freq: f64,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            num_mels: 40,
            low_freq: 20.0,
            high_freq: 0.0,
            log_floor: 1e-10,
        }
    }
}

fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

struct Frontend {
    frame_len: usize,
    shift: usize,
    nfft: usize,
    window: Vec<f64>,
    /// `(first_bin, weights)` per mel filter.
    filters: Vec<(usize, Vec<f64>)>,
}

impl FbankConfig {
    fn high(&self, rate: u32) -> f64 {
        let nyq = rate as f64 / 2.0;
        if self.high_freq <= 0.0 {
            nyq
        } else {
            self.high_freq.min(nyq)
        }
    }

    fn frontend(&self, rate: u32) -> Result<Frontend> {
        let frame_len = (rate as f64 * self.frame_length_ms / 1000.0).round() as usize;
        let shift = (rate as f64 * self.frame_shift_ms / 1000.0).round() as usize;
        if frame_len == 0 || shift == 0 || self.num_mels == 0 {
            return Err(Error::Config("fbank frame length, shift and mel count must be positive".into()));
        }
        let nfft = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos())
            .collect();

        let centers = mel_center_frequencies(self, rate);
        let (lo, hi) = (mel(self.low_freq), mel(self.high(rate)));
        let step = (hi - lo) / (self.num_mels + 1) as f64;
        let bin_hz = rate as f64 / nfft as f64;
        let filters = (0..self.num_mels)
            .map(|m| {
                let left = lo + m as f64 * step;
                let center = mel(centers[m]);
                let right = lo + (m + 2) as f64 * step;
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..=nfft / 2 {
                    let mk = mel(k as f64 * bin_hz);
                    if mk > left && mk < right {
                        let w = if mk <= center {
                            (mk - left) / (center - left)
                        } else {
                            (right - mk) / (right - center)
                        };
                        first.get_or_insert(k);
                        weights.push(w);
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        Ok(Frontend {
            frame_len,
            shift,
            nfft,
            window,
            filters,
        })
    }
}

/// Center frequency in Hz of each triangular filter.
pub fn mel_center_frequencies(cfg: &FbankConfig, rate: u32) -> Vec<f64> {
    let (lo, hi) = (mel(cfg.low_freq), mel(cfg.high(rate)));
    let step = (hi - lo) / (cfg.num_mels + 1) as f64;
    (1..=cfg.num_mels).map(|m| mel_inv(lo + m as f64 * step)).collect()
}

pub fn fbank(w: &Waveform) -> Result<FeatureMatrix> {
    fbank_with(w, &FbankConfig::default())
}

/// Log mel filterbank energies, one row per 10 ms frame by default.
/// Frame count is `1 + (N - frame_len) / shift`.
pub fn fbank_with(w: &Waveform, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    let fe = cfg.frontend(w.sample_rate)?;
    let n = w.samples.len();
    if n < fe.frame_len {
        return Err(Error::InsufficientSamples {
            needed: fe.frame_len,
            got: n,
        });
    }
    let frames = 1 + (n - fe.frame_len) / fe.shift;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fe.nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); fe.nfft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0f64; fe.nfft / 2 + 1];
    let mut out = Vec::with_capacity(frames * cfg.num_mels);

    for t in 0..frames {
        let seg = &w.samples[t * fe.shift..t * fe.shift + fe.frame_len];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < fe.frame_len {
                let prev = if i == 0 { seg[0] } else { seg[i - 1] } as f64;
                let s = seg[i] as f64 - cfg.preemphasis * prev;
                Complex::new(s * fe.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (first, weights) in &fe.filters {
            let e: f64 = weights
                .iter()
                .zip(&power[*first..])
                .map(|(w, p)| w * p)
                .sum();
            out.push(e.max(cfg.log_floor).ln() as f32);
        }
    }
    FeatureMatrix::new(
        Tensor::new(&[frames, cfg.num_mels], out)?,
        cfg.frame_shift_ms as f32,
    )
}
