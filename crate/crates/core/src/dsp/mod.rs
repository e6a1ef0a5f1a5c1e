//! Acoustic front-end: WAV decoding, log mel filterbanks, context splicing
//! and per-utterance mean normalization.

mod fbank;
mod wav;

pub use fbank::{fbank, fbank_with, mel_center_frequencies, FbankConfig};
pub use wav::{encode_wav, parse_wav, read_wav, write_wav, Waveform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_FRAME_SHIFT_MS: f32 = 10.0;

/// Time-major feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor<f32>,
    pub frame_shift_ms: f32,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor<f32>, frame_shift_ms: f32) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::dim("FeatureMatrix", frames.shape(), &[0, 0]));
        }
        Ok(FeatureMatrix {
            frames,
            frame_shift_ms,
        })
    }

    pub fn from_rows(time: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::new(&[time, dim], data)?, DEFAULT_FRAME_SHIFT_MS)
    }

    pub fn time(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> Result<FeatureMatrix> {
        if len == 0 || start + len > self.time() {
            return Err(Error::SegmentTooShort {
                needed: start + len,
                got: self.time(),
            });
        }
        let d = self.dim();
        let data = self.frames.data()[start * d..(start + len) * d].to_vec();
        FeatureMatrix::new(Tensor::new(&[len, d], data)?, self.frame_shift_ms)
    }
}

/// Concatenates each frame with `left` predecessors and `right` successors.
/// Output frame `i` holds input frames `i..=i + left + right`.
pub fn splice(f: &FeatureMatrix, left: usize, right: usize) -> Result<FeatureMatrix> {
    let ctx = left + right + 1;
    if f.time() < ctx {
        return Err(Error::SpliceTooShort {
            needed: ctx,
            got: f.time(),
        });
    }
    let (out_t, d) = (f.time() - ctx + 1, f.dim());
    let src = f.frames.data();
    let mut out = Vec::with_capacity(out_t * ctx * d);
    for i in 0..out_t {
        out.extend_from_slice(&src[i * d..(i + ctx) * d]);
    }
    FeatureMatrix::new(Tensor::new(&[out_t, ctx * d], out)?, f.frame_shift_ms)
}

/// Subtracts the per-dimension mean over the utterance.
pub fn mean_normalize(f: &FeatureMatrix) -> FeatureMatrix {
    let d = f.dim();
    let mut mean = vec![0.0f64; d];
    for row in f.frames.data().chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let n = f.time() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = f.clone();
    for row in out.frames.data_mut().chunks_exact_mut(d) {
        for (v, &m) in row.iter_mut().zip(&mean) {
            *v = (*v as f64 - m) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(time: usize, dim: usize) -> FeatureMatrix {
        let data = (0..time * dim).map(|i| (i as f32 * 0.731).sin()).collect();
        FeatureMatrix::from_rows(time, dim, data).unwrap()
    }

    #[test]
    fn splice_identity_and_single_frame() {
        let f = ramp(12, 40);
        assert_eq!(splice(&f, 0, 0).unwrap(), f);
        let nine = ramp(9, 40);
        let s = splice(&nine, 4, 4).unwrap();
        assert_eq!((s.time(), s.dim()), (1, 360));
        assert!(matches!(
            splice(&ramp(8, 40), 4, 4),
            Err(Error::SpliceTooShort { needed: 9, got: 8 })
        ));
    }

    #[test]
    fn splice_index_map() {
        let f = ramp(20, 5);
        let s = splice(&f, 2, 3).unwrap();
        assert_eq!(s.time(), 20 - 5);
        for i in 0..s.time() {
            for slot in 0..6 {
                for k in 0..5 {
                    assert_eq!(s.frame(i)[slot * 5 + k], f.frame(i + slot)[k]);
                }
            }
        }
    }

    #[test]
    fn mean_normalize_cases() {
        let c = FeatureMatrix::from_rows(4, 3, vec![2.5; 12]).unwrap();
        assert!(mean_normalize(&c).frames.data().iter().all(|&v| v == 0.0));

        let zm = FeatureMatrix::from_rows(2, 2, vec![1.0, -3.0, -1.0, 3.0]).unwrap();
        assert!(mean_normalize(&zm).frames.max_abs_diff(&zm.frames) < 1e-12);

        let r = mean_normalize(&ramp(50, 7));
        for k in 0..7 {
            let m: f64 = (0..50).map(|t| r.frame(t)[k] as f64).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-6, "column {k} mean {m}");
        }
    }
}
