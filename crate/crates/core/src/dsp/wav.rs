//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono audio.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SUPPORTED_RATES: [u32; 2] = [8000, 16000];

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples in [-1, 1).
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::Config(format!(
                "unsupported sample rate {sample_rate} Hz (expected 8000 or 16000)"
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn u16_at(b: &[u8], off: usize) -> Result<u16> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| fmt_err(off, "truncated file"))
}

fn u32_at(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| fmt_err(off, "truncated file"))
}

/// Decodes a PCM16 mono RIFF/WAVE byte buffer.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.get(0..4) != Some(b"RIFF".as_slice()) {
        return Err(fmt_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE".as_slice()) {
        return Err(fmt_err(8, "missing WAVE tag"));
    }
    let mut off = 12;
    let mut format: Option<(u32, usize)> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4)? as usize;
        let body = off + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(fmt_err(body, "truncated fmt chunk"));
                }
                let tag = u16_at(bytes, body)?;
                if tag != 1 {
                    return Err(fmt_err(body, format!("non-PCM audio format {tag}")));
                }
                let channels = u16_at(bytes, body + 2)?;
                if channels != 1 {
                    return Err(fmt_err(body + 2, format!("{channels} channels, expected mono")));
                }
                let rate = u32_at(bytes, body + 4)?;
                let bits = u16_at(bytes, body + 14)?;
                if bits != 16 {
                    return Err(fmt_err(body + 14, format!("{bits}-bit samples, expected 16")));
                }
                format = Some((rate, body));
            }
            b"data" => {
                let (rate, fmt_off) = format.ok_or_else(|| fmt_err(off, "data chunk before fmt"))?;
                if body + size > bytes.len() {
                    return Err(fmt_err(
                        bytes.len(),
                        format!("truncated data chunk: declared {size} bytes"),
                    ));
                }
                if size % 2 != 0 {
                    return Err(fmt_err(body + size, "odd data chunk length"));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|s| i16::from_le_bytes([s[0], s[1]]) as f32 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate).map_err(|_| {
                    fmt_err(fmt_off + 4, format!("unsupported sample rate {rate}"))
                });
            }
            _ => {}
        }
        off = body + size + (size & 1);
    }
    Err(fmt_err(bytes.len(), "no data chunk"))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Encodes samples as PCM16, clamping to the representable range.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(w)).map_err(|e| Error::io(path, e))
}
