//! Feature archives (`FVEC`) and utterance manifests.
//!
//! Archive layout, all little-endian:
//!
//! ```text
//! b"FVEC" | u32 version = 1 | u32 rows | u32 cols | rows * cols f32
//! ```
//!
//! A manifest is a UTF-8 text file with one `utt_id speaker_id relative_path`
//! line per utterance.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dsp::{FeatureMatrix, DEFAULT_FRAME_SHIFT_MS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FVEC_MAGIC: &[u8; 4] = b"FVEC";
pub const FVEC_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn encode_fvec(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + f.frames.len() * 4);
    out.extend_from_slice(FVEC_MAGIC);
    out.extend_from_slice(&FVEC_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.time() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for v in f.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fvec(bytes: &[u8]) -> Result<FeatureMatrix> {
    let err = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 16 {
        return Err(err(bytes.len(), "truncated FVEC header"));
    }
    if &bytes[0..4] != FVEC_MAGIC {
        return Err(err(0, "bad FVEC magic"));
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = word(4);
    if version != FVEC_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FVEC_VERSION,
        });
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let need = 16 + rows * cols * 4;
    if bytes.len() != need {
        return Err(err(
            bytes.len().min(need),
            &format!("payload length {} != {} for {rows}x{cols}", bytes.len() - 16, need - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(Tensor::new(&[rows, cols], data)?, DEFAULT_FRAME_SHIFT_MS)
}

pub fn write_fvec(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_fvec(f)).map_err(|e| Error::io(path, e))
}

pub fn read_fvec(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    decode_fvec(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.utt_id, e.speaker_id, e.path.display()))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            [utt, spk, path] => out.push(ManifestEntry {
                utt_id: utt.to_string(),
                speaker_id: spk.to_string(),
                path: PathBuf::from(path),
            }),
            _ => {
                return Err(Error::Format {
                    offset: offset as u64,
                    msg: format!("manifest line needs 3 fields: {:?}", line.trim_end()),
                })
            }
        }
        offset += line.len();
    }
    Ok(out)
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Archive {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Archive {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let mpath = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Archive {
            root,
            entries: parse_manifest(&text)?,
        })
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<FeatureMatrix> {
        read_fvec(self.root.join(&entry.path))
    }

    /// Loads every utterance, in manifest order.
    pub fn load_all(&self) -> Result<Vec<(ManifestEntry, FeatureMatrix)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.clone(), self.load(e)?)))
            .collect()
    }
}

/// Writes one archive per utterance under `dir/feats/` plus `dir/manifest.txt`.
pub fn write_archive<'a>(
    dir: impl AsRef<Path>,
    utts: impl IntoIterator<Item = (&'a str, &'a str, &'a FeatureMatrix)>,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut entries = Vec::new();
    for (utt, spk, f) in utts {
        let rel = PathBuf::from("feats").join(format!("{utt}.fvec"));
        write_fvec(dir.join(&rel), f)?;
        entries.push(ManifestEntry {
            utt_id: utt.to_string(),
            speaker_id: spk.to_string(),
            path: rel,
        });
    }
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, format_manifest(&entries)).map_err(|e| Error::io(&mpath, e))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fvec_round_trip(rows in 1usize..20, cols in 1usize..12, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)) & 0x3fff_ffff))
                .collect();
            let f = FeatureMatrix::from_rows(rows, cols, data).unwrap();
            let back = decode_fvec(&encode_fvec(&f)).unwrap();
            prop_assert_eq!(back, f);
        }
    }

    #[test]
    fn fvec_header_layout() {
        let f = FeatureMatrix::from_rows(2, 3, vec![1.0; 6]).unwrap();
        let b = encode_fvec(&f);
        assert_eq!(&b[0..4], b"FVEC");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(b.len(), 16 + 24);
    }

    #[test]
    fn fvec_errors() {
        let f = FeatureMatrix::from_rows(2, 3, vec![1.0; 6]).unwrap();
        let mut b = encode_fvec(&f);
        b.pop();
        assert!(matches!(decode_fvec(&b), Err(Error::Format { .. })));
        let mut v = encode_fvec(&f);
        v[4] = 2;
        assert!(matches!(decode_fvec(&v), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn manifest_parse() {
        let m = parse_manifest("u1 s1 feats/u1.fvec\n\nu2 s2 feats/u2.fvec\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].speaker_id, "s2");
        assert_eq!(parse_manifest(&format_manifest(&m)).unwrap(), m);
        assert!(parse_manifest("u1 s1\n").is_err());
    }

    #[test]
    fn archive_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureMatrix::from_rows(3, 2, vec![0.5; 6]).unwrap();
        write_archive(dir.path(), [("a", "spk", &f)]).unwrap();
        let arc = Archive::open(dir.path()).unwrap();
        let all = arc.load_all().unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].1, f);
    }
}
