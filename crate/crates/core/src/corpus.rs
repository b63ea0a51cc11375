//! Synthetic text/latent corpora, latent patching, manifests and latent
//! cache files.
//!
//! The synthetic generator maps every token to a fixed latent signature, so a
//! trained model's output can be scored by MSE against a known target.

use std::f32::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPattern {
    /// Token `b` contributes `sin(ω_{b,d}·(j+1) + φ_{b,d})` at its `j`-th frame.
    #[default]
    SinusoidBank,
    /// Frames glide linearly from the previous token's anchor to the current one.
    RandomAnchorWalk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub num_utterances: usize,
    /// Inclusive range of text lengths in tokens.
    pub text_length_range: (usize, usize),
    /// Seeds the per-token latent signatures.
    pub mapping_seed: u64,
    /// Seeds the utterance texts; held-out sets share `mapping_seed` but not this.
    pub text_seed: u64,
    pub latent_pattern: LatentPattern,
    pub frames_per_token: usize,
    pub alphabet: String,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_utterances: 32,
            text_length_range: (4, 10),
            mapping_seed: 7,
            text_seed: 7,
            latent_pattern: LatentPattern::SinusoidBank,
            frames_per_token: 2,
            alphabet: "abcdefghijklmnop".to_string(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.text_length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad text_length_range ({lo}, {hi})")));
        }
        if self.frames_per_token == 0 {
            return Err(Error::Config("frames_per_token must be at least 1".into()));
        }
        if self.alphabet.is_empty() || !self.alphabet.is_ascii() {
            return Err(Error::Config("alphabet must be non-empty ASCII".into()));
        }
        Ok(())
    }
}

impl SyntheticCorpusSpec {
    /// Held-out set: same token signatures, unseen texts two to three times
    /// longer than the longest training text.
    pub fn heldout(&self, num_utterances: usize) -> Self {
        let hi = self.text_length_range.1;
        Self {
            num_utterances,
            text_length_range: (2 * hi, 3 * hi),
            text_seed: self.text_seed.wrapping_add(0x0004_E1D0_u64),
            ..self.clone()
        }
    }
}

/// One text/latent pair. `frames` holds the unpadded trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
    pub frames: Tensor,
}

impl Utterance {
    pub fn tokens(&self) -> Vec<usize> {
        tokenize(&self.text)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_patches(&self, patch: usize) -> usize {
        self.num_frames().div_ceil(patch)
    }

    /// Trajectory padded to a multiple of `patch` by repeating the final
    /// frame, plus the number of real frames.
    pub fn padded(&self, patch: usize) -> (Tensor, usize) {
        pad_to_patches(&self.frames, patch)
    }
}

/// Byte-level tokenizer; specials are added by the model, not here.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn pad_to_patches(frames: &Tensor, patch: usize) -> (Tensor, usize) {
    let valid = frames.rows();
    let total = valid.div_ceil(patch) * patch;
    if total == valid {
        return (frames.clone(), valid);
    }
    assert!(valid > 0, "cannot pad an empty trajectory");
    let last = frames.slice_rows(valid - 1, 1);
    let mut parts = vec![frames];
    let reps: Vec<&Tensor> = std::iter::repeat_n(&last, total - valid).collect();
    parts.extend(reps);
    (Tensor::concat_rows(&parts), valid)
}

/// Per-token latent signatures, fixed by `mapping_seed`.
#[derive(Clone, Debug)]
pub struct TokenBank {
    pattern: LatentPattern,
    dim: usize,
    frames_per_token: usize,
    /// 256 × dim each
    freq: Tensor,
    phase: Tensor,
    anchor: Tensor,
}

impl TokenBank {
    pub fn new(spec: &SyntheticCorpusSpec, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.mapping_seed);
        let mut freq = Tensor::zeros(256, dim);
        let mut phase = Tensor::zeros(256, dim);
        let mut anchor = Tensor::zeros(256, dim);
        let normal = Normal::new(0.0f32, 0.6).expect("valid normal");
        for b in 0..256 {
            for d in 0..dim {
                freq.set(b, d, rng.random_range(0.4..1.6));
                phase.set(b, d, rng.random_range(0.0..TAU));
                anchor.set(b, d, normal.sample(&mut rng));
            }
        }
        Self {
            pattern: spec.latent_pattern,
            dim,
            frames_per_token: spec.frames_per_token,
            freq,
            phase,
            anchor,
        }
    }

    /// Deterministic target trajectory (`k·n × dim`, unpadded).
    pub fn trajectory(&self, tokens: &[usize]) -> Tensor {
        let k = self.frames_per_token;
        let mut out = Tensor::zeros(tokens.len() * k, self.dim);
        for (i, &tok) in tokens.iter().enumerate() {
            let b = tok.min(255);
            let prev = (i > 0).then(|| tokens[i - 1].min(255));
            for j in 0..k {
                let row = out.row_mut(i * k + j);
                for (d, v) in row.iter_mut().enumerate() {
                    *v = match self.pattern {
                        LatentPattern::SinusoidBank => {
                            (self.freq.get(b, d) * (j + 1) as f32 + self.phase.get(b, d)).sin()
                        }
                        LatentPattern::RandomAnchorWalk => {
                            let from = prev.map_or(0.0, |p| self.anchor.get(p, d));
                            let to = self.anchor.get(b, d);
                            let a = (j + 1) as f32 / k as f32;
                            from + (to - from) * a
                        }
                    };
                }
            }
        }
        out
    }
}

/// Generates `(text, latent trajectory)` pairs; bit-identical for equal specs.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, latent_dim: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let bank = TokenBank::new(spec, latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.text_seed ^ 0x5EED_7E87);
    let alphabet: Vec<char> = spec.alphabet.chars().collect();
    let (lo, hi) = spec.text_length_range;
    let mut out = Vec::with_capacity(spec.num_utterances);
    for u in 0..spec.num_utterances {
        let n = rng.random_range(lo..=hi);
        let text: String = (0..n)
            .map(|_| *alphabet.choose(&mut rng).expect("non-empty alphabet"))
            .collect();
        let frames = bank.trajectory(&tokenize(&text));
        out.push(Utterance {
            id: format!("utt{u:05}"),
            text,
            label: None,
            frames,
        });
    }
    Ok(out)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads every utterance of a manifest whose rows point at latent files.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for rec in read_manifest(manifest)? {
        let rel = rec.latent_path.as_deref().ok_or_else(|| Error::MissingField {
            record: rec.id.clone(),
            field: "latent_path".into(),
        })?;
        let cache = LatentCache::read(&resolve(manifest, rel))?;
        out.push(Utterance {
            id: rec.id,
            text: rec.text,
            label: rec.label,
            frames: cache.frames,
        });
    }
    Ok(out)
}

pub const LATENT_MAGIC: &[u8; 4] = b"SLAT";

/// Per-utterance `T × D` latent array with its source hash.
///
/// Layout (little endian): magic `SLAT`, `u32` D, `u32` T, 32-byte SHA-256 of
/// the source, then `T·D` `f32` values row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCache {
    pub source_hash: [u8; 32],
    pub frames: Tensor,
}

impl LatentCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(44 + 4 * self.frames.len());
        b.extend_from_slice(LATENT_MAGIC);
        b.extend_from_slice(&(self.frames.cols() as u32).to_le_bytes());
        b.extend_from_slice(&(self.frames.rows() as u32).to_le_bytes());
        b.extend_from_slice(&self.source_hash);
        for v in self.frames.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 44 || &bytes[..4] != LATENT_MAGIC {
            return Err(bad("not a latent cache file"));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let t = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let mut source_hash = [0u8; 32];
        source_hash.copy_from_slice(&bytes[12..44]);
        let body = &bytes[44..];
        if body.len() != 4 * t * d {
            return Err(bad(&format!("expected {t}x{d} values, found {} bytes", body.len())));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            source_hash,
            frames: Tensor::from_vec(t, d, data),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// Writes a corpus as latent cache files plus `manifest.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &[Utterance]) -> Result<PathBuf> {
    let lat_dir = dir.join("latents");
    fs::create_dir_all(&lat_dir)?;
    let mut records = Vec::with_capacity(corpus.len());
    for u in corpus {
        let rel = format!("latents/{}.lat", u.id);
        LatentCache {
            source_hash: sha256(u.text.as_bytes()),
            frames: u.frames.clone(),
        }
        .write(&dir.join(&rel))?;
        records.push(ManifestRecord {
            id: u.id.clone(),
            text: u.text.clone(),
            latent_path: Some(rel),
            wav_path: None,
            label: u.label.clone(),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_same_corpus() {
        let spec = SyntheticCorpusSpec {
            num_utterances: 32,
            mapping_seed: 7,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&spec, 16).unwrap();
        let b = generate_synthetic_corpus(&spec, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn padding_arithmetic() {
        for k in 1..5 {
            for p in 1..4 {
                let spec = SyntheticCorpusSpec {
                    num_utterances: 6,
                    frames_per_token: k,
                    ..Default::default()
                };
                for u in generate_synthetic_corpus(&spec, 4).unwrap() {
                    let n = u.text.len();
                    assert_eq!(u.num_frames(), k * n);
                    let (padded, valid) = u.padded(p);
                    assert_eq!(valid, k * n);
                    assert_eq!(padded.rows(), (k * n).div_ceil(p) * p);
                    // padding repeats the final frame
                    for r in valid..padded.rows() {
                        assert_eq!(padded.row(r), u.frames.row(valid - 1));
                    }
                }
            }
        }
    }

    #[test]
    fn shared_prefix_shares_frames() {
        for pattern in [LatentPattern::SinusoidBank, LatentPattern::RandomAnchorWalk] {
            let spec = SyntheticCorpusSpec {
                latent_pattern: pattern,
                frames_per_token: 3,
                ..Default::default()
            };
            let bank = TokenBank::new(&spec, 8);
            let a = bank.trajectory(&tokenize("abcab"));
            let b = bank.trajectory(&tokenize("abcpp"));
            assert_eq!(a.slice_rows(0, 9), b.slice_rows(0, 9));
            assert_ne!(a.slice_rows(9, 3), b.slice_rows(9, 3));
        }
    }

    #[test]
    fn latent_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = LatentCache {
            source_hash: sha256(b"abc"),
            frames: Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 3.25, f32::MIN_POSITIVE, 7.0]),
        };
        let p = dir.path().join("x.lat");
        c.write(&p).unwrap();
        assert_eq!(LatentCache::read(&p).unwrap(), c);
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(LatentCache::read(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default(), 4).unwrap();
        let manifest = write_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus(&manifest).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn manifest_missing_latent_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"text\":\"hi\"}\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::MissingField { .. })));
    }
}
