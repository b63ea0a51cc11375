//! Waveform I/O and the log-mel front end used by the VAE loss.

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Unary, Var};
use crate::checkpoint::atomic_write;
use crate::config::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LOG_FLOOR: f32 = 1e-5;

/// Reads a mono 16 kHz PCM WAV into samples in [−1, 1].
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if spec.channels != 1 {
        return Err(bad(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("{} Hz, expected {SAMPLE_RATE}", spec.sample_rate)));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader.samples::<i16>().map(|s| Ok(s? as f32 / 32768.0)).collect(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| Ok(s?)).collect(),
        (f, b) => Err(bad(format!("unsupported sample format {f:?}/{b} bits"))),
    }
}

/// 16-bit PCM WAV bytes. Samples are clipped to [−1, 1].
pub fn wav_bytes(samples: &[f32]) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec)?;
        for &s in samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    atomic_write(path, &wav_bytes(samples)?)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the `window/2 + 1` STFT bins, `bins × bands`.
/// Triangles are evaluated at bin centre frequencies, up to Nyquist.
pub fn mel_filters(window: usize, bands: usize, sample_rate: u32) -> Tensor {
    let bins = window / 2 + 1;
    let nyq = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyq);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let mut out = Tensor::zeros(bins, bands);
    for k in 0..bins {
        let f = k as f64 * sample_rate as f64 / window as f64;
        for b in 0..bands {
            let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
            if w > 0.0 {
                out.set(k, b, w as f32);
            }
        }
    }
    out
}

/// One STFT resolution: Hann-windowed DFT basis plus mel filters.
#[derive(Clone, Debug)]
pub struct MelFrontEnd {
    pub window: usize,
    pub hop: usize,
    /// `window × 2·bins`: cosine columns then sine columns.
    basis: Tensor,
    filters: Tensor,
}

impl MelFrontEnd {
    /// Hop is a quarter window.
    pub fn new(window: usize, bands: usize) -> Self {
        let bins = window / 2 + 1;
        let mut basis = Tensor::zeros(window, 2 * bins);
        for n in 0..window {
            let hann = 0.5 - 0.5 * (2.0 * PI * n as f64 / window as f64).cos();
            for k in 0..bins {
                let a = 2.0 * PI * (k * n % window) as f64 / window as f64;
                basis.set(n, k, (hann * a.cos()) as f32);
                basis.set(n, bins + k, (-hann * a.sin()) as f32);
            }
        }
        Self {
            window,
            hop: window / 4,
            basis,
            filters: mel_filters(window, bands, SAMPLE_RATE),
        }
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Log-mel spectrogram of an `N × 1` waveform column, `⌊N/hop⌋ × bands`.
    /// Frames are causal: frame `t` ends at sample `(t+1)·hop`.
    pub fn log_mel(&self, g: &mut Graph, x: Var) -> Var {
        let frames = g.im2col(x, self.window, self.hop, self.window - self.hop);
        let basis = g.constant(self.basis.clone());
        let spec = g.matmul(frames, basis);
        let sq = g.unary(spec, Unary::Square);
        let bins = self.bins();
        let re = g.slice_cols(sq, 0, bins);
        let im = g.slice_cols(sq, bins, bins);
        let power = g.add(re, im);
        let filters = g.constant(self.filters.clone());
        let mel = g.matmul(power, filters);
        let mel = g.add_scalar(mel, LOG_FLOOR);
        g.unary(mel, Unary::Log)
    }
}

/// Mean L1 distance between log-mel spectrograms, averaged over resolutions.
/// `target` should be a constant so only `recon` receives gradient.
pub fn mel_l1(g: &mut Graph, fronts: &[MelFrontEnd], recon: Var, target: Var) -> Var {
    let mut terms = Vec::with_capacity(fronts.len());
    for f in fronts {
        let a = f.log_mel(g, recon);
        let b = f.log_mel(g, target);
        let d = g.sub(a, b);
        let d = g.unary(d, Unary::Abs);
        let n = g.value(d).len().max(1);
        let s = g.sum_all(d);
        terms.push(g.scale(s, 1.0 / (n * fronts.len()) as f32));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    total
}

/// Deterministic test waveforms: each clip is a few enveloped sinusoids,
/// peak amplitude below 0.9.
pub fn synthetic_waveforms(count: usize, samples: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let partials: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
                .map(|_| {
                    (
                        rng.random_range(100.0..2000.0),
                        rng.random_range(0.1..0.28),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let trem = rng.random_range(1.0..6.0);
            (0..samples)
                .map(|n| {
                    let t = n as f64 / SAMPLE_RATE as f64;
                    let env = 0.75 + 0.25 * (2.0 * PI * trem * t).sin();
                    let s: f64 = partials.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
                    (env * s) as f32
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn wav_round_trip_quantizes_to_pcm16() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x = vec![0.0, 0.5, -0.5, 1.0, -1.0, 2.0];
        write_wav(&p, &x).unwrap();
        let y = read_wav(&p).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            assert!((a.clamp(-1.0, 1.0) - b).abs() < 1.0 / 16384.0);
        }
        assert_eq!(wav_bytes(&x).unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn filters_are_nonnegative_triangles() {
        let f = mel_filters(1024, 80, SAMPLE_RATE);
        assert_eq!(f.shape(), (513, 80));
        assert!(f.data().iter().all(|&w| (0.0..=1.0).contains(&w)));
        for b in 0..80 {
            let col: f32 = (0..513).map(|k| f.get(k, b)).sum();
            assert!(col > 0.0, "empty band {b}");
        }
    }

    #[test]
    fn pure_tone_peaks_in_matching_band() {
        let fe = MelFrontEnd::new(512, 40);
        let tone: Vec<f32> = (0..4096)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin() as f32)
            .collect();
        let store = ParamStore::default();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::from_vec(4096, 1, tone));
        let m = fe.log_mel(&mut g, x);
        let v = g.value(m);
        assert_eq!(v.shape(), (4096 / 128, 40));
        let row = v.row(20);
        let peak = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let filters = mel_filters(512, 40, SAMPLE_RATE);
        // bin 32 is exactly 1 kHz at this resolution
        let best = (0..40)
            .max_by(|&a, &b| filters.get(32, a).total_cmp(&filters.get(32, b)))
            .unwrap();
        assert!((peak as isize - best as isize).abs() <= 1, "peak {peak} vs {best}");
    }

    #[test]
    fn identical_signals_have_zero_mel_distance() {
        let x = synthetic_waveforms(1, 2048, 3).remove(0);
        let store = ParamStore::default();
        let mut g = Graph::inference(&store);
        let a = g.constant(Tensor::from_vec(2048, 1, x.clone()));
        let b = g.constant(Tensor::from_vec(2048, 1, x));
        let fronts = [MelFrontEnd::new(256, 20), MelFrontEnd::new(512, 20)];
        let d = mel_l1(&mut g, &fronts, a, b);
        assert_eq!(g.value(d).data()[0], 0.0);
    }

    #[test]
    fn synthetic_waveforms_are_bounded_and_seeded() {
        let a = synthetic_waveforms(4, 1000, 9);
        assert_eq!(a, synthetic_waveforms(4, 1000, 9));
        assert!(a.iter().flatten().all(|s| s.abs() < 0.9));
    }
}
