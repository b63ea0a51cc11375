//! Causal convolutional VAE between 16 kHz waveforms and latent frames.
//!
//! Signals are `T × C` (time rows, channel columns). Every convolution is
//! causal: a stride-`s` kernel-`k` layer is left-padded by `k − s` rows, so
//! output row `t` reads input rows `t·s − (k − s) ..= t·s + s − 1` and a
//! length-`N` input gives exactly `⌊N/s⌋` outputs. Through the default
//! strides `[2, 5, 8, 8]` latent frame `n` depends only on samples
//! `< (n + 1)·640`.
//!
//! The decoder upsamples with a per-frame linear map reshaped into `s` rows,
//! followed by stride-1 causal convolutions, so output sample `m` depends
//! only on frames `≤ ⌊m/640⌋`.
//!
//! Streaming keeps, per convolution, the input rows that the next chunk's
//! windows still need. The arithmetic per output row is the same as in the
//! full pass.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_l1, MelFrontEnd};
use crate::autodiff::{Graph, ParamGrads, Unary, Var};
use crate::backbone::namespace_rng;
use crate::checkpoint::{load_params_into, params_bytes, read_archive, write_dir_atomically, CONFIG_FILE, PARAMS_FILE};
use crate::config::{Config, VaeConfig};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::optim::{clip_global_norm, AdamW};
use crate::parallel::{self, mix_seed, Exec};
use crate::tensor::Tensor;
use crate::train::FINAL_DIR;

const RES_KERNEL: usize = 7;
const IO_KERNEL: usize = 7;
const LATENT_KERNEL: usize = 3;
pub const VAE_METRICS_FILE: &str = "vae_metrics.jsonl";

#[derive(Clone, Debug)]
struct CausalConv {
    lin: Linear,
    kernel: usize,
    stride: usize,
    channels_in: usize,
}

impl CausalConv {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            lin: Linear::new(init, name, kernel * cin, cout, true),
            kernel,
            stride,
            channels_in: cin,
        }
    }

    fn with_std(init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize, std: f32) -> Self {
        Self {
            lin: Linear::with_std(init, name, kernel * cin, cout, true, std),
            kernel,
            stride: 1,
            channels_in: cin,
        }
    }

    fn pad(&self) -> usize {
        self.kernel - self.stride
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.im2col(x, self.kernel, self.stride, self.pad());
        self.lin.forward(g, cols)
    }

    /// Continues from `context` (the tail of everything seen so far) and
    /// leaves the new tail in it.
    fn forward_stream(&self, g: &mut Graph, x: Var, context: &mut Tensor) -> Var {
        if context.rows() == 0 {
            return self.forward(g, x);
        }
        let c = g.constant(context.clone());
        let full = g.concat_rows(&[c, x]);
        let rows = g.shape(full).0;
        let used = ((rows - self.kernel) / self.stride + 1) * self.stride;
        *context = g.value(full).slice_rows(used, rows - used);
        let cols = g.im2col(full, self.kernel, self.stride, 0);
        self.lin.forward(g, cols)
    }
}

/// Full pass, or a streaming pass over per-conv contexts in call order.
struct Runner<'s> {
    contexts: Option<&'s mut [Tensor]>,
    next: usize,
}

impl Runner<'_> {
    fn full() -> Self {
        Runner {
            contexts: None,
            next: 0,
        }
    }

    fn conv(&mut self, g: &mut Graph, conv: &CausalConv, x: Var) -> Var {
        match self.contexts.as_deref_mut() {
            None => conv.forward(g, x),
            Some(ctx) => {
                let y = conv.forward_stream(g, x, &mut ctx[self.next]);
                self.next += 1;
                y
            }
        }
    }
}

#[derive(Clone, Debug)]
struct ResUnit {
    a: CausalConv,
    b: CausalConv,
}

impl ResUnit {
    fn new(init: &mut Init, name: &str, c: usize) -> Self {
        Self {
            a: CausalConv::new(init, &format!("{name}.a"), c, c, RES_KERNEL, 1),
            b: CausalConv::new(init, &format!("{name}.b"), c, c, 1, 1),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, run: &mut Runner) -> Var {
        let h = g.elu(x);
        let h = run.conv(g, &self.a, h);
        let h = g.elu(h);
        let h = run.conv(g, &self.b, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up: Linear,
    stride: usize,
    res: ResUnit,
}

/// Per-frame posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub latent_dim: usize,
    pub params: ParamStore,
    enc_in: CausalConv,
    enc: Vec<(ResUnit, CausalConv)>,
    enc_out: CausalConv,
    dec_in: CausalConv,
    dec: Vec<UpStage>,
    dec_out: CausalConv,
}

impl Vae {
    pub fn new(config: &VaeConfig, latent_dim: usize) -> Result<Self> {
        config.validate()?;
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let ch = &config.channels;
        let mut params = ParamStore::default();
        let mut rng = namespace_rng(config.seed, "vae");
        let init = &mut Init {
            store: &mut params,
            rng: &mut rng,
        };
        let enc_in = CausalConv::new(init, "vae.enc.in", 1, ch[0], IO_KERNEL, 1);
        let enc = config
            .strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                (
                    ResUnit::new(init, &format!("vae.enc.s{i}.res"), ch[i]),
                    CausalConv::new(init, &format!("vae.enc.s{i}.down"), ch[i], ch[i + 1], 2 * s, s),
                )
            })
            .collect();
        let last = *ch.last().expect("validated");
        let enc_out = CausalConv::with_std(init, "vae.enc.out", last, 2 * latent_dim, LATENT_KERNEL, 0.01);
        let dec_in = CausalConv::new(init, "vae.dec.in", latent_dim, last, LATENT_KERNEL, 1);
        let dec = (0..config.strides.len())
            .rev()
            .map(|i| {
                let s = config.strides[i];
                UpStage {
                    up: Linear::new(init, &format!("vae.dec.s{i}.up"), ch[i + 1], s * ch[i], true),
                    stride: s,
                    res: ResUnit::new(init, &format!("vae.dec.s{i}.res"), ch[i]),
                }
            })
            .collect();
        let dec_out = CausalConv::new(init, "vae.dec.out", ch[0], 1, IO_KERNEL, 1);
        Ok(Self {
            config: config.clone(),
            latent_dim,
            params,
            enc_in,
            enc,
            enc_out,
            dec_in,
            dec,
            dec_out,
        })
    }

    /// Waveform samples per latent frame.
    pub fn hop(&self) -> usize {
        self.config.hop()
    }

    fn encoder_convs(&self) -> Vec<&CausalConv> {
        let mut v = vec![&self.enc_in];
        for (res, down) in &self.enc {
            v.extend([&res.a, &res.b, down]);
        }
        v.push(&self.enc_out);
        v
    }

    fn decoder_convs(&self) -> Vec<&CausalConv> {
        let mut v = vec![&self.dec_in];
        for st in &self.dec {
            v.extend([&st.res.a, &st.res.b]);
        }
        v.push(&self.dec_out);
        v
    }

    /// `N × 1` waveform to `⌊N/hop⌋ × 2D` posterior statistics.
    fn encoder(&self, g: &mut Graph, x: Var, run: &mut Runner) -> Var {
        let mut h = run.conv(g, &self.enc_in, x);
        for (res, down) in &self.enc {
            h = res.forward(g, h, run);
            h = g.elu(h);
            h = run.conv(g, down, h);
        }
        let h = g.elu(h);
        run.conv(g, &self.enc_out, h)
    }

    /// `T × D` latents to a `T·hop × 1` waveform in (−1, 1).
    fn decoder(&self, g: &mut Graph, z: Var, run: &mut Runner) -> Var {
        let mut h = run.conv(g, &self.dec_in, z);
        for st in &self.dec {
            h = g.elu(h);
            h = st.up.forward(g, h);
            let (r, c) = g.shape(h);
            h = g.reshape(h, r * st.stride, c / st.stride);
            h = st.res.forward(g, h, run);
        }
        let h = g.elu(h);
        let h = run.conv(g, &self.dec_out, h);
        g.tanh(h)
    }

    fn split_stats(&self, g: &mut Graph, stats: Var) -> (Var, Var) {
        let d = self.latent_dim;
        (g.slice_cols(stats, 0, d), g.slice_cols(stats, d, d))
    }

    fn check_samples(&self, samples: &[f32]) -> Result<()> {
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    /// Posterior for a waveform of at least one hop. Samples past the last
    /// whole hop do not reach any frame and are dropped.
    pub fn encode(&self, samples: &[f32]) -> Result<Posterior> {
        let hop = self.hop();
        if samples.len() < hop {
            return Err(Error::TooShort {
                len: samples.len(),
                min: hop,
            });
        }
        self.check_samples(samples)?;
        let n = samples.len() / hop * hop;
        let mut g = Graph::inference(&self.params);
        let x = g.constant(Tensor::from_vec(n, 1, samples[..n].to_vec()));
        let stats = self.encoder(&mut g, x, &mut Runner::full());
        let (m, lv) = self.split_stats(&mut g, stats);
        Ok(Posterior {
            mean: g.value(m).clone(),
            logvar: g.value(lv).clone(),
        })
    }

    /// Deterministic latents (the posterior mean).
    pub fn encode_mean(&self, samples: &[f32]) -> Result<Tensor> {
        Ok(self.encode(samples)?.mean)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Vec<f32>> {
        self.check_latents(latents)?;
        if latents.rows() == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(&self.params);
        let z = g.constant(latents.clone());
        let y = self.decoder(&mut g, z, &mut Runner::full());
        Ok(g.value(y).data().to_vec())
    }

    fn check_latents(&self, latents: &Tensor) -> Result<()> {
        if latents.cols() != self.latent_dim {
            return Err(Error::Mismatch(format!(
                "latents are {}-dim, VAE expects {}",
                latents.cols(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    pub fn stream_encoder(&self) -> StreamEncoder<'_> {
        StreamEncoder {
            contexts: self.fresh_contexts(&self.encoder_convs()),
            vae: self,
        }
    }

    pub fn stream_decoder(&self) -> StreamDecoder<'_> {
        StreamDecoder {
            contexts: self.fresh_contexts(&self.decoder_convs()),
            vae: self,
        }
    }

    fn fresh_contexts(&self, convs: &[&CausalConv]) -> Vec<Tensor> {
        convs.iter().map(|c| Tensor::zeros(c.pad(), c.channels_in)).collect()
    }

    /// Mel + weighted KL on one clip, with a reparameterised latent draw.
    /// Returns the graph scalars `(total, mel, kl)`.
    pub fn loss(&self, g: &mut Graph, samples: &[f32], fronts: &[MelFrontEnd], seed: u64) -> (Var, Var, Var) {
        let n = samples.len() / self.hop() * self.hop();
        let target = g.constant(Tensor::from_vec(n, 1, samples[..n].to_vec()));
        let stats = self.encoder(g, target, &mut Runner::full());
        let (mean, logvar) = self.split_stats(g, stats);
        let (t, d) = g.shape(mean);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = g.constant(Tensor::from_vec(
            t,
            d,
            (0..t * d).map(|_| rng.sample(StandardNormal)).collect(),
        ));
        let half = g.scale(logvar, 0.5);
        let std = g.unary(half, Unary::Exp);
        let noise = g.mul(std, eps);
        let z = g.add(mean, noise);
        let recon = self.decoder(g, z, &mut Runner::full());
        let mel = mel_l1(g, fronts, recon, target);
        let kl = kl_per_frame(g, mean, logvar);
        let weighted = g.scale(kl, self.config.kl_weight as f32);
        let total = g.add(mel, weighted);
        (total, mel, kl)
    }

    pub fn mel_front_ends(&self) -> Vec<MelFrontEnd> {
        self.config
            .mel_windows
            .iter()
            .map(|&w| MelFrontEnd::new(w, self.config.mel_bands))
            .collect()
    }

    /// Log-mel L1 distance between two waveforms, cut to a common whole
    /// number of hops.
    pub fn mel_distance(&self, a: &[f32], b: &[f32]) -> f64 {
        let n = a.len().min(b.len());
        let fronts = self.mel_front_ends();
        let store = ParamStore::default();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::from_vec(n, 1, a[..n].to_vec()));
        let y = g.constant(Tensor::from_vec(n, 1, b[..n].to_vec()));
        let d = mel_l1(&mut g, &fronts, x, y);
        g.value(d).data()[0] as f64
    }
}

/// Standard-normal KL, summed over latent dims and averaged over frames.
pub fn kl_per_frame(g: &mut Graph, mean: Var, logvar: Var) -> Var {
    let t = g.shape(mean).0.max(1);
    let m2 = g.mul(mean, mean);
    let var = g.unary(logvar, Unary::Exp);
    let s = g.add(m2, var);
    let s = g.sub(s, logvar);
    let s = g.add_scalar(s, -1.0);
    let s = g.sum_all(s);
    g.scale(s, 0.5 / t as f32)
}

/// Chunked mean encoding. Chunks must be whole hops.
pub struct StreamEncoder<'v> {
    vae: &'v Vae,
    contexts: Vec<Tensor>,
}

impl StreamEncoder<'_> {
    pub fn push(&mut self, chunk: &[f32]) -> Result<Tensor> {
        let v = self.vae;
        let hop = v.hop();
        if !chunk.len().is_multiple_of(hop) {
            return Err(Error::ChunkLength {
                len: chunk.len(),
                multiple: hop,
            });
        }
        if chunk.is_empty() {
            return Ok(Tensor::zeros(0, v.latent_dim));
        }
        v.check_samples(chunk)?;
        let mut g = Graph::inference(&v.params);
        let x = g.constant(Tensor::from_vec(chunk.len(), 1, chunk.to_vec()));
        let mut run = Runner {
            contexts: Some(&mut self.contexts),
            next: 0,
        };
        let stats = v.encoder(&mut g, x, &mut run);
        Ok(g.value(stats).slice_cols(0, v.latent_dim))
    }

    /// Forgets everything seen so far.
    pub fn reset(&mut self) {
        self.contexts = self.vae.fresh_contexts(&self.vae.encoder_convs());
    }
}

/// Chunked decoding, any number of frames per chunk.
pub struct StreamDecoder<'v> {
    vae: &'v Vae,
    contexts: Vec<Tensor>,
}

impl StreamDecoder<'_> {
    pub fn push(&mut self, frames: &Tensor) -> Result<Vec<f32>> {
        let v = self.vae;
        v.check_latents(frames)?;
        if frames.rows() == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(&v.params);
        let z = g.constant(frames.clone());
        let mut run = Runner {
            contexts: Some(&mut self.contexts),
            next: 0,
        };
        let y = v.decoder(&mut g, z, &mut run);
        Ok(g.value(y).data().to_vec())
    }

    pub fn reset(&mut self) {
        self.contexts = self.vae.fresh_contexts(&self.vae.decoder_convs());
    }
}

pub fn save_vae(dir: &Path, config: &Config, vae: &Vae) -> Result<()> {
    let mut config = config.clone();
    config.vae = vae.config.clone();
    config.model.latent_dim = vae.latent_dim;
    write_dir_atomically(
        dir,
        &[
            (CONFIG_FILE, config.to_text().into_bytes()),
            (PARAMS_FILE, params_bytes(&vae.params)),
        ],
    )
}

pub fn load_vae(dir: &Path) -> Result<Vae> {
    let config = Config::load(&dir.join(CONFIG_FILE))?;
    let mut vae = Vae::new(&config.vae, config.model.latent_dim)?;
    let path = dir.join(PARAMS_FILE);
    load_params_into(&mut vae.params, read_archive(&path)?, &path)?;
    Ok(vae)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeMetrics {
    pub step: u64,
    pub mel_loss: f64,
    pub kl_loss: f64,
    pub kl_weight: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub struct VaeTrainer {
    pub config: Config,
    pub vae: Vae,
    pub step: u64,
    optim: AdamW,
    clips: Vec<Vec<f32>>,
    fronts: Vec<MelFrontEnd>,
    exec: Exec,
}

impl VaeTrainer {
    pub fn new(config: &Config, clips: Vec<Vec<f32>>, exec: Exec) -> Result<Self> {
        config.validate()?;
        let vae = Vae::new(&config.vae, config.model.latent_dim)?;
        if clips.is_empty() {
            return Err(Error::Config("VAE training corpus is empty".into()));
        }
        if let Some(c) = clips.iter().find(|c| c.len() < vae.hop()) {
            return Err(Error::TooShort {
                len: c.len(),
                min: vae.hop(),
            });
        }
        Ok(Self {
            optim: AdamW::new(&vae.params, 0.9, 0.99, 0.0),
            fronts: vae.mel_front_ends(),
            config: config.clone(),
            vae,
            step: 0,
            clips,
            exec,
        })
    }

    /// Crops for this step: `(clip, offset, length)`.
    fn crops(&self) -> Vec<(usize, usize, usize)> {
        let a = &self.vae.config;
        let hop = self.vae.hop();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(a.seed, self.step, 0xC0));
        let picks: Vec<usize> = if self.clips.len() <= a.batch {
            (0..self.clips.len()).collect()
        } else {
            sample(&mut rng, self.clips.len(), a.batch).into_vec()
        };
        picks
            .into_iter()
            .map(|i| {
                let avail = self.clips[i].len() / hop * hop;
                let len = avail.min(a.segment_frames * hop);
                let off = rng.random_range(0..=self.clips[i].len() - len);
                (i, off, len)
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<VaeMetrics> {
        let started = Instant::now();
        let crops = self.crops();
        let vae = &self.vae;
        let fronts = &self.fronts;
        let seed = self.vae.config.seed;
        let step = self.step;
        let results = parallel::map(self.exec, &crops, |pos, &(i, off, len)| {
            let mut g = Graph::new(&vae.params);
            let (total, mel, kl) = vae.loss(
                &mut g,
                &self.clips[i][off..off + len],
                fronts,
                mix_seed(seed, step, pos as u64 + 1),
            );
            let vals = (g.value(mel).data()[0] as f64, g.value(kl).data()[0] as f64);
            (vals, g.backward(total).into_params())
        });
        let b = crops.len() as f64;
        let mut grads = ParamGrads::empty(self.vae.params.len());
        let (mut mel, mut kl) = (0.0, 0.0);
        for ((m, k), gr) in results {
            mel += m / b;
            kl += k / b;
            grads.merge(gr);
        }
        grads.scale(1.0 / b as f32);
        let kl_weight = self.vae.config.kl_weight;
        let total = mel + kl_weight * kl;
        let grad_norm = clip_global_norm(&mut grads, self.config.train.grad_clip);
        if !total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                grad_norms: format!("vae={grad_norm}"),
            });
        }
        self.optim.step(&mut self.vae.params, &grads, self.vae.config.lr);
        self.step += 1;
        Ok(VaeMetrics {
            step,
            mel_loss: mel,
            kl_loss: kl,
            kl_weight,
            total,
            grad_norm,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Trains for the configured number of steps, appending metrics to
    /// `out/vae_metrics.jsonl`, and saves the model to `out/final`.
    pub fn run(&mut self, out: &Path, mut on_step: impl FnMut(&VaeMetrics)) -> Result<PathBuf> {
        fs::create_dir_all(out)?;
        let mut log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(out.join(VAE_METRICS_FILE))?;
        while self.step < self.vae.config.steps {
            let m = self.step()?;
            serde_json::to_writer(&mut log, &m)?;
            log.write_all(b"\n")?;
            on_step(&m);
        }
        let dir = out.join(FINAL_DIR);
        save_vae(&dir, &self.config, &self.vae)?;
        Ok(dir)
    }
}

/// Reads a VAE metrics log.
pub fn read_vae_metrics(path: &Path) -> Result<Vec<VaeMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
