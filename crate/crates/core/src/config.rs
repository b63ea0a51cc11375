//! Model, training and VAE configuration.
//!
//! Config files are flat `key = value` text with `#` comments. Every key is
//! optional; missing keys take the defaults below. [`Config::to_text`] writes
//! every key, so a checkpoint's config snapshot is self-contained.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Byte tokenizer: 256 byte values plus BOS, EOS and PAD.
pub const BOS_TOKEN: usize = 256;
pub const EOS_TOKEN: usize = 257;
pub const PAD_TOKEN: usize = 258;
pub const BYTE_VOCAB: usize = 259;

/// Waveform sample rate of the audio VAE.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub tslm_layers: usize,
    pub ralm_layers: usize,
    pub locenc_layers: usize,
    pub locdit_layers: usize,
    pub fsq_dim: usize,
    pub fsq_levels: usize,
    pub patch_size: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub stop_hidden: usize,
    pub cfg_mask_prob: f64,
    pub stop_loss_weight: f64,
    pub max_patches: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            heads: 4,
            ffn_dim: 512,
            tslm_layers: 4,
            ralm_layers: 2,
            locenc_layers: 2,
            locdit_layers: 2,
            fsq_dim: 32,
            fsq_levels: 9,
            patch_size: 2,
            latent_dim: 16,
            vocab_size: BYTE_VOCAB,
            stop_hidden: 128,
            cfg_mask_prob: 0.1,
            stop_loss_weight: 1.0,
            max_patches: 256,
            max_text_len: 512,
        }
    }
}

impl ModelConfig {
    /// Lattice clip range `L = (levels − 1) / 2`.
    pub fn fsq_half_levels(&self) -> usize {
        (self.fsq_levels - 1) / 2
    }

    /// Longest token sequence the causal stacks accept.
    pub fn max_positions(&self) -> usize {
        1 + self.max_text_len + self.max_patches
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("tslm_layers", self.tslm_layers),
            ("ralm_layers", self.ralm_layers),
            ("locenc_layers", self.locenc_layers),
            ("locdit_layers", self.locdit_layers),
            ("fsq_dim", self.fsq_dim),
            ("patch_size", self.patch_size),
            ("latent_dim", self.latent_dim),
            ("vocab_size", self.vocab_size),
            ("stop_hidden", self.stop_hidden),
            ("max_patches", self.max_patches),
            ("max_text_len", self.max_text_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if self.fsq_levels < 3 {
            return Err(invalid("fsq_levels", "must be at least 3"));
        }
        if self.fsq_levels.is_multiple_of(2) {
            return Err(invalid("fsq_levels", "fsq_levels must be odd"));
        }
        if self.fsq_dim > self.model_dim {
            return Err(invalid("fsq_dim", "must not exceed model_dim"));
        }
        if !self.model_dim.is_multiple_of(self.heads) || !(self.model_dim / self.heads).is_multiple_of(2) {
            return Err(invalid("heads", "model_dim / heads must be an even integer"));
        }
        if self.vocab_size < BYTE_VOCAB {
            return Err(invalid("vocab_size", "byte tokenizer needs at least 259 entries"));
        }
        if !(0.0..=1.0).contains(&self.cfg_mask_prob) {
            return Err(invalid("cfg_mask_prob", "must lie in [0, 1]"));
        }
        if !(self.stop_loss_weight >= 0.0 && self.stop_loss_weight.is_finite()) {
            return Err(invalid("stop_loss_weight", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Which single mechanism an ablation run rewires.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    #[default]
    None,
    /// Quantizer replaced by the identity.
    NoFsq,
    /// Purely continuous TSLM → LocDiT: no residual model, no quantizer.
    NoRalm,
    /// RALM sees a learned null embedding instead of acoustic history.
    NoAcousticInput,
    /// LocDiT conditioned on the up-projected skeleton alone.
    SkeletonOnly,
    FsqDimOverride(usize),
}

impl AblationVariant {
    pub fn uses_quantizer(self) -> bool {
        !matches!(self, AblationVariant::NoFsq | AblationVariant::NoRalm)
    }

    pub fn uses_ralm(self) -> bool {
        !matches!(self, AblationVariant::NoRalm | AblationVariant::SkeletonOnly)
    }

    /// Applies the variant to a model config (only the dim override changes it).
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        if let AblationVariant::FsqDimOverride(k) = self {
            out.fsq_dim = k;
        }
        out
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationVariant::None => f.write_str("none"),
            AblationVariant::NoFsq => f.write_str("no_fsq"),
            AblationVariant::NoRalm => f.write_str("no_ralm"),
            AblationVariant::NoAcousticInput => f.write_str("no_acoustic_input"),
            AblationVariant::SkeletonOnly => f.write_str("skeleton_only"),
            AblationVariant::FsqDimOverride(k) => write!(f, "fsq_dim_override({k})"),
        }
    }
}

impl FromStr for AblationVariant {
    type Err = String;

    /// Accepts the canonical names plus `d<k>` as shorthand for a dimension
    /// override.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        Ok(match s {
            "none" | "default" => AblationVariant::None,
            "no_fsq" => AblationVariant::NoFsq,
            "no_ralm" => AblationVariant::NoRalm,
            "no_acoustic_input" => AblationVariant::NoAcousticInput,
            "skeleton_only" => AblationVariant::SkeletonOnly,
            _ => {
                let inner = s
                    .strip_prefix("fsq_dim_override(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix('d'));
                match inner.and_then(|k| k.parse::<usize>().ok()) {
                    Some(k) if k > 0 => AblationVariant::FsqDimOverride(k),
                    _ => return Err(format!("unknown ablation variant `{s}`")),
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub stable_steps: u64,
    pub decay_steps: u64,
    pub batch_patches: usize,
    pub seed: u64,
    pub ablation_variant: AblationVariant,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    /// Noise draws per patch in each flow-matching step.
    pub flow_repeats: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            final_lr: 5e-6,
            warmup_steps: 1000,
            stable_steps: 4000,
            decay_steps: 1000,
            batch_patches: 512,
            seed: 0,
            ablation_variant: AblationVariant::None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            flow_repeats: 1,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.stable_steps + self.decay_steps
    }

    /// Batch size in patches; doubled during the decay phase.
    pub fn batch_patches_at(&self, step: u64) -> usize {
        if self.decay_steps > 0 && step >= self.warmup_steps + self.stable_steps {
            self.batch_patches * 2
        } else {
            self.batch_patches
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(invalid("peak_lr", "must be positive"));
        }
        if !(self.final_lr > 0.0) {
            return Err(invalid("final_lr", "must be positive"));
        }
        if self.final_lr > self.peak_lr {
            return Err(invalid("final_lr", "must not exceed peak_lr"));
        }
        if self.batch_patches == 0 {
            return Err(invalid("batch_patches", "must be at least 1"));
        }
        if self.flow_repeats == 0 {
            return Err(invalid("flow_repeats", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(invalid("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta2", "must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid("grad_clip", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Warmup-stable-decay learning rate: linear ramp from 0, constant plateau,
/// log-linear anneal to `final_lr`, then held at `final_lr`.
pub fn lr_at_step(cfg: &TrainConfig, step: u64) -> f64 {
    let w = cfg.warmup_steps;
    let s = cfg.stable_steps;
    let d = cfg.decay_steps;
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    if step <= w + s {
        return cfg.peak_lr;
    }
    if step >= w + s + d {
        return cfg.final_lr;
    }
    let frac = (step - w - s) as f64 / d as f64;
    (cfg.peak_lr.ln() + (cfg.final_lr.ln() - cfg.peak_lr.ln()) * frac).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    /// Channel width after the input conv and after each down stage.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kl_weight: f64,
    pub mel_bands: usize,
    pub mel_windows: Vec<usize>,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    /// Training crop length in latent frames.
    pub segment_frames: usize,
    /// Clips per training step.
    pub batch: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128, 128],
            strides: vec![2, 5, 8, 8],
            kl_weight: 5e-5,
            mel_bands: 80,
            mel_windows: vec![512, 1024],
            lr: 1e-3,
            steps: 2000,
            seed: 0,
            segment_frames: 8,
            batch: 8,
        }
    }
}

impl VaeConfig {
    /// Waveform samples per latent frame.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(invalid("vae_strides", "need at least one positive stride"));
        }
        if self.channels.len() != self.strides.len() + 1 || self.channels.contains(&0) {
            return Err(invalid(
                "vae_channels",
                "need one positive width per stride plus the input width",
            ));
        }
        if self.mel_windows.is_empty() || self.mel_windows.iter().any(|&w| w < 8 || w % 4 != 0) {
            return Err(invalid(
                "vae_mel_windows",
                "windows must be multiples of 4 and at least 8",
            ));
        }
        if self.segment_frames == 0 {
            return Err(invalid("vae_segment_frames", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(invalid("vae_batch", "must be at least 1"));
        }
        if self.mel_bands == 0 {
            return Err(invalid("vae_mel_bands", "must be at least 1"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(invalid("vae_kl_weight", "must be non-negative"));
        }
        Ok(())
    }
}

/// Everything a config file can carry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vae: VaeConfig,
}

fn invalid(key: &str, msg: &str) -> Error {
    Error::ConfigInvalid {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| invalid(key, &format!("cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(Error::ConfigParse {
                    line: line_no,
                    msg: format!("missing value for `{key}`"),
                });
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::ConfigParse { msg, .. } => Error::ConfigParse { line: line_no, msg },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.vae.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let a = &mut self.vae;
        match key {
            "model_dim" => m.model_dim = parse_num(key, v)?,
            "heads" => m.heads = parse_num(key, v)?,
            "ffn_dim" => m.ffn_dim = parse_num(key, v)?,
            "tslm_layers" => m.tslm_layers = parse_num(key, v)?,
            "ralm_layers" => m.ralm_layers = parse_num(key, v)?,
            "locenc_layers" => m.locenc_layers = parse_num(key, v)?,
            "locdit_layers" => m.locdit_layers = parse_num(key, v)?,
            "fsq_dim" => m.fsq_dim = parse_num(key, v)?,
            "fsq_levels" => m.fsq_levels = parse_num(key, v)?,
            "patch_size" => m.patch_size = parse_num(key, v)?,
            "latent_dim" => m.latent_dim = parse_num(key, v)?,
            "vocab_size" => m.vocab_size = parse_num(key, v)?,
            "stop_hidden" => m.stop_hidden = parse_num(key, v)?,
            "cfg_mask_prob" => m.cfg_mask_prob = parse_num(key, v)?,
            "stop_loss_weight" => m.stop_loss_weight = parse_num(key, v)?,
            "max_patches" => m.max_patches = parse_num(key, v)?,
            "max_text_len" => m.max_text_len = parse_num(key, v)?,
            "peak_lr" => t.peak_lr = parse_num(key, v)?,
            "final_lr" => t.final_lr = parse_num(key, v)?,
            "warmup_steps" => t.warmup_steps = parse_num(key, v)?,
            "stable_steps" => t.stable_steps = parse_num(key, v)?,
            "decay_steps" => t.decay_steps = parse_num(key, v)?,
            "batch_patches" => t.batch_patches = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "ablation_variant" => t.ablation_variant = v.parse().map_err(|e: String| invalid(key, &e))?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "beta1" => t.beta1 = parse_num(key, v)?,
            "beta2" => t.beta2 = parse_num(key, v)?,
            "grad_clip" => t.grad_clip = parse_num(key, v)?,
            "flow_repeats" => t.flow_repeats = parse_num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "vae_channels" => a.channels = parse_list(key, v)?,
            "vae_strides" => a.strides = parse_list(key, v)?,
            "vae_kl_weight" => a.kl_weight = parse_num(key, v)?,
            "vae_mel_bands" => a.mel_bands = parse_num(key, v)?,
            "vae_mel_windows" => a.mel_windows = parse_list(key, v)?,
            "vae_lr" => a.lr = parse_num(key, v)?,
            "vae_steps" => a.steps = parse_num(key, v)?,
            "vae_seed" => a.seed = parse_num(key, v)?,
            "vae_segment_frames" => a.segment_frames = parse_num(key, v)?,
            "vae_batch" => a.batch = parse_num(key, v)?,
            _ => {
                return Err(Error::ConfigParse {
                    line: 0,
                    msg: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Full key list, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let a = &self.vae;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("model_dim", m.model_dim.to_string());
        kv("heads", m.heads.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("tslm_layers", m.tslm_layers.to_string());
        kv("ralm_layers", m.ralm_layers.to_string());
        kv("locenc_layers", m.locenc_layers.to_string());
        kv("locdit_layers", m.locdit_layers.to_string());
        kv("fsq_dim", m.fsq_dim.to_string());
        kv("fsq_levels", m.fsq_levels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("latent_dim", m.latent_dim.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("stop_hidden", m.stop_hidden.to_string());
        kv("cfg_mask_prob", fmt_f64(m.cfg_mask_prob));
        kv("stop_loss_weight", fmt_f64(m.stop_loss_weight));
        kv("max_patches", m.max_patches.to_string());
        kv("max_text_len", m.max_text_len.to_string());
        kv("peak_lr", fmt_f64(t.peak_lr));
        kv("final_lr", fmt_f64(t.final_lr));
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("stable_steps", t.stable_steps.to_string());
        kv("decay_steps", t.decay_steps.to_string());
        kv("batch_patches", t.batch_patches.to_string());
        kv("seed", t.seed.to_string());
        kv("ablation_variant", t.ablation_variant.to_string());
        kv("weight_decay", fmt_f64(t.weight_decay));
        kv("beta1", fmt_f64(t.beta1));
        kv("beta2", fmt_f64(t.beta2));
        kv("grad_clip", fmt_f64(t.grad_clip));
        kv("flow_repeats", t.flow_repeats.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("vae_channels", join(&a.channels));
        kv("vae_strides", join(&a.strides));
        kv("vae_kl_weight", fmt_f64(a.kl_weight));
        kv("vae_mel_bands", a.mel_bands.to_string());
        kv("vae_mel_windows", join(&a.mel_windows));
        kv("vae_lr", fmt_f64(a.lr));
        kv("vae_steps", a.steps.to_string());
        kv("vae_seed", a.seed.to_string());
        kv("vae_segment_frames", a.segment_frames.to_string());
        kv("vae_batch", a.batch.to_string());
        s
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Reads a config file into model and training configs.
pub fn load_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let cfg = Config::load(path)?;
    Ok((cfg.model, cfg.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.model.model_dim, 128);
        assert_eq!(cfg.model.patch_size, 2);
        assert_eq!(cfg.model.cfg_mask_prob, 0.1);
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn nine_levels_give_half_range_four() {
        let cfg = Config::parse("fsq_levels = 9\n").unwrap();
        assert_eq!(cfg.model.fsq_half_levels(), 4);
    }

    #[test]
    fn even_levels_rejected() {
        let err = Config::parse("fsq_levels = 8").unwrap_err();
        assert!(err.to_string().contains("fsq_levels must be odd"), "{err}");
        assert!(matches!(err, Error::ConfigInvalid { ref key, .. } if key == "fsq_levels"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Config::parse("# header\nmodel_dim = 64\nbogus line\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 3, .. }), "{err}");
        let err = Config::parse("\n\nwhat = 1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 3, .. }), "{err}");
    }

    #[test]
    fn invariant_violations_name_the_key() {
        for (text, key) in [
            ("fsq_dim = 512", "fsq_dim"),
            ("tslm_layers = 0", "tslm_layers"),
            ("final_lr = 0.1", "final_lr"),
            ("cfg_mask_prob = 1.5", "cfg_mask_prob"),
            ("model_dim = abc", "model_dim"),
        ] {
            match Config::parse(text).unwrap_err() {
                Error::ConfigInvalid { key: k, .. } => assert_eq!(k, key),
                other => panic!("{text}: unexpected {other}"),
            }
        }
    }

    #[test]
    fn comments_and_variants_parse() {
        let cfg = Config::parse("ablation_variant = d4  # sweep\nseed=7").unwrap();
        assert_eq!(cfg.train.ablation_variant, AblationVariant::FsqDimOverride(4));
        assert_eq!(cfg.train.seed, 7);
        for v in [
            "none",
            "no_fsq",
            "no_ralm",
            "no_acoustic_input",
            "skeleton_only",
            "fsq_dim_override(16)",
        ] {
            let parsed: AblationVariant = v.parse().unwrap();
            assert_eq!(parsed.to_string(), v);
        }
        assert!("d0".parse::<AblationVariant>().is_err());
    }

    fn reference_schedule() -> TrainConfig {
        TrainConfig {
            warmup_steps: 100,
            stable_steps: 400,
            decay_steps: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn wsd_endpoints() {
        let cfg = reference_schedule();
        assert_eq!(lr_at_step(&cfg, 0), 0.0);
        assert_eq!(lr_at_step(&cfg, 100), 1e-4);
        assert_eq!(lr_at_step(&cfg, 600), 5e-6);
        assert_eq!(lr_at_step(&cfg, 10_000), 5e-6);
    }

    #[test]
    fn wsd_shape() {
        let cfg = reference_schedule();
        let lr: Vec<f64> = (0..=700).map(|s| lr_at_step(&cfg, s)).collect();
        for s in 0..100 {
            assert!(lr[s + 1] >= lr[s]);
        }
        for s in 100..500 {
            assert_eq!(lr[s], 1e-4);
        }
        for s in 500..600 {
            assert!(lr[s + 1] < lr[s], "decay not strictly decreasing at {s}");
        }
        // continuity at the phase boundaries
        assert!((lr[99] - lr[100]).abs() <= 1e-4 / 100.0 + 1e-18);
        assert!((lr[500] - lr[501]).abs() < 1e-5);
        assert!((lr[599] - lr[600]).abs() < 1e-6);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let cfg = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_step(&cfg, 0), cfg.peak_lr);
    }

    #[test]
    fn batch_doubles_in_decay() {
        let cfg = reference_schedule();
        assert_eq!(cfg.batch_patches_at(0), 512);
        assert_eq!(cfg.batch_patches_at(499), 512);
        assert_eq!(cfg.batch_patches_at(500), 1024);
    }

    proptest! {
        #[test]
        fn config_round_trips(
            dim_mult in 1usize..8,
            levels in 1usize..6,
            lr in 1e-6f64..1e-2,
            seed in any::<u64>(),
            mask in 0.0f64..1.0,
            variant in 0usize..6,
        ) {
            let mut cfg = Config::default();
            cfg.model.model_dim = 16 * dim_mult;
            cfg.model.heads = 2;
            cfg.model.fsq_dim = 8;
            cfg.model.fsq_levels = 2 * levels + 1;
            cfg.model.cfg_mask_prob = mask;
            cfg.train.peak_lr = lr;
            cfg.train.final_lr = lr / 3.0;
            cfg.train.seed = seed;
            cfg.train.ablation_variant = [
                AblationVariant::None,
                AblationVariant::NoFsq,
                AblationVariant::NoRalm,
                AblationVariant::NoAcousticInput,
                AblationVariant::SkeletonOnly,
                AblationVariant::FsqDimOverride(4),
            ][variant];
            let back = Config::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
