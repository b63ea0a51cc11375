//! Autoregressive patch generation.
//!
//! Each slot runs one cached TSLM step, quantizes, scores stop, runs one
//! cached RALM step, samples a patch with LocDiT and feeds it back through
//! LocEnc. An optional prompt (text plus latents) is teacher-forced first;
//! its patches are not part of the output.

use crate::autodiff::sigmoid;
use crate::backbone::{BackboneState, SlotOutput};
use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::locdit::sample_patch;
use crate::model::TtsModel;
use crate::parallel::mix_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSettings {
    pub steps: usize,
    pub cfg_scale: f32,
    pub seed: u64,
    /// Cap on generated patches; the model's `max_patches` when `None`.
    pub max_patches: Option<usize>,
    /// Stop when the stop head fires. When false, exactly `max_patches`
    /// patches are produced.
    pub use_stop: bool,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            steps: 32,
            cfg_scale: 2.0,
            seed: 0,
            max_patches: None,
            use_stop: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    StopHead,
    MaxPatches,
}

/// Voice prompt: its transcript and its latent frames.
#[derive(Clone, Debug)]
pub struct Prompt {
    pub text: String,
    pub latents: Tensor,
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Generated frames, `(patches · P) × D`.
    pub latents: Tensor,
    pub patches: usize,
    pub stop_reason: StopReason,
    /// Stop-head logit at each generated slot.
    pub stop_logits: Vec<f32>,
    /// First slot (0-based) whose stop probability exceeded 0.5.
    pub first_stop: Option<usize>,
}

pub struct GenerationSession<'m> {
    model: &'m TtsModel,
    state: BackboneState,
    prev_patch: Tensor,
    settings: SynthSettings,
    cap: usize,
    emitted: Vec<Tensor>,
    stop_logits: Vec<f32>,
    first_stop: Option<usize>,
    finished: Option<StopReason>,
}

fn prompt_patches(model: &TtsModel, prompt: &Prompt) -> Result<Vec<Tensor>> {
    let p = model.patch_size();
    if prompt.latents.cols() != model.config.latent_dim {
        return Err(Error::Shape(format!(
            "prompt latents are {}-dim, model expects {}",
            prompt.latents.cols(),
            model.config.latent_dim
        )));
    }
    Ok((0..prompt.latents.rows() / p)
        .map(|k| prompt.latents.slice_rows(k * p, p))
        .collect())
}

impl<'m> GenerationSession<'m> {
    pub fn new(model: &'m TtsModel, text: &str, prompt: Option<&Prompt>, settings: SynthSettings) -> Result<Self> {
        if settings.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        let full_text = match prompt {
            Some(pr) => format!("{}{}", pr.text, text),
            None => text.to_string(),
        };
        let tokens = tokenize(&full_text);
        let params = &model.params;
        let bb = &model.backbone;
        let mut state = bb.prefill_text(params, &tokens)?;
        let mut prev_patch = params.tensor(model.locdit.start_patch()).clone();
        if let Some(pr) = prompt {
            for patch in prompt_patches(model, pr)? {
                bb.step(params, &mut state)?;
                bb.push_patch(params, &mut state, &patch);
                prev_patch = patch;
            }
        }
        let room = model.config.max_patches.saturating_sub(state.slots());
        let cap = settings.max_patches.unwrap_or(model.config.max_patches).min(room);
        Ok(Self {
            model,
            state,
            prev_patch,
            settings,
            cap,
            emitted: Vec::new(),
            stop_logits: Vec::new(),
            first_stop: None,
            finished: (cap == 0).then_some(StopReason::MaxPatches),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.finished.is_some()
    }

    /// Generates the next patch, or `None` once generation has ended.
    pub fn next_patch(&mut self) -> Result<Option<(Tensor, SlotOutput)>> {
        if self.finished.is_some() {
            return Ok(None);
        }
        let m = self.model;
        let i = self.emitted.len();
        let slot = m.backbone.step(&m.params, &mut self.state)?;
        let s = &self.settings;
        let patch = sample_patch(
            &m.field(),
            &slot.h_final,
            &self.prev_patch,
            s.steps,
            s.cfg_scale,
            mix_seed(s.seed, i as u64, 0),
        );
        if !patch.all_finite() {
            return Err(Error::NonFiniteLatent { slot: i });
        }
        m.backbone.push_patch(&m.params, &mut self.state, &patch);
        self.prev_patch = patch.clone();
        self.emitted.push(patch.clone());
        self.stop_logits.push(slot.stop_logit);
        let fires = sigmoid(slot.stop_logit) > 0.5;
        if fires && self.first_stop.is_none() {
            self.first_stop = Some(i);
        }
        if fires && s.use_stop {
            self.finished = Some(StopReason::StopHead);
        } else if self.emitted.len() >= self.cap {
            self.finished = Some(StopReason::MaxPatches);
        }
        Ok(Some((patch, slot)))
    }

    pub fn finish(mut self) -> Result<Generation> {
        while self.next_patch()?.is_some() {}
        let refs: Vec<&Tensor> = self.emitted.iter().collect();
        let latents = if refs.is_empty() {
            Tensor::zeros(0, self.model.config.latent_dim)
        } else {
            Tensor::concat_rows(&refs)
        };
        Ok(Generation {
            latents,
            patches: self.emitted.len(),
            stop_reason: self.finished.unwrap_or(StopReason::MaxPatches),
            stop_logits: self.stop_logits,
            first_stop: self.first_stop,
        })
    }
}

pub fn generate(model: &TtsModel, text: &str, prompt: Option<&Prompt>, settings: SynthSettings) -> Result<Generation> {
    GenerationSession::new(model, text, prompt, settings)?.finish()
}

/// Same sampling as [`generate`] but recomputing the whole prefix with a
/// full teacher-forced pass at every slot. Slow; a reference for the cache.
pub fn generate_recompute(
    model: &TtsModel,
    text: &str,
    prompt: Option<&Prompt>,
    settings: SynthSettings,
) -> Result<Generation> {
    let p = model.patch_size();
    let d = model.config.latent_dim;
    let full_text = match prompt {
        Some(pr) => format!("{}{}", pr.text, text),
        None => text.to_string(),
    };
    let tokens = tokenize(&full_text);
    let mut history = match prompt {
        Some(pr) => prompt_patches(model, pr)?,
        None => Vec::new(),
    };
    let n_prompt = history.len();
    let room = model.config.max_patches.saturating_sub(n_prompt);
    let cap = settings.max_patches.unwrap_or(model.config.max_patches).min(room);
    let mut prev = history
        .last()
        .cloned()
        .unwrap_or_else(|| model.params.tensor(model.locdit.start_patch()).clone());
    let mut out = Vec::new();
    let mut stop_logits = Vec::new();
    let mut first_stop = None;
    let mut reason = StopReason::MaxPatches;
    while out.len() < cap {
        let i = out.len();
        // the current slot never sees its own patch, so a placeholder is fine
        let placeholder = Tensor::zeros(p, d);
        let mut refs: Vec<&Tensor> = history.iter().collect();
        refs.push(&placeholder);
        let frames = Tensor::concat_rows(&refs);
        let full = model.backbone.evaluate(&model.params, &tokens, &frames)?;
        let row = n_prompt + i;
        let cond = full.h_final.slice_rows(row, 1);
        let logit = full.stop_logits[row];
        let patch = sample_patch(
            &model.field(),
            &cond,
            &prev,
            settings.steps,
            settings.cfg_scale,
            mix_seed(settings.seed, i as u64, 0),
        );
        if !patch.all_finite() {
            return Err(Error::NonFiniteLatent { slot: i });
        }
        history.push(patch.clone());
        out.push(patch.clone());
        prev = patch;
        stop_logits.push(logit);
        let fires = sigmoid(logit) > 0.5;
        if fires && first_stop.is_none() {
            first_stop = Some(i);
        }
        if fires && settings.use_stop {
            reason = StopReason::StopHead;
            break;
        }
    }
    let refs: Vec<&Tensor> = out.iter().collect();
    Ok(Generation {
        latents: if refs.is_empty() {
            Tensor::zeros(0, d)
        } else {
            Tensor::concat_rows(&refs)
        },
        patches: out.len(),
        stop_reason: reason,
        stop_logits,
        first_stop,
    })
}
