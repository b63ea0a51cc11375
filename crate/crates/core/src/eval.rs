//! Teacher-forced and free-running evaluation on a latent corpus.

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::Result;
use crate::infer::{generate, SynthSettings};
use crate::model::{packed_loss, LossItem, LossSettings, TrainItem, TtsModel};
use crate::parallel::{self, mix_seed, Exec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub steps: usize,
    pub cfg_scale: f32,
    pub seed: u64,
    /// Noise draws per patch for the teacher-forced flow loss.
    pub flow_draws: usize,
    /// Run free generation and score it against the reference latents.
    pub generate: bool,
    pub exec: Exec,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            steps: 32,
            cfg_scale: 1.0,
            seed: 0,
            flow_draws: 16,
            generate: true,
            exec: Exec::default_mode(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub id: String,
    /// Real (unpadded) latent frames; aggregate weights.
    pub frames: usize,
    pub target_patches: usize,
    /// Mean squared velocity error per coordinate, true conditioning.
    pub flow_loss: f64,
    /// Same draws with the null conditioning.
    pub null_flow_loss: f64,
    pub stop_correct: usize,
    /// Per-frame MSE of a generation forced to the reference length.
    pub generation_mse: Option<f64>,
    /// Slot (1-based count) at which free generation would stop, if within
    /// the reference length.
    pub stop_patch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub utterances: Vec<UtteranceEval>,
    pub flow_loss: f64,
    pub null_flow_loss: f64,
    pub stop_accuracy: f64,
    pub generation_mse: Option<f64>,
    /// Fraction of utterances whose stop fires exactly at the last patch.
    pub stop_exact_rate: f64,
}

impl EvalReport {
    /// Aggregates recomputed from the rows: frame-weighted means for the
    /// losses and MSE, pooled over patches for stop accuracy.
    pub fn from_rows(variant: String, utterances: Vec<UtteranceEval>) -> Self {
        let total_frames: f64 = utterances.iter().map(|u| u.frames as f64).sum::<f64>().max(1.0);
        let weighted = |f: &dyn Fn(&UtteranceEval) -> f64| -> f64 {
            utterances.iter().map(|u| f(u) * u.frames as f64).sum::<f64>() / total_frames
        };
        let flow_loss = weighted(&|u| u.flow_loss);
        let null_flow_loss = weighted(&|u| u.null_flow_loss);
        let generation_mse = utterances
            .iter()
            .all(|u| u.generation_mse.is_some())
            .then(|| weighted(&|u| u.generation_mse.unwrap_or(f64::NAN)));
        let patches: usize = utterances.iter().map(|u| u.target_patches).sum();
        let correct: usize = utterances.iter().map(|u| u.stop_correct).sum();
        let exact = utterances.iter().filter(|u| u.stop_correct == u.target_patches).count();
        Self {
            variant,
            flow_loss,
            null_flow_loss,
            stop_accuracy: correct as f64 / patches.max(1) as f64,
            generation_mse,
            stop_exact_rate: exact as f64 / utterances.len().max(1) as f64,
            utterances,
        }
    }

    /// Aligned text: one row per utterance, then the aggregate.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>7} {:>10} {:>10} {:>9} {:>12} {:>6}\n",
            "id", "patches", "flow", "null_flow", "stop_acc", "gen_mse", "stop@"
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for u in &self.utterances {
            s.push_str(&format!(
                "{:<14} {:>7} {:>10.6} {:>10.6} {:>9.4} {:>12} {:>6}\n",
                u.id,
                u.target_patches,
                u.flow_loss,
                u.null_flow_loss,
                u.stop_correct as f64 / u.target_patches.max(1) as f64,
                opt(u.generation_mse),
                u.stop_patch.map_or_else(|| "-".to_string(), |p| p.to_string()),
            ));
        }
        s.push_str(&format!(
            "{:<14} {:>7} {:>10.6} {:>10.6} {:>9.4} {:>12} {:>6}\n",
            format!("[{}]", self.variant),
            self.utterances.iter().map(|u| u.target_patches).sum::<usize>(),
            self.flow_loss,
            self.null_flow_loss,
            self.stop_accuracy,
            opt(self.generation_mse),
            "",
        ));
        s
    }
}

pub fn evaluate(model: &TtsModel, corpus: &[Utterance], settings: &EvalSettings) -> Result<EvalReport> {
    let p = model.patch_size();
    let d = model.config.latent_dim;
    let items: Vec<TrainItem> = corpus.iter().map(|u| TrainItem::from_utterance(u, p)).collect();
    let rows = parallel::map(settings.exec, &items, |i, item| -> Result<UtteranceEval> {
        let seed = mix_seed(settings.seed, i as u64, 1);
        let ls = LossSettings {
            repeats: settings.flow_draws.max(1),
            flow_norm: 1.0,
            stop_norm: 1.0,
            stop_weight: 1.0,
            with_grads: false,
        };
        let cond = packed_loss(
            model,
            &[LossItem {
                item,
                cfg_masked: false,
                seed,
            }],
            &ls,
        )?;
        let null = packed_loss(
            model,
            &[LossItem {
                item,
                cfg_masked: true,
                seed,
            }],
            &ls,
        )?;
        let m = item.num_patches(p);
        let (generation_mse, stop_patch) = if settings.generate {
            let text = &corpus[i].text;
            let g = generate(
                model,
                text,
                None,
                SynthSettings {
                    steps: settings.steps,
                    cfg_scale: settings.cfg_scale,
                    seed: mix_seed(settings.seed, i as u64, 2),
                    max_patches: Some(m),
                    use_stop: false,
                },
            )?;
            let n = item.valid_frames;
            let se: f64 = (0..n)
                .map(|r| {
                    g.latents
                        .row(r)
                        .iter()
                        .zip(item.frames.row(r))
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum::<f64>()
                })
                .sum();
            (Some(se / (n * d) as f64), g.first_stop.map(|s| s + 1))
        } else {
            (None, None)
        };
        Ok(UtteranceEval {
            id: item.id.clone(),
            frames: item.valid_frames,
            target_patches: m,
            flow_loss: cond.flow_sq_sum / cond.flow_count,
            null_flow_loss: null.flow_sq_sum / null.flow_count,
            stop_correct: cond.stop_correct,
            generation_mse,
            stop_patch,
        })
    });
    let utterances = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(model.variant.to_string(), utterances))
}
