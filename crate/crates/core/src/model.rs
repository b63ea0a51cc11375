//! The full text-to-latent model and its teacher-forced training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Graph, ParamGrads, Unary};
use crate::backbone::{namespace_rng, stop_labels, Backbone, PackedSeq};
use crate::config::{AblationVariant, ModelConfig};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::locdit::{gaussian, LocDit, LocDitField};
use crate::nn::{Init, ParamStore};
use crate::tensor::Tensor;

/// Parameter namespaces in reporting order.
pub const MODULES: [&str; 7] = ["locenc", "tslm", "fsq.down", "fsq.up", "ralm", "stop", "locdit"];

/// Namespace a parameter belongs to.
pub fn module_of(name: &str) -> &'static str {
    MODULES
        .iter()
        .copied()
        .find(|m| name.starts_with(m) && name[m.len()..].starts_with('.'))
        .unwrap_or("other")
}

#[derive(Clone, Debug)]
pub struct TtsModel {
    pub config: ModelConfig,
    pub variant: AblationVariant,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub locdit: LocDit,
}

impl TtsModel {
    /// Fresh model. `config` is the base configuration; the variant's
    /// overrides (e.g. FSQ width) are applied here.
    pub fn new(config: &ModelConfig, variant: AblationVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let config = variant.apply(config);
        config.validate()?;
        let mut params = ParamStore::default();
        let backbone = Backbone::new(&mut params, &config, variant, seed);
        let mut rng = namespace_rng(seed, "locdit");
        let locdit = LocDit::new(
            &mut Init {
                store: &mut params,
                rng: &mut rng,
            },
            &config,
        );
        Ok(Self {
            config,
            variant,
            params,
            backbone,
            locdit,
        })
    }

    pub fn field(&self) -> LocDitField<'_> {
        LocDitField {
            dit: &self.locdit,
            params: &self.params,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    /// Per-namespace scalar counts, for logs and the CLI.
    pub fn param_summary(&self) -> Vec<(&'static str, usize)> {
        let mut out: Vec<(&'static str, usize)> = MODULES.iter().map(|&m| (m, 0)).collect();
        for (_, name, t) in self.params.iter() {
            let m = module_of(name);
            if let Some(slot) = out.iter_mut().find(|(k, _)| *k == m) {
                slot.1 += t.len();
            }
        }
        out
    }
}

/// One utterance prepared for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Frames padded to whole patches.
    pub frames: Tensor,
    /// Real (unpadded) frame count.
    pub valid_frames: usize,
}

impl TrainItem {
    pub fn from_utterance(u: &Utterance, patch: usize) -> Self {
        let (frames, valid_frames) = u.padded(patch);
        Self {
            id: u.id.clone(),
            tokens: u.tokens(),
            frames,
            valid_frames,
        }
    }

    pub fn num_patches(&self, patch: usize) -> usize {
        self.frames.rows() / patch
    }
}

/// How one utterance enters a loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub item: &'a TrainItem,
    /// Replace the conditioning with the learned null embedding.
    pub cfg_masked: bool,
    /// Seed for this utterance's `t` and noise draws.
    pub seed: u64,
}

/// Settings shared by every utterance in one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    /// Noise draws per patch.
    pub repeats: usize,
    /// Divisor for the summed squared velocity error.
    pub flow_norm: f64,
    /// Divisor for the summed stop cross-entropy.
    pub stop_norm: f64,
    pub stop_weight: f64,
    pub with_grads: bool,
}

/// Unnormalised sums plus parameter gradients of the normalised loss.
#[derive(Clone, Debug)]
pub struct LossSums {
    pub flow_sq_sum: f64,
    pub flow_count: f64,
    pub stop_bce_sum: f64,
    pub stop_correct: usize,
    pub patches: usize,
    pub grads: ParamGrads,
}

/// Per-utterance `t` values and noisy inputs, a pure function of its seed.
fn draw_noise(item: &TrainItem, seed: u64, patch: usize, repeats: usize) -> (Vec<f32>, Tensor) {
    let m = item.num_patches(patch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts: Vec<f32> = (0..m * repeats)
        .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
        .collect();
    let eps = gaussian(m * repeats * patch, item.frames.cols(), &mut rng);
    (ts, eps)
}

/// Teacher-forced flow + stop loss for several utterances in one graph.
///
/// The graph loss is `Σ w·(v − target)² / flow_norm + λ Σ BCE / stop_norm`
/// over valid frames; the returned sums are unnormalised.
pub fn packed_loss(model: &TtsModel, items: &[LossItem], s: &LossSettings) -> Result<LossSums> {
    let p = model.config.patch_size;
    let d = model.config.latent_dim;
    let r = s.repeats.max(1);
    for it in items {
        if it.item.num_patches(p) == 0 {
            return Err(Error::TooShort {
                len: it.item.frames.rows(),
                min: p,
            });
        }
    }
    let mut g = if s.with_grads {
        Graph::new(&model.params)
    } else {
        Graph::inference(&model.params)
    };
    let frames_all = Tensor::concat_rows(&items.iter().map(|it| &it.item.frames).collect::<Vec<_>>());
    let total_m = frames_all.rows() / p;
    let frames = g.constant(frames_all);
    let seqs: Vec<PackedSeq> = items
        .iter()
        .map(|it| PackedSeq {
            tokens: &it.item.tokens,
            patches: it.item.num_patches(p),
        })
        .collect();
    let bv = model.backbone.forward_packed(&mut g, &seqs, frames)?;

    // LocDiT rows: per utterance, per repeat, per patch.
    let null = g.param(model.locdit.null_embedding());
    let cond_table = g.concat_rows(&[bv.h_final, null]);
    let start = g.param(model.locdit.start_patch());
    let prev_table = g.concat_rows(&[start, frames]);
    let rows = total_m * r * p;
    let mut cond_idx = Vec::with_capacity(total_m * r);
    let mut prev_idx = Vec::with_capacity(rows);
    let mut ts = Vec::with_capacity(total_m * r);
    let mut z_t = Tensor::zeros(rows, d);
    let mut target = Tensor::zeros(rows, d);
    let mut weight = Tensor::zeros(rows, d);
    let mut valid_row = vec![false; rows];
    let w = (1.0 / s.flow_norm) as f32;
    let (mut patch_off, mut row) = (0, 0);
    for it in items {
        let m = it.item.num_patches(p);
        let (t_u, eps) = draw_noise(it.item, it.seed, p, r);
        for k in 0..m * r {
            let j = k % m;
            cond_idx.push(if it.cfg_masked { total_m } else { patch_off + j });
            ts.push(t_u[k]);
            for f in 0..p {
                let src = j * p + f;
                // previous patch: the start patch, or patch j-1 of this utterance
                prev_idx.push(if j == 0 { f } else { p + (patch_off + j - 1) * p + f });
                let z0 = it.item.frames.row(src);
                let e = eps.row(k * p + f);
                let t = t_u[k];
                let valid = src < it.item.valid_frames;
                valid_row[row] = valid;
                for c in 0..d {
                    z_t.set(row, c, (1.0 - t) * z0[c] + t * e[c]);
                    target.set(row, c, e[c] - z0[c]);
                    if valid {
                        weight.set(row, c, w);
                    }
                }
                row += 1;
            }
        }
        patch_off += m;
    }
    let cond = g.gather_rows(cond_table, &cond_idx);
    let z_prev = g.gather_rows(prev_table, &prev_idx);
    let zt = g.constant(z_t);
    let v = model.locdit.velocity(&mut g, zt, z_prev, &ts, cond);
    let target = g.constant(target);
    let diff = g.sub(v, target);
    let sq = g.unary(diff, Unary::Square);
    let weight = g.constant(weight);
    let weighted = g.mul(sq, weight);
    let flow = g.sum_all(weighted);

    let mut labels = Vec::with_capacity(total_m);
    for it in items {
        labels.extend(stop_labels(it.item.num_patches(p)));
    }
    let sw = vec![(s.stop_weight / s.stop_norm) as f32; total_m];
    let stop = g.bce_logits_sum(bv.stop_logits, &labels, &sw);
    let loss = g.add(flow, stop);

    let sq_vals = g.value(sq);
    let flow_sq_sum: f64 = (0..rows)
        .filter(|&i| valid_row[i])
        .map(|i| sq_vals.row(i).iter().map(|&x| x as f64).sum::<f64>())
        .sum();
    let logits = g.value(bv.stop_logits).data().to_vec();
    let mut stop_bce_sum = 0.0f64;
    let mut stop_correct = 0;
    for (&z, &y) in logits.iter().zip(&labels) {
        stop_bce_sum += bce_with_logits(z as f64, y as f64);
        stop_correct += ((sigmoid(z) > 0.5) == (y > 0.5)) as usize;
    }
    let grads = if s.with_grads {
        g.backward(loss).into_params()
    } else {
        ParamGrads::empty(model.params.len())
    };
    let valid_frames: usize = items.iter().map(|it| it.item.valid_frames).sum();
    Ok(LossSums {
        flow_sq_sum,
        flow_count: (valid_frames * d * r) as f64,
        stop_bce_sum,
        stop_correct,
        patches: total_m,
        grads,
    })
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticCorpusSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            model_dim: 16,
            heads: 2,
            ffn_dim: 32,
            tslm_layers: 1,
            ralm_layers: 1,
            locenc_layers: 1,
            locdit_layers: 1,
            fsq_dim: 4,
            latent_dim: 3,
            stop_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn module_namespaces() {
        assert_eq!(module_of("fsq.down.w"), "fsq.down");
        assert_eq!(module_of("tslm.layers.0.attn.qkv.w"), "tslm");
        assert_eq!(module_of("locdit.null_embedding"), "locdit");
        assert_eq!(module_of("locditx.w"), "other");
    }

    #[test]
    fn packing_matches_separate_evaluation() {
        let cfg = tiny_config();
        let model = TtsModel::new(&cfg, AblationVariant::None, 1).unwrap();
        let spec = SyntheticCorpusSpec {
            num_utterances: 3,
            ..SyntheticCorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec, cfg.latent_dim).unwrap();
        let items: Vec<TrainItem> = corpus
            .iter()
            .map(|u| TrainItem::from_utterance(u, cfg.patch_size))
            .collect();
        let req: Vec<LossItem> = items
            .iter()
            .enumerate()
            .map(|(i, item)| LossItem {
                item,
                cfg_masked: i == 1,
                seed: 10 + i as u64,
            })
            .collect();
        let s = LossSettings {
            repeats: 2,
            flow_norm: 100.0,
            stop_norm: 10.0,
            stop_weight: 1.0,
            with_grads: true,
        };
        let packed = packed_loss(&model, &req, &s).unwrap();
        assert!(packed.grads.sq_norm() > 0.0);
        let mut flow = 0.0;
        let mut bce = 0.0;
        let mut grads = ParamGrads::empty(model.params.len());
        for r in &req {
            let one = packed_loss(&model, std::slice::from_ref(r), &s).unwrap();
            flow += one.flow_sq_sum;
            bce += one.stop_bce_sum;
            grads.merge(one.grads);
        }
        assert!((flow - packed.flow_sq_sum).abs() < 1e-4 * flow);
        assert!((bce - packed.stop_bce_sum).abs() < 1e-5 * bce.max(1.0));
        let diff: f64 = grads
            .iter()
            .map(|(id, g)| g.max_abs_diff(packed.grads.get(id).unwrap()) as f64)
            .fold(0.0, f64::max);
        assert!(diff < 1e-4, "{diff}");

        let eval = packed_loss(&model, &req, &LossSettings { with_grads: false, ..s }).unwrap();
        assert_eq!(eval.flow_sq_sum, packed.flow_sq_sum);
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_with_logits(2.0, 0.0) - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!(bce_with_logits(-800.0, 0.0).abs() < 1e-12);
    }
}
