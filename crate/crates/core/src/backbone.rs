//! The autoregressive LM side: LocEnc turns latent patches into acoustic
//! embeddings, the TSLM plans over text plus acoustic history, the FSQ
//! bottleneck turns its audio-slot hiddens into a lattice skeleton, the RALM
//! predicts a continuous residual on top of that skeleton, and a small MLP
//! scores end-of-sequence from the skeleton.
//!
//! Sequence layout for TSLM: `[BOS, t_1..t_N, a_1..a_M]`. Audio slot `j`
//! receives `E_{j-1}` (a learned audio-BOS at `j = 1`), so its hidden depends
//! on the text and on patches strictly before `j`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::config::{AblationVariant, ModelConfig, BOS_TOKEN};
use crate::error::{Error, Result};
use crate::fsq::{FsqBottleneck, FsqLattice};
use crate::nn::{Init, KvCache, Linear, ParamStore, Stack};
use crate::parallel::mix_seed;
use crate::tensor::Tensor;

/// Local patch encoder: per-frame lift, learned intra-patch positions,
/// bidirectional layers, mean pool.
#[derive(Clone, Debug)]
pub struct LocEnc {
    lift: Linear,
    pos: ParamId,
    stack: Stack,
    patch: usize,
}

impl LocEnc {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        Self {
            lift: Linear::new(init, "locenc.lift", cfg.latent_dim, cfg.model_dim, true),
            pos: init.normal("locenc.pos", cfg.patch_size, cfg.model_dim, 0.1),
            stack: Stack::new(init, "locenc", cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.locenc_layers),
            patch: cfg.patch_size,
        }
    }

    /// `frames` is `(M·P) × D`; returns `M × model_dim`.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Var {
        let rows = g.shape(frames).0;
        assert!(
            rows.is_multiple_of(self.patch),
            "frame count not a multiple of the patch size"
        );
        let x = self.lift.forward(g, frames);
        let pos = g.param(self.pos);
        let pos = g.tile_rows(pos, rows / self.patch);
        let x = g.add(x, pos);
        let h = self.stack.forward_blocks(g, x, self.patch);
        g.mean_blocks(h, self.patch)
    }
}

/// Text-semantic LM.
#[derive(Clone, Debug)]
pub struct Tslm {
    embed: ParamId,
    audio_bos: ParamId,
    stack: Stack,
}

/// Residual acoustic LM.
#[derive(Clone, Debug)]
pub struct Ralm {
    fuse: Linear,
    null_acoustic: Option<ParamId>,
    stack: Stack,
}

/// Three-layer MLP emitting one stop logit per audio slot.
#[derive(Clone, Debug)]
pub struct StopHead {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl StopHead {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        Self {
            l1: Linear::new(init, "stop.l1", cfg.model_dim, cfg.stop_hidden, true),
            l2: Linear::new(init, "stop.l2", cfg.stop_hidden, cfg.stop_hidden, true),
            l3: Linear::new(init, "stop.l3", cfg.stop_hidden, 1, true),
        }
    }

    /// `rows × model_dim` skeleton projections to `rows × 1` logits.
    pub fn forward(&self, g: &mut Graph, skeleton_up: Var) -> Var {
        let h = self.l1.forward(g, skeleton_up);
        let h = g.silu(h);
        let h = self.l2.forward(g, h);
        let h = g.silu(h);
        self.l3.forward(g, h)
    }
}

/// One utterance inside a packed teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct PackedSeq<'a> {
    pub tokens: &'a [usize],
    pub patches: usize,
}

/// Graph handles for one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    /// Acoustic embeddings `E_1..E_M`.
    pub acoustic: Var,
    /// TSLM hiddens over all `1 + N + M` positions.
    pub h_tslm: Var,
    pub pre_q: Var,
    pub lattice_vec: Var,
    /// Up-projected skeleton per audio slot.
    pub skeleton_up: Var,
    pub residual: Option<Var>,
    pub h_final: Var,
    pub stop_logits: Var,
}

/// Concrete per-slot outputs, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub h_tslm: Tensor,
    pub pre_q: Tensor,
    pub lattice_vec: Tensor,
    pub skeleton_up: Tensor,
    pub residual: Tensor,
    pub h_final: Tensor,
    pub stop_logits: Vec<f32>,
}

/// Incremental decoding state.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    tslm: KvCache,
    ralm: Option<KvCache>,
    /// `E_{i-1}` for the next slot, `None` meaning the audio-BOS embedding.
    prev_embedding: Option<Tensor>,
    text_positions: usize,
    slots: usize,
}

impl BackboneState {
    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn text_positions(&self) -> usize {
        self.text_positions
    }
}

/// Everything computed for one new audio slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotOutput {
    pub h_tslm: Tensor,
    pub pre_q: Tensor,
    pub lattice_vec: Tensor,
    pub skeleton_up: Tensor,
    pub residual: Tensor,
    pub h_final: Tensor,
    pub stop_logit: f32,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub locenc: LocEnc,
    pub tslm: Tslm,
    pub fsq: FsqBottleneck,
    pub ralm: Option<Ralm>,
    pub stop: StopHead,
    cfg: ModelConfig,
    variant: AblationVariant,
}

/// Independent RNG stream per namespace, so variants that drop one module
/// leave every other module's initial weights untouched.
pub(crate) fn namespace_rng(seed: u64, namespace: &str) -> ChaCha8Rng {
    let h = namespace.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(mix_seed(seed, h, 0))
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, variant: AblationVariant, seed: u64) -> Self {
        let mut rng = namespace_rng(seed, "locenc");
        let locenc = LocEnc::new(&mut Init { store, rng: &mut rng }, cfg);

        let mut rng = namespace_rng(seed, "tslm");
        let mut init = Init { store, rng: &mut rng };
        let tslm = Tslm {
            embed: init.normal("tslm.embed", cfg.vocab_size, cfg.model_dim, 1.0),
            audio_bos: init.normal("tslm.audio_bos", 1, cfg.model_dim, 1.0),
            stack: Stack::new(
                &mut init,
                "tslm",
                cfg.model_dim,
                cfg.heads,
                cfg.ffn_dim,
                cfg.tslm_layers,
            ),
        };

        let mut rng = namespace_rng(seed, "fsq");
        let lattice = FsqLattice::new(cfg.fsq_levels, cfg.fsq_dim);
        let fsq = FsqBottleneck::new(
            &mut Init { store, rng: &mut rng },
            cfg.model_dim,
            lattice,
            variant.uses_quantizer(),
        );

        let ralm = variant.uses_ralm().then(|| {
            let mut rng = namespace_rng(seed, "ralm");
            let mut init = Init { store, rng: &mut rng };
            Ralm {
                fuse: Linear::new(&mut init, "ralm.fuse", 2 * cfg.model_dim, cfg.model_dim, true),
                null_acoustic: (variant == AblationVariant::NoAcousticInput)
                    .then(|| init.normal("ralm.null_acoustic", 1, cfg.model_dim, 1.0)),
                stack: Stack::new(
                    &mut init,
                    "ralm",
                    cfg.model_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                    cfg.ralm_layers,
                ),
            }
        });

        let mut rng = namespace_rng(seed, "stop");
        let stop = StopHead::new(&mut Init { store, rng: &mut rng }, cfg);

        Self {
            locenc,
            tslm,
            fsq,
            ralm,
            stop,
            cfg: cfg.clone(),
            variant,
        }
    }

    pub fn variant(&self) -> AblationVariant {
        self.variant
    }

    fn check_len(&self, text_tokens: usize, patches: usize) -> Result<()> {
        let len = 1 + text_tokens + patches;
        let max = self.cfg.max_positions();
        if text_tokens > self.cfg.max_text_len || patches > self.cfg.max_patches || len > max {
            return Err(Error::SequenceTooLong { len, max });
        }
        Ok(())
    }

    fn text_ids(tokens: &[usize]) -> Vec<usize> {
        std::iter::once(BOS_TOKEN).chain(tokens.iter().copied()).collect()
    }

    /// Teacher-forced pass. `frames` holds `M` patches as `(M·P) × D` rows.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], frames: Var) -> Result<BackboneVars> {
        let rows = g.shape(frames).0;
        let seq = PackedSeq {
            tokens,
            patches: rows / self.cfg.patch_size,
        };
        self.forward_packed(g, &[seq], frames)
    }

    /// Teacher-forced pass over several utterances packed into one graph.
    ///
    /// `frames` holds every utterance's patches back to back. Per-slot
    /// outputs come back in the same order, `Σ M` rows in total; `h_tslm`
    /// holds each utterance's `1 + N + M` positions back to back.
    pub fn forward_packed(&self, g: &mut Graph, seqs: &[PackedSeq], frames: Var) -> Result<BackboneVars> {
        let p = self.cfg.patch_size;
        let (rows, d_lat) = g.shape(frames);
        let total_m: usize = seqs.iter().map(|s| s.patches).sum();
        if d_lat != self.cfg.latent_dim || rows != total_m * p || seqs.iter().any(|s| s.patches == 0) {
            return Err(Error::Shape(format!(
                "latent frames {rows}x{d_lat} do not form whole {p}x{} patches for every sequence",
                self.cfg.latent_dim
            )));
        }
        for s in seqs {
            if let Some(&t) = s.tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::Shape(format!("token {t} outside vocabulary")));
            }
            self.check_len(s.tokens.len(), s.patches)?;
        }

        // Input rows are gathered from [embeddings; audio-BOS; E_1..E_ΣM].
        let vocab = self.cfg.vocab_size;
        let bos_row = vocab;
        let mut tslm_idx = Vec::new();
        let mut shifted_idx = Vec::with_capacity(total_m);
        let mut audio_idx = Vec::with_capacity(total_m);
        let mut lens = Vec::with_capacity(seqs.len());
        let mut text_rows = Vec::new();
        let (mut seg_start, mut patch_off) = (0, 0);
        for s in seqs {
            let n1 = s.tokens.len() + 1;
            tslm_idx.push(BOS_TOKEN);
            tslm_idx.extend_from_slice(s.tokens);
            text_rows.extend(seg_start..seg_start + n1);
            for j in 0..s.patches {
                let src = if j == 0 { bos_row } else { vocab + 1 + patch_off + j - 1 };
                tslm_idx.push(src);
                shifted_idx.push(src);
                audio_idx.push(seg_start + n1 + j);
            }
            lens.push(n1 + s.patches);
            seg_start += n1 + s.patches;
            patch_off += s.patches;
        }

        let acoustic = self.locenc.forward(g, frames);
        let embed = g.param(self.tslm.embed);
        let bos = g.param(self.tslm.audio_bos);
        let table = g.concat_rows(&[embed, bos, acoustic]);
        let x = g.gather_rows(table, &tslm_idx);
        let h_tslm = self.tslm.stack.forward_segments(g, x, &lens);

        let h_audio = g.gather_rows(h_tslm, &audio_idx);
        let fsq = self.fsq.forward(g, h_audio);
        let stop_logits = self.stop.forward(g, fsq.up);

        let (residual, h_final) = match &self.ralm {
            Some(ralm) => {
                let acoustic_in = match ralm.null_acoustic {
                    Some(null) => {
                        let null = g.param(null);
                        g.tile_rows(null, total_m)
                    }
                    None => g.gather_rows(table, &shifted_idx),
                };
                let both = g.concat_cols(&[fsq.up, acoustic_in]);
                let fused = ralm.fuse.forward(g, both);
                // RALM rows: each utterance's TSLM text hiddens, then its fused slots
                let table2 = g.concat_rows(&[h_tslm, fused]);
                let mut ralm_idx = Vec::with_capacity(seg_start);
                let (mut t_off, mut p_off) = (0, 0);
                for s in seqs {
                    let n1 = s.tokens.len() + 1;
                    ralm_idx.extend_from_slice(&text_rows[t_off..t_off + n1]);
                    ralm_idx.extend((0..s.patches).map(|j| seg_start + p_off + j));
                    t_off += n1;
                    p_off += s.patches;
                }
                let seq = g.gather_rows(table2, &ralm_idx);
                let out = ralm.stack.forward_segments(g, seq, &lens);
                let residual = g.gather_rows(out, &audio_idx);
                let h_final = g.add(fsq.up, residual);
                (Some(residual), h_final)
            }
            None => (None, fsq.up),
        };

        Ok(BackboneVars {
            acoustic,
            h_tslm,
            pre_q: fsq.pre_q,
            lattice_vec: fsq.lattice_vec,
            skeleton_up: fsq.up,
            residual,
            h_final,
            stop_logits,
        })
    }

    /// Runs [`Backbone::forward`] on an inference graph and returns values.
    pub fn evaluate(&self, params: &ParamStore, tokens: &[usize], frames: &Tensor) -> Result<BackboneOutput> {
        let mut g = Graph::inference(params);
        let f = g.constant(frames.clone());
        let vars = self.forward(&mut g, tokens, f)?;
        let up = g.value(vars.skeleton_up).clone();
        let residual = vars
            .residual
            .map_or_else(|| Tensor::zeros(up.rows(), up.cols()), |r| g.value(r).clone());
        Ok(BackboneOutput {
            h_tslm: g.value(vars.h_tslm).clone(),
            pre_q: g.value(vars.pre_q).clone(),
            lattice_vec: g.value(vars.lattice_vec).clone(),
            skeleton_up: up,
            residual,
            h_final: g.value(vars.h_final).clone(),
            stop_logits: g.value(vars.stop_logits).data().to_vec(),
        })
    }

    /// Encodes one or more patches (`(k·P) × D`) into `k × model_dim`.
    pub fn encode_patches(&self, params: &ParamStore, frames: &Tensor) -> Tensor {
        let mut g = Graph::inference(params);
        let f = g.constant(frames.clone());
        let e = self.locenc.forward(&mut g, f);
        g.value(e).clone()
    }

    /// Consumes `[BOS] + tokens` and returns a state ready for audio slot 1.
    pub fn prefill_text(&self, params: &ParamStore, tokens: &[usize]) -> Result<BackboneState> {
        self.check_len(tokens.len(), 0)?;
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("token {t} outside vocabulary")));
        }
        let mut tslm = KvCache::new(self.tslm.stack.num_layers());
        let mut g = Graph::inference(params);
        let embed = g.param(self.tslm.embed);
        let text = g.gather_rows(embed, &Self::text_ids(tokens));
        let h = self.tslm.stack.forward_causal(&mut g, text, &mut tslm);
        let ralm = self.ralm.as_ref().map(|ralm| {
            let mut cache = KvCache::new(ralm.stack.num_layers());
            ralm.stack.forward_causal(&mut g, h, &mut cache);
            cache
        });
        Ok(BackboneState {
            tslm,
            ralm,
            prev_embedding: None,
            text_positions: tokens.len() + 1,
            slots: 0,
        })
    }

    /// Computes the conditioning for the next audio slot from the cache.
    pub fn step(&self, params: &ParamStore, state: &mut BackboneState) -> Result<SlotOutput> {
        self.check_len(state.text_positions - 1, state.slots + 1)?;
        let mut g = Graph::inference(params);
        let input = match &state.prev_embedding {
            Some(e) => g.constant(e.clone()),
            None => g.param(self.tslm.audio_bos),
        };
        let h = self.tslm.stack.forward_causal(&mut g, input, &mut state.tslm);
        let fsq = self.fsq.forward(&mut g, h);
        let stop = self.stop.forward(&mut g, fsq.up);
        let (residual, h_final) = match (&self.ralm, state.ralm.as_mut()) {
            (Some(ralm), Some(cache)) => {
                let acoustic_in = match ralm.null_acoustic {
                    Some(null) => g.param(null),
                    None => input,
                };
                let both = g.concat_cols(&[fsq.up, acoustic_in]);
                let fused = ralm.fuse.forward(&mut g, both);
                let r = ralm.stack.forward_causal(&mut g, fused, cache);
                let hf = g.add(fsq.up, r);
                (g.value(r).clone(), g.value(hf).clone())
            }
            _ => {
                let up = g.value(fsq.up);
                (Tensor::zeros(1, up.cols()), up.clone())
            }
        };
        state.slots += 1;
        Ok(SlotOutput {
            h_tslm: g.value(h).clone(),
            pre_q: g.value(fsq.pre_q).clone(),
            lattice_vec: g.value(fsq.lattice_vec).clone(),
            skeleton_up: g.value(fsq.up).clone(),
            residual,
            h_final,
            stop_logit: g.value(stop).data()[0],
        })
    }

    /// Feeds the patch just produced for the latest slot back through LocEnc.
    pub fn push_patch(&self, params: &ParamStore, state: &mut BackboneState, patch: &Tensor) {
        state.prev_embedding = Some(self.encode_patches(params, patch));
    }
}

/// `h_final = skeleton_up + residual`, coordinate-wise.
pub fn combine(skeleton_up: &[f32], residual: &[f32]) -> Vec<f32> {
    assert_eq!(skeleton_up.len(), residual.len(), "combine: width mismatch");
    skeleton_up.iter().zip(residual).map(|(a, b)| a + b).collect()
}

/// Stop targets for an `m`-patch utterance: one positive at the last slot.
pub fn stop_labels(m: usize) -> Vec<f32> {
    (0..m).map(|i| if i + 1 == m { 1.0 } else { 0.0 }).collect()
}
