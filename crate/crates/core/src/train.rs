//! Joint training of the LM stack and LocDiT.
//!
//! Each step draws a batch of whole utterances until the patch budget is
//! met, packs them into fixed-size chunks, computes each chunk's loss and
//! gradients in parallel against the shared parameters, reduces them in
//! chunk order, clips and applies AdamW.
//! Every random choice is a function of `(seed, step, position)`, so runs are
//! reproducible and resumable regardless of thread scheduling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamGrads;
use crate::checkpoint::{self, config_diff, effective_config, TrainerState};
use crate::config::{lr_at_step, Config};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::model::{module_of, packed_loss, LossItem, LossSettings, TrainItem, TtsModel, MODULES};
use crate::optim::{clip_global_norm, AdamW};
use crate::parallel::{self, mix_seed, Exec};

const SHUFFLE_SALT: u64 = 0x5348_5546;
const CFG_SALT: u64 = 0x4346_474d;
const NOISE_SALT: u64 = 0x4e4f_4953;

/// Utterances packed into one graph. Chunking is fixed so results do not
/// depend on the thread count.
pub const PACK_SIZE: usize = 16;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_DIR: &str = "final";

/// Whether sequence `index` of step `step` trains the unconditional branch.
pub fn cfg_mask_decision(seed: u64, step: u64, index: u64, prob: f64) -> bool {
    let u = (mix_seed(seed ^ CFG_SALT, step, index) >> 11) as f64 / (1u64 << 53) as f64;
    u < prob
}

/// Epoch-shuffled utterance order, consumed until a patch budget is met.
#[derive(Clone, Debug)]
pub struct Batcher {
    patches: Vec<usize>,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl Batcher {
    pub fn new(patches: Vec<usize>, seed: u64, epoch: u64, cursor: usize) -> Self {
        let mut b = Self {
            patches,
            seed,
            epoch,
            cursor,
            order: Vec::new(),
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order = (0..self.patches.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed ^ SHUFFLE_SALT, self.epoch, 0));
        self.order.shuffle(&mut rng);
    }

    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    /// Next batch of corpus indices: at least one utterance, never the same
    /// utterance twice, stopping once `budget` patches are collected.
    pub fn next_batch(&mut self, budget: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut total = 0;
        while out.len() < self.patches.len() && (out.is_empty() || total < budget) {
            if self.cursor >= self.order.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.shuffle();
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            if out.contains(&i) {
                continue;
            }
            total += self.patches[i];
            out.push(i);
        }
        out
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub flow_loss: f64,
    pub stop_loss: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub flow_loss: f64,
    pub stop_loss: f64,
    pub total: f64,
    pub stop_accuracy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub module_grad_norms: Vec<(&'static str, f64)>,
    pub batch_utterances: usize,
    pub batch_patches: usize,
    pub seconds: f64,
}

impl StepMetrics {
    pub fn record(&self) -> MetricsRecord {
        MetricsRecord {
            step: self.step,
            lr: self.lr,
            flow_loss: self.flow_loss,
            stop_loss: self.stop_loss,
            total: self.total,
            seconds: self.seconds,
        }
    }
}

/// L2 norm of the gradient restricted to each parameter namespace.
pub fn module_grad_norms(model: &TtsModel, grads: &ParamGrads) -> Vec<(&'static str, f64)> {
    let mut sums = [0.0f64; MODULES.len()];
    for (id, g) in grads.iter() {
        if let Some(k) = MODULES.iter().position(|&m| m == module_of(model.params.name(id))) {
            sums[k] += g.sq_norm();
        }
    }
    MODULES.iter().zip(sums).map(|(&m, s)| (m, s.sqrt())).collect()
}

fn format_norms(norms: &[(&str, f64)]) -> String {
    norms
        .iter()
        .map(|(m, n)| format!("{m}={n:.6e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct Trainer {
    pub config: Config,
    pub model: TtsModel,
    pub optim: AdamW,
    pub state: TrainerState,
    pub exec: Exec,
    items: Vec<TrainItem>,
    batcher: Batcher,
}

impl Trainer {
    pub fn new(config: &Config, corpus: &[Utterance], exec: Exec) -> Result<Self> {
        config.validate()?;
        let model = TtsModel::new(&config.model, config.train.ablation_variant, config.train.seed)?;
        let t = &config.train;
        let optim = AdamW::new(&model.params, t.beta1, t.beta2, t.weight_decay);
        Self::assemble(config.clone(), model, optim, TrainerState::default(), corpus, exec)
    }

    /// Continues from a checkpoint written by [`Trainer::save`]. The stored
    /// configuration must match `config` exactly.
    pub fn resume(dir: &Path, config: &Config, corpus: &[Utterance], exec: Exec) -> Result<Self> {
        let loaded = checkpoint::load_checkpoint(dir)?;
        let want = effective_config(config);
        let diff = config_diff(&loaded.config, &want);
        if !diff.is_empty() {
            let fields = diff
                .iter()
                .map(|(k, a, b)| format!("{k}: checkpoint={a} requested={b}"))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Mismatch(format!(
                "refusing to resume {}: {fields}",
                dir.display()
            )));
        }
        let (optim, state) = loaded
            .optim
            .ok_or_else(|| Error::Mismatch(format!("{} has no optimizer state to resume from", dir.display())))?;
        Self::assemble(config.clone(), loaded.model, optim, state, corpus, exec)
    }

    fn assemble(
        config: Config,
        model: TtsModel,
        optim: AdamW,
        state: TrainerState,
        corpus: &[Utterance],
        exec: Exec,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let p = model.config.patch_size;
        let d = model.config.latent_dim;
        let mut items = Vec::with_capacity(corpus.len());
        for u in corpus {
            if u.frames.cols() != d {
                return Err(Error::Shape(format!(
                    "utterance {} has {}-dim latents, model expects {d}",
                    u.id,
                    u.frames.cols()
                )));
            }
            if u.num_frames() == 0 {
                return Err(Error::TooShort { len: 0, min: 1 });
            }
            items.push(TrainItem::from_utterance(u, p));
        }
        let batcher = Batcher::new(
            items.iter().map(|it| it.num_patches(p)).collect(),
            config.train.seed,
            state.epoch,
            state.cursor,
        );
        Ok(Self {
            config,
            model,
            optim,
            state,
            exec,
            items,
            batcher,
        })
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let started = Instant::now();
        let t = &self.config.train;
        let step = self.state.step;
        let lr = lr_at_step(t, step);
        let batch = self.batcher.next_batch(t.batch_patches_at(step));
        let p = self.model.config.patch_size;
        let d = self.model.config.latent_dim;
        let repeats = t.flow_repeats.max(1);
        let flow_norm: f64 = batch
            .iter()
            .map(|&i| (self.items[i].valid_frames * d * repeats) as f64)
            .sum();
        let stop_norm: f64 = batch.iter().map(|&i| self.items[i].num_patches(p) as f64).sum();
        let stop_weight = self.model.config.stop_loss_weight;
        let mask_prob = self.model.config.cfg_mask_prob;
        let seed = t.seed;

        let settings = LossSettings {
            repeats,
            flow_norm,
            stop_norm,
            stop_weight,
            with_grads: true,
        };
        let loss_items: Vec<LossItem> = batch
            .iter()
            .enumerate()
            .map(|(pos, &i)| LossItem {
                item: &self.items[i],
                cfg_masked: cfg_mask_decision(seed, step, pos as u64, mask_prob),
                seed: mix_seed(seed ^ NOISE_SALT, step, pos as u64),
            })
            .collect();
        let chunks: Vec<&[LossItem]> = loss_items.chunks(PACK_SIZE).collect();
        let model = &self.model;
        let results = parallel::map(self.exec, &chunks, |_, chunk| packed_loss(model, chunk, &settings));

        let mut grads = ParamGrads::empty(self.model.params.len());
        let (mut flow_sq, mut flow_n, mut bce, mut correct, mut patches) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for r in results {
            let r = r?;
            flow_sq += r.flow_sq_sum;
            flow_n += r.flow_count;
            bce += r.stop_bce_sum;
            correct += r.stop_correct;
            patches += r.patches;
            grads.merge(r.grads);
        }
        let flow_loss = flow_sq / flow_n;
        let stop_loss = bce / patches as f64;
        let total = flow_loss + stop_weight * stop_loss;
        let module_grad_norms = module_grad_norms(&self.model, &grads);
        let grad_norm = clip_global_norm(&mut grads, t.grad_clip);
        if !total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                grad_norms: format_norms(&module_grad_norms),
            });
        }
        self.optim.step(&mut self.model.params, &grads, lr);
        self.state.step += 1;
        self.state.optimizer_updates = self.optim.t;
        (self.state.epoch, self.state.cursor) = self.batcher.position();

        Ok(StepMetrics {
            step,
            lr,
            flow_loss,
            stop_loss,
            total,
            stop_accuracy: correct as f64 / patches as f64,
            grad_norm,
            module_grad_norms,
            batch_utterances: batch.len(),
            batch_patches: patches,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_checkpoint(dir, &self.config, &self.model, Some((&self.optim, &self.state)))
    }

    /// Trains to the end of the schedule (or `until`), appending to
    /// `out/metrics.jsonl`, writing `out/step-NNNNNNNN` every
    /// `checkpoint_every` steps and `out/final` at the end.
    pub fn run(&mut self, out: &Path, until: Option<u64>, mut on_step: impl FnMut(&StepMetrics)) -> Result<PathBuf> {
        fs::create_dir_all(out)?;
        let metrics_path = out.join(METRICS_FILE);
        truncate_metrics(&metrics_path, self.state.step)?;
        let mut metrics = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
        let end = until.map_or(self.total_steps(), |u| u.min(self.total_steps()));
        let every = self.config.train.checkpoint_every;
        while self.state.step < end {
            let m = self.step()?;
            serde_json::to_writer(&mut metrics, &m.record())?;
            metrics.write_all(b"\n")?;
            on_step(&m);
            if every > 0 && self.state.step.is_multiple_of(every) && self.state.step < end {
                self.save(&out.join(format!("step-{:08}", self.state.step)))?;
            }
        }
        metrics.flush()?;
        let final_dir = out.join(FINAL_DIR);
        self.save(&final_dir)?;
        Ok(final_dir)
    }
}

/// Drops metric lines for steps at or beyond `from`, so a resumed run does
/// not duplicate records written after its checkpoint.
fn truncate_metrics(path: &Path, from: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if from == 0 {
        fs::remove_file(path)?;
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: MetricsRecord = serde_json::from_str(line)?;
        if rec.step < from {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    checkpoint::atomic_write(path, kept.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
