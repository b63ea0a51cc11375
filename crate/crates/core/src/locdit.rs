//! Patch-local flow-matching decoder.
//!
//! A small bidirectional transformer sees the previous patch's clean frames
//! followed by the current patch's noisy frames, is modulated by the LM
//! conditioning and the flow time, and predicts a velocity for the noisy
//! frames only. Training uses the linear path `z_t = (1 − t) z_0 + t ε` with
//! target `ε − z_0`; sampling integrates from `t = 1` to `t = 0` with Euler
//! steps and optional classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamId, Var};
use crate::config::ModelConfig;
use crate::nn::{Init, Linear, Mlp, ParamStore, SelfAttention};
use crate::tensor::Tensor;

/// Width of the sinusoidal flow-time features.
pub const TIME_FEATURES: usize = 64;
const LN_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug)]
struct DitBlock {
    modulation: Linear,
    attn: SelfAttention,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct LocDit {
    input: Linear,
    pos: ParamId,
    cond: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<DitBlock>,
    final_mod: Linear,
    output: Linear,
    null_embedding: ParamId,
    start_patch: ParamId,
    patch: usize,
    model_dim: usize,
    latent_dim: usize,
}

/// Sinusoidal embedding of `t ∈ [0, 1]`, one row per value.
pub fn time_features(ts: &[f32]) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut out = Tensor::zeros(ts.len(), TIME_FEATURES);
    for (r, &t) in ts.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = 1000.0 * t as f64 * freq;
            row[i] = a.sin() as f32;
            row[half + i] = a.cos() as f32;
        }
    }
    out
}

impl LocDit {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let layers = cfg.locdit_layers;
        let out_std = 1.0 / ((d as f32).sqrt() * (2.0 * layers as f32).sqrt());
        let blocks = (0..layers)
            .map(|i| {
                let name = format!("locdit.layers.{i}");
                DitBlock {
                    modulation: Linear::with_std(init, &format!("{name}.mod"), d, 6 * d, true, 0.02),
                    attn: SelfAttention::new(init, &format!("{name}.attn"), d, cfg.heads, out_std),
                    mlp: Mlp::new(
                        init,
                        &format!("{name}.mlp"),
                        d,
                        cfg.ffn_dim,
                        1.0 / ((cfg.ffn_dim as f32).sqrt() * (2.0 * layers as f32).sqrt()),
                    ),
                }
            })
            .collect();
        Self {
            input: Linear::new(init, "locdit.input", cfg.latent_dim, d, true),
            pos: init.normal("locdit.pos", 2 * cfg.patch_size, d, 0.1),
            cond: Linear::new(init, "locdit.cond", d, d, true),
            time1: Linear::new(init, "locdit.time1", TIME_FEATURES, d, true),
            time2: Linear::new(init, "locdit.time2", d, d, true),
            blocks,
            final_mod: Linear::with_std(init, "locdit.final_mod", d, 2 * d, true, 0.02),
            output: Linear::with_std(init, "locdit.output", d, cfg.latent_dim, true, 0.02),
            null_embedding: init.normal("locdit.null_embedding", 1, d, 1.0),
            start_patch: init.constant("locdit.start_patch", cfg.patch_size, cfg.latent_dim, 0.0),
            patch: cfg.patch_size,
            model_dim: d,
            latent_dim: cfg.latent_dim,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn null_embedding(&self) -> ParamId {
        self.null_embedding
    }

    pub fn start_patch(&self) -> ParamId {
        self.start_patch
    }

    /// Velocity for `B` patches at once.
    ///
    /// `z_t` and `z_prev` are `(B·P) × D`, `t` has `B` entries and `cond` is
    /// `B × model_dim`. Returns `(B·P) × D`.
    pub fn velocity(&self, g: &mut Graph, z_t: Var, z_prev: Var, t: &[f32], cond: Var) -> Var {
        let p = self.patch;
        let b = t.len();
        assert_eq!(g.shape(z_t), (b * p, self.latent_dim), "noisy patch shape");
        assert_eq!(g.shape(z_prev), (b * p, self.latent_dim), "previous patch shape");
        assert_eq!(g.shape(cond), (b, self.model_dim), "conditioning shape");

        // per patch: [prev_0..prev_{P-1}, noisy_0..noisy_{P-1}]
        let both = g.concat_rows(&[z_prev, z_t]);
        let order: Vec<usize> = (0..b)
            .flat_map(|i| {
                (0..p)
                    .map(move |j| i * p + j)
                    .chain((0..p).map(move |j| b * p + i * p + j))
            })
            .collect();
        let tokens = g.gather_rows(both, &order);
        let x = self.input.forward(g, tokens);
        let pos = g.param(self.pos);
        let pos = g.tile_rows(pos, b);
        let mut x = g.add(x, pos);

        let tf = g.constant(time_features(t));
        let te = self.time1.forward(g, tf);
        let te = g.silu(te);
        let te = self.time2.forward(g, te);
        let ce = self.cond.forward(g, cond);
        let c = g.add(ce, te);
        let c = g.silu(c);

        let d = self.model_dim;
        let span = 2 * p;
        for blk in &self.blocks {
            let m = blk.modulation.forward(g, c);
            let m = g.repeat_rows(m, span);
            let part = |g: &mut Graph, k: usize| g.slice_cols(m, k * d, d);
            let (shift1, scale1, gate1) = (part(g, 0), part(g, 1), part(g, 2));
            let (shift2, scale2, gate2) = (part(g, 3), part(g, 4), part(g, 5));

            let h = modulate(g, x, shift1, scale1);
            let h = blk.attn.forward_blocks(g, h, span);
            let h = g.mul(gate1, h);
            x = g.add(x, h);

            let h = modulate(g, x, shift2, scale2);
            let h = blk.mlp.forward(g, h);
            let h = g.mul(gate2, h);
            x = g.add(x, h);
        }
        let fm = self.final_mod.forward(g, c);
        let fm = g.repeat_rows(fm, span);
        let shift = g.slice_cols(fm, 0, d);
        let scale = g.slice_cols(fm, d, d);
        let h = modulate(g, x, shift, scale);
        let out = self.output.forward(g, h);
        let noisy: Vec<usize> = (0..b).flat_map(|i| (0..p).map(move |j| i * span + p + j)).collect();
        g.gather_rows(out, &noisy)
    }
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.layer_norm(x, LN_EPS);
    let s = g.add_scalar(scale, 1.0);
    let h = g.mul(h, s);
    g.add(h, shift)
}

/// A velocity predictor for one patch. `cond = None` asks for the
/// unconditional branch.
pub trait VelocityField {
    fn velocity(&self, z_t: &Tensor, t: f32, cond: Option<&Tensor>, z_prev: &Tensor) -> Tensor;
}

/// [`LocDit`] bound to concrete parameters.
pub struct LocDitField<'a> {
    pub dit: &'a LocDit,
    pub params: &'a ParamStore,
}

impl VelocityField for LocDitField<'_> {
    fn velocity(&self, z_t: &Tensor, t: f32, cond: Option<&Tensor>, z_prev: &Tensor) -> Tensor {
        let mut g = Graph::inference(self.params);
        let zt = g.constant(z_t.clone());
        let zp = g.constant(z_prev.clone());
        let c = match cond {
            Some(c) => g.constant(c.clone()),
            None => g.param(self.dit.null_embedding),
        };
        let v = self.dit.velocity(&mut g, zt, zp, &[t], c);
        g.value(v).clone()
    }
}

/// One training draw on the linear path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: Tensor,
    pub t: f32,
    pub eps: Tensor,
    pub z_t: Tensor,
    pub target_v: Tensor,
}

impl FlowSample {
    pub fn new(z0: Tensor, t: f32, eps: Tensor) -> Self {
        assert_eq!(z0.shape(), eps.shape(), "noise shape must match the clean patch");
        let z_t = z0.zip_map(&eps, |a, e| (1.0 - t) * a + t * e);
        let target_v = z0.zip_map(&eps, |a, e| e - a);
        Self {
            z0,
            t,
            eps,
            z_t,
            target_v,
        }
    }

    /// Draws `t ~ U[0, 1]` and `ε ~ N(0, I)` from `rng`.
    pub fn draw(z0: Tensor, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let t: f32 = rng.random_range(0.0..1.0);
        let eps = gaussian(z0.rows(), z0.cols(), rng);
        Self::new(z0, t, eps)
    }
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Mean squared velocity error for one draw.
pub fn flow_loss(field: &impl VelocityField, sample: &FlowSample, cond: Option<&Tensor>, z_prev: &Tensor) -> f32 {
    let v = field.velocity(&sample.z_t, sample.t, cond, z_prev);
    let n = v.len() as f64;
    let se: f64 = v
        .data()
        .iter()
        .zip(sample.target_v.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    (se / n) as f32
}

/// `v_u + s (v_c − v_u)`; `s = 1` and `s = 0` return the single branch
/// bit-for-bit.
pub fn guidance_combine(v_cond: &Tensor, v_uncond: &Tensor, scale: f32) -> Tensor {
    if scale == 1.0 {
        return v_cond.clone();
    }
    if scale == 0.0 {
        return v_uncond.clone();
    }
    v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
}

/// Guided velocity, evaluating only the branches the scale needs.
pub fn guided_velocity(
    field: &impl VelocityField,
    z: &Tensor,
    t: f32,
    cond: &Tensor,
    z_prev: &Tensor,
    scale: f32,
) -> Tensor {
    if scale == 1.0 {
        return field.velocity(z, t, Some(cond), z_prev);
    }
    if scale == 0.0 {
        return field.velocity(z, t, None, z_prev);
    }
    let vc = field.velocity(z, t, Some(cond), z_prev);
    let vu = field.velocity(z, t, None, z_prev);
    guidance_combine(&vc, &vu, scale)
}

/// Euler integration from `t = 1` to `t = 0` starting at `eps`.
pub fn integrate(
    field: &impl VelocityField,
    eps: Tensor,
    cond: &Tensor,
    z_prev: &Tensor,
    steps: usize,
    scale: f32,
) -> Tensor {
    assert!(steps >= 1, "at least one integration step");
    let dt = 1.0 / steps as f32;
    let mut z = eps;
    for k in 0..steps {
        let t = (steps - k) as f32 / steps as f32;
        let v = guided_velocity(field, &z, t, cond, z_prev, scale);
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
    }
    z
}

/// Samples one `P × D` patch; the starting noise is a pure function of `seed`.
pub fn sample_patch(
    field: &impl VelocityField,
    cond: &Tensor,
    z_prev: &Tensor,
    steps: usize,
    scale: f32,
    seed: u64,
) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian(z_prev.rows(), z_prev.cols(), &mut rng);
    integrate(field, eps, cond, z_prev, steps, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    /// Velocity field that knows the clean target exactly.
    struct Oracle(Tensor);

    impl VelocityField for Oracle {
        fn velocity(&self, z_t: &Tensor, t: f32, _cond: Option<&Tensor>, _z_prev: &Tensor) -> Tensor {
            // z_t = (1-t) z0 + t eps  =>  eps - z0 = (z_t - z0) / t
            z_t.zip_map(&self.0, |z, a| (z - a) / t)
        }
    }

    /// Returns a constant depending only on which branch was asked for.
    struct Branches;

    impl VelocityField for Branches {
        fn velocity(&self, z_t: &Tensor, _t: f32, cond: Option<&Tensor>, _z_prev: &Tensor) -> Tensor {
            let v = if cond.is_some() { 0.3 } else { -0.7 };
            Tensor::filled(z_t.rows(), z_t.cols(), v)
        }
    }

    fn small() -> (ModelConfig, ParamStore, LocDit) {
        let cfg = ModelConfig {
            model_dim: 16,
            heads: 2,
            ffn_dim: 32,
            locdit_layers: 1,
            latent_dim: 3,
            patch_size: 2,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dit = LocDit::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            &cfg,
        );
        (cfg, store, dit)
    }

    #[test]
    fn path_and_target_by_hand() {
        let z0 = Tensor::from_vec(1, 2, vec![1.0, -2.0]);
        let eps = Tensor::from_vec(1, 2, vec![0.5, 0.5]);
        let s = FlowSample::new(z0, 0.25, eps);
        assert_eq!(s.z_t.data(), &[0.875, -1.375]);
        assert_eq!(s.target_v.data(), &[-0.5, 2.5]);
    }

    #[test]
    fn exact_velocity_one_step_recovers_clean_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = gaussian(2, 4, &mut rng);
        let eps = gaussian(2, 4, &mut rng);
        let oracle = Oracle(z0.clone());
        let cond = Tensor::zeros(1, 1);
        let out = integrate(&oracle, eps, &cond, &Tensor::zeros(2, 4), 1, 1.0);
        assert!(out.max_abs_diff(&z0) < 1e-6, "{}", out.max_abs_diff(&z0));
        let out = integrate(&oracle, gaussian(2, 4, &mut rng), &cond, &Tensor::zeros(2, 4), 8, 1.0);
        assert!(out.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn oracle_has_zero_flow_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = gaussian(2, 3, &mut rng);
        let oracle = Oracle(z0.clone());
        let s = FlowSample::new(z0, 0.6, gaussian(2, 3, &mut rng));
        assert!(flow_loss(&oracle, &s, None, &Tensor::zeros(2, 3)) < 1e-10);
    }

    #[test]
    fn guidance_scale_edge_cases() {
        let c = Tensor::from_vec(1, 3, vec![0.1, 0.7, -1.3]);
        let u = Tensor::from_vec(1, 3, vec![0.4, -0.2, 2.9]);
        assert_eq!(guidance_combine(&c, &u, 1.0), c);
        assert_eq!(guidance_combine(&c, &u, 0.0), u);
        let two = guidance_combine(&c, &u, 2.0);
        for i in 0..3 {
            let want = 2.0 * c.data()[i] - u.data()[i];
            assert!((two.data()[i] - want).abs() < 1e-6);
        }
        let cond = Tensor::zeros(1, 1);
        let z = Tensor::zeros(1, 2);
        assert_eq!(guided_velocity(&Branches, &z, 0.5, &cond, &z, 1.0).data(), &[0.3, 0.3]);
        assert_eq!(
            guided_velocity(&Branches, &z, 0.5, &cond, &z, 0.0).data(),
            &[-0.7, -0.7]
        );
    }

    #[test]
    fn sampling_is_seeded() {
        let (cfg, store, dit) = small();
        let field = LocDitField {
            dit: &dit,
            params: &store,
        };
        let cond = Tensor::filled(1, cfg.model_dim, 0.2);
        let prev = Tensor::zeros(cfg.patch_size, cfg.latent_dim);
        let a = sample_patch(&field, &cond, &prev, 4, 2.0, 17);
        let b = sample_patch(&field, &cond, &prev, 4, 2.0, 17);
        let c = sample_patch(&field, &cond, &prev, 4, 2.0, 18);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
    }

    #[test]
    fn batched_velocity_matches_single_patches() {
        let (cfg, store, dit) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = cfg.patch_size;
        let zt = gaussian(3 * p, cfg.latent_dim, &mut rng);
        let zp = gaussian(3 * p, cfg.latent_dim, &mut rng);
        let cond = gaussian(3, cfg.model_dim, &mut rng);
        let ts = [0.1, 0.5, 0.9];

        let mut g = Graph::inference(&store);
        let (a, b, c) = (g.constant(zt.clone()), g.constant(zp.clone()), g.constant(cond.clone()));
        let v = dit.velocity(&mut g, a, b, &ts, c);
        let batched = g.value(v).clone();

        let field = LocDitField {
            dit: &dit,
            params: &store,
        };
        for i in 0..3 {
            let single = field.velocity(
                &zt.slice_rows(i * p, p),
                ts[i],
                Some(&cond.slice_rows(i, 1)),
                &zp.slice_rows(i * p, p),
            );
            assert!(single.max_abs_diff(&batched.slice_rows(i * p, p)) < 1e-5);
        }
    }

    #[test]
    fn conditioning_gradient_is_nonzero() {
        let (cfg, store, dit) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = cfg.patch_size;
        let mut g = Graph::new(&store);
        let zt = g.constant(gaussian(p, cfg.latent_dim, &mut rng));
        let zp = g.constant(gaussian(p, cfg.latent_dim, &mut rng));
        let cond = g.input(gaussian(1, cfg.model_dim, &mut rng));
        let v = dit.velocity(&mut g, zt, zp, &[0.4], cond);
        let sq = g.unary(v, crate::autodiff::Unary::Square);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let gc = grads.of(cond).expect("conditioning gradient");
        assert!(gc.sq_norm() > 0.0);
    }
}
