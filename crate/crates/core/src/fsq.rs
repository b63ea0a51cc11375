//! Finite scalar quantization bottleneck.
//!
//! Each channel of a bounded vector is rounded to one of `2L + 1` evenly
//! spaced levels `{kΔ : |k| ≤ L}`. The forward value is discrete; the
//! backward pass treats the rounding as the identity (straight-through), so
//! gradients reach the TSLM unchanged.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FsqLattice {
    delta: f32,
    half_levels: usize,
    dim: usize,
}

impl FsqLattice {
    /// Lattice with `levels` odd and step `Δ = 1/L`, so values span `[-1, 1]`.
    pub fn new(levels: usize, dim: usize) -> Self {
        assert!(levels >= 3 && levels % 2 == 1, "fsq levels must be odd and at least 3");
        let half = (levels - 1) / 2;
        Self::with_step(1.0 / half as f32, half, dim)
    }

    pub fn with_step(delta: f32, half_levels: usize, dim: usize) -> Self {
        assert!(delta > 0.0 && delta.is_finite(), "lattice step must be positive");
        assert!(half_levels >= 1, "lattice needs at least one level either side of zero");
        Self {
            delta,
            half_levels,
            dim,
        }
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    /// Clip range `L` in lattice units.
    pub fn half_levels(&self) -> usize {
        self.half_levels
    }

    pub fn levels(&self) -> usize {
        2 * self.half_levels + 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest representable magnitude, `LΔ`.
    pub fn bound(&self) -> f32 {
        self.half_levels as f32 * self.delta
    }

    #[inline]
    pub fn quantize_scalar(&self, x: f32) -> f32 {
        let l = self.half_levels as f32;
        self.delta * (x / self.delta).round().clamp(-l, l)
    }

    /// `Δ · clip(round(x / Δ), −L, L)` per coordinate.
    pub fn quantize(&self, pre_q: &[f32]) -> Result<Vec<f32>> {
        if let Some(index) = pre_q.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(pre_q.iter().map(|&x| self.quantize_scalar(x)).collect())
    }

    /// Lattice index `k` of a value, if it sits within `tol` of `kΔ`.
    pub fn level_index(&self, v: f32, tol: f64) -> Option<i64> {
        let k = (v as f64 / self.delta as f64).round();
        let on = (v as f64 - k * self.delta as f64).abs() <= tol;
        (on && k.abs() <= self.half_levels as f64).then_some(k as i64)
    }

    pub fn contains(&self, v: &[f32], tol: f64) -> bool {
        v.iter().all(|&x| self.level_index(x, tol).is_some())
    }
}

/// `(2L + 1)^dim`, exact when it fits in 128 bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CodebookSize {
    Exact(u128),
    Log10(f64),
}

impl CodebookSize {
    pub fn log10(&self) -> f64 {
        match *self {
            CodebookSize::Exact(n) => (n as f64).log10(),
            CodebookSize::Log10(l) => l,
        }
    }
}

pub fn codebook_size(lattice: &FsqLattice) -> CodebookSize {
    let levels = lattice.levels() as u128;
    match u32::try_from(lattice.dim()).ok().and_then(|d| levels.checked_pow(d)) {
        Some(n) => CodebookSize::Exact(n),
        None => CodebookSize::Log10(lattice.dim() as f64 * (lattice.levels() as f64).log10()),
    }
}

/// One audio slot's skeleton: the lattice vector and its projection back to
/// model width.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonCode {
    pub lattice_vec: Vec<f32>,
    pub up_proj: Vec<f32>,
}

/// Graph handles produced by [`FsqBottleneck::forward`].
#[derive(Clone, Copy, Debug)]
pub struct BottleneckVars {
    pub pre_q: Var,
    pub lattice_vec: Var,
    pub up: Var,
}

/// Down-projection, bounded activation, quantizer, up-projection.
#[derive(Clone, Debug)]
pub struct FsqBottleneck {
    down: Linear,
    up: Linear,
    lattice: FsqLattice,
    quantize: bool,
}

impl FsqBottleneck {
    pub fn new(init: &mut Init, model_dim: usize, lattice: FsqLattice, quantize: bool) -> Self {
        Self {
            down: Linear::new(init, "fsq.down", model_dim, lattice.dim(), true),
            up: Linear::new(init, "fsq.up", lattice.dim(), model_dim, true),
            lattice,
            quantize,
        }
    }

    pub fn lattice(&self) -> &FsqLattice {
        &self.lattice
    }

    pub fn quantizes(&self) -> bool {
        self.quantize
    }

    /// `h` is `rows × model_dim`; every row is quantized independently.
    pub fn forward(&self, g: &mut Graph, h: Var) -> BottleneckVars {
        let d = self.down.forward(g, h);
        let t = g.tanh(d);
        let pre_q = g.scale(t, self.lattice.bound());
        let lattice_vec = if self.quantize {
            g.quantize(pre_q, &self.lattice)
        } else {
            pre_q
        };
        let up = self.up.forward(g, lattice_vec);
        BottleneckVars { pre_q, lattice_vec, up }
    }

    /// Up-projection of arbitrary lattice rows.
    pub fn project_up(&self, g: &mut Graph, lattice_rows: Var) -> Var {
        self.up.forward(g, lattice_rows)
    }

    /// Single-vector convenience wrapper around [`FsqBottleneck::forward`].
    pub fn bottleneck_forward(&self, params: &ParamStore, h_tslm: &[f32]) -> Result<SkeletonCode> {
        if let Some(index) = h_tslm.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut g = Graph::inference(params);
        let h = g.constant(Tensor::row_vector(h_tslm.to_vec()));
        let vars = self.forward(&mut g, h);
        Ok(SkeletonCode {
            lattice_vec: g.value(vars.lattice_vec).data().to_vec(),
            up_proj: g.value(vars.up).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quarter() -> FsqLattice {
        FsqLattice::with_step(0.25, 4, 1)
    }

    #[test]
    fn hand_evaluated_points() {
        let l = quarter();
        // round(2.4) = 2 -> 0.5
        assert_eq!(l.quantize(&[0.6]).unwrap(), vec![0.5]);
        assert_eq!(l.quantize(&[0.0]).unwrap(), vec![0.0]);
        // round(14.8) = 15, clipped to 4 -> 1.0
        assert_eq!(l.quantize(&[3.7]).unwrap(), vec![1.0]);
        assert_eq!(l.quantize(&[-3.7]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn nine_levels_default_step() {
        let l = FsqLattice::new(9, 4);
        assert_eq!(l.delta(), 0.25);
        assert_eq!(l.half_levels(), 4);
        assert_eq!(l.bound(), 1.0);
    }

    #[test]
    fn non_finite_input_names_coordinate() {
        let err = quarter().quantize(&[0.1, f32::NAN, 0.2]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
        assert!(matches!(
            quarter().quantize(&[f32::INFINITY]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn codebook_sizes() {
        assert_eq!(codebook_size(&FsqLattice::new(9, 1)), CodebookSize::Exact(9));
        assert_eq!(codebook_size(&FsqLattice::new(9, 2)), CodebookSize::Exact(81));
        let big = codebook_size(&FsqLattice::new(9, 256));
        assert!(matches!(big, CodebookSize::Log10(_)));
        // 256 · log10(9) = 244.28608...
        assert!((big.log10() - 244.286_082).abs() < 1e-5, "{}", big.log10());
    }

    #[test]
    fn idempotent_on_random_inputs() {
        let l = FsqLattice::new(9, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let x: f32 = rng.random_range(-10.0..10.0);
            let q = l.quantize_scalar(x);
            assert_eq!(l.quantize_scalar(q).to_bits(), q.to_bits());
        }
    }

    #[test]
    fn bottleneck_respects_lattice_and_bound() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lattice = FsqLattice::new(9, 8);
        let b = FsqBottleneck::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            16,
            lattice,
            true,
        );
        let h: Vec<f32> = (0..16).map(|i| (i as f32 - 8.0) * 3.0).collect();
        let code = b.bottleneck_forward(&store, &h).unwrap();
        assert_eq!(code.lattice_vec.len(), 8);
        assert_eq!(code.up_proj.len(), 16);
        assert!(lattice.contains(&code.lattice_vec, 1e-9));

        let bypass = FsqBottleneck::new(
            &mut Init {
                store: &mut ParamStore::default(),
                rng: &mut ChaCha8Rng::seed_from_u64(1),
            },
            16,
            lattice,
            false,
        );
        let raw = bypass.bottleneck_forward(&store, &h).unwrap();
        // same weights, no rounding: pre-activation passes through untouched
        assert!(raw.lattice_vec.iter().all(|v| v.abs() <= 1.0));
        let requantized = lattice.quantize(&raw.lattice_vec).unwrap();
        assert_eq!(requantized, code.lattice_vec);
    }

    proptest! {
        #[test]
        fn monotone_per_channel(a in -10.0f32..10.0, b in -10.0f32..10.0) {
            let l = FsqLattice::new(9, 1);
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(l.quantize_scalar(x) <= l.quantize_scalar(y));
        }

        #[test]
        fn output_on_lattice(x in -10.0f32..10.0, levels in 1usize..8) {
            let l = FsqLattice::new(2 * levels + 1, 1);
            let q = l.quantize_scalar(x);
            prop_assert!(l.level_index(q, 1e-6).is_some());
            prop_assert!(q.abs() <= l.bound() + 1e-6);
        }
    }
}
