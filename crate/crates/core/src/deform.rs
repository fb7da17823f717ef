//! Per-clip deformation field: a 4D hash encoding of (normalized position,
//! normalized clip time) followed by a small MLP that predicts center,
//! rotation and log-scale offsets for each Gaussian.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::gaussian::GaussianSet;
use crate::hashgrid::{HashConfig, HashEncoding};
use crate::math::Vec3;
use crate::mlp::Mlp;
use crate::raster::Delta;

/// Output layout of the MLP: 3 center + 4 rotation + 3 log-scale offsets.
pub const DELTA_DIM: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformConfig {
    pub hash: HashConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self { hash: HashConfig::default(), hidden_width: 64, hidden_layers: 2 }
    }
}

impl DeformConfig {
    pub fn mlp_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.hash.levels * self.hash.features_per_level];
        widths.extend(core::iter::repeat_n(self.hidden_width, self.hidden_layers));
        widths.push(DELTA_DIM);
        widths
    }
}

/// Axis-aligned box used to map world positions into the unit cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Bounds of `points`, grown by `pad` times the extent on every side
    /// (and never thinner than `1e-6`).
    pub fn around(points: impl IntoIterator<Item = Vec3>, pad: f64) -> Result<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for d in 0..3 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        if !any {
            bail!(Degenerate, "bounding box of an empty point set");
        }
        for d in 0..3 {
            let margin = ((max[d] - min[d]) * pad).max(1e-6);
            min[d] -= margin;
            max[d] += margin;
        }
        Ok(Self { min, max })
    }

    /// Position in unit-cube coordinates (unclamped).
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        core::array::from_fn(|d| (p[d] - self.min[d]) / (self.max[d] - self.min[d]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub encoding: HashEncoding,
    pub mlp: Mlp,
    pub clip_id: usize,
    pub domain_box: Aabb,
}

/// Gradient buffers matching a field's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGrads {
    pub tables: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl DeformGrads {
    pub fn zeros_like(field: &DeformationField) -> Self {
        Self { tables: vec![0.0; field.encoding.tables.len()], mlp: vec![0.0; field.mlp.params.len()] }
    }

    pub fn clear(&mut self) {
        self.tables.fill(0.0);
        self.mlp.fill(0.0);
    }
}

fn split(out: &[f64]) -> Delta {
    Delta {
        center: [out[0], out[1], out[2]],
        rotation: [out[3], out[4], out[5], out[6]],
        log_scale: [out[7], out[8], out[9]],
    }
}

fn flatten(d: &Delta) -> [f64; DELTA_DIM] {
    let mut v = [0.0; DELTA_DIM];
    v[0..3].copy_from_slice(&d.center);
    v[3..7].copy_from_slice(&d.rotation);
    v[7..10].copy_from_slice(&d.log_scale);
    v
}

impl DeformationField {
    /// New field with random hash tables and hidden layers and a
    /// zero-initialized output layer, so it starts as the identity.
    pub fn new(config: &DeformConfig, clip_id: usize, domain_box: Aabb, rng: &mut impl Rng) -> Result<Self> {
        let encoding = HashEncoding::new(config.hash.clone(), rng)?;
        let mlp = Mlp::new(&config.mlp_widths(), true, rng)?;
        Ok(Self { encoding, mlp, clip_id, domain_box })
    }

    fn input(&self, pos: Vec3, t: f64) -> [f64; 4] {
        let n = self.domain_box.normalize(pos);
        [n[0], n[1], n[2], t]
    }

    pub fn encode(&self, pos: Vec3, t: f64) -> Vec<f64> {
        self.encoding.encode(self.input(pos, t))
    }

    pub fn deform(&self, pos: Vec3, t: f64) -> Delta {
        split(&self.mlp.forward(&self.encode(pos, t)))
    }

    /// Accumulates parameter gradients and returns `dL/dpos`.
    pub fn backward(&self, pos: Vec3, t: f64, grad_delta: &Delta, grads: &mut DeformGrads) -> Vec3 {
        let input = self.input(pos, t);
        let features = self.encoding.encode(input);
        let g_features = self.mlp.backward(&features, &flatten(grad_delta), &mut grads.mlp);
        let g_input = self.encoding.backward(input, &g_features, &mut grads.tables);
        core::array::from_fn(|d| g_input[d] / (self.domain_box.max[d] - self.domain_box.min[d]))
    }

    /// Deltas for every Gaussian of a set at normalized time `t`.
    pub fn deform_set(&self, set: &GaussianSet, t: f64) -> Vec<Delta> {
        set.gaussians().iter().map(|g| self.deform(g.center, t)).collect()
    }

    /// Backward of [`deform_set`](Self::deform_set); the gradient w.r.t.
    /// the Gaussian centers is not returned (centers enter as a stopped
    /// input).
    pub fn backward_set(&self, set: &GaussianSet, t: f64, grad_deltas: &[Delta], grads: &mut DeformGrads) {
        for (g, d) in set.gaussians().iter().zip(grad_deltas) {
            if !d.is_zero() {
                self.backward(g.center, t, d, grads);
            }
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.encoding.tables.len() + self.mlp.params.len()
    }
}

/// Map a frame index into `[0, 1]` over the clip `first..=last`; a
/// single-frame clip maps to `0.5`.
pub fn time_normalize(frame: usize, first: usize, last: usize) -> Result<f64> {
    if frame < first || frame > last {
        bail!(Precondition, "frame {frame} outside clip {first}..={last}");
    }
    if first == last {
        return Ok(0.5);
    }
    Ok((frame - first) as f64 / (last - first) as f64)
}
