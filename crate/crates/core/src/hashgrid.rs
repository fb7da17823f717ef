//! Multiresolution hash encoding over a 4D (x, y, z, t) unit hypercube.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::math::{floor, log};

/// Per-axis hashing primes; the first axis is left unscrambled.
pub const PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

#[derive(Clone, Debug, PartialEq)]
pub struct HashConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Table size per level is `2^log2_table_size`.
    pub log2_table_size: u32,
    pub base_resolution: u32,
    pub growth: f64,
}

impl Default for HashConfig {
    fn default() -> Self {
        Self { levels: 8, features_per_level: 2, log2_table_size: 15, base_resolution: 8, growth: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoding {
    config: HashConfig,
    resolutions: Vec<u32>,
    /// `[level][entry][feature]`, flattened.
    pub tables: Vec<f64>,
}

/// The 16 corners of one cell: table offsets and interpolation weights.
struct Cell {
    offsets: [usize; 16],
    weights: [f64; 16],
    frac: [f64; 4],
}

impl HashEncoding {
    /// Tables initialized uniformly in `[-1e-4, 1e-4]`.
    pub fn new(config: HashConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut enc = Self::zeros(config)?;
        for v in &mut enc.tables {
            *v = rng.random_range(-1e-4..1e-4);
        }
        Ok(enc)
    }

    pub fn zeros(config: HashConfig) -> Result<Self> {
        if config.levels == 0 || config.features_per_level == 0 {
            bail!(Invalid, "hash encoding needs at least one level and one feature");
        }
        if config.log2_table_size == 0 || config.log2_table_size > 26 {
            bail!(Invalid, "log2 table size {} outside 1..=26", config.log2_table_size);
        }
        let resolutions: Vec<u32> = (0..config.levels)
            .map(|l| floor(config.base_resolution as f64 * crate::math::exp(l as f64 * log(config.growth))) as u32)
            .collect();
        if resolutions[0] == 0 || resolutions.windows(2).any(|w| w[1] <= w[0]) {
            bail!(Invalid, "level resolutions must be positive and strictly increasing: {resolutions:?}");
        }
        let len = config.levels * (1usize << config.log2_table_size) * config.features_per_level;
        Ok(Self { config, resolutions, tables: vec![0.0; len] })
    }

    pub fn config(&self) -> &HashConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn output_dim(&self) -> usize {
        self.config.levels * self.config.features_per_level
    }

    fn table_size(&self) -> usize {
        1 << self.config.log2_table_size
    }

    /// Table entry index of an integer grid corner.
    pub fn hash(&self, corner: [u32; 4]) -> usize {
        let h = corner.iter().zip(PRIMES).fold(0u32, |acc, (&c, p)| acc ^ c.wrapping_mul(p));
        h as usize & (self.table_size() - 1)
    }

    /// Offset into `tables` of the first feature of `corner` at `level`.
    pub fn entry_offset(&self, level: usize, corner: [u32; 4]) -> usize {
        (level * self.table_size() + self.hash(corner)) * self.config.features_per_level
    }

    fn cell(&self, level: usize, p: [f64; 4]) -> Cell {
        let res = self.resolutions[level];
        let mut base = [0u32; 4];
        let mut frac = [0.0; 4];
        for d in 0..4 {
            let scaled = p[d].clamp(0.0, 1.0) * res as f64;
            let c = (floor(scaled) as u32).min(res - 1);
            base[d] = c;
            frac[d] = scaled - c as f64;
        }
        let mut offsets = [0; 16];
        let mut weights = [0.0; 16];
        for bits in 0..16usize {
            let mut corner = base;
            let mut w = 1.0;
            for d in 0..4 {
                if bits >> d & 1 == 1 {
                    corner[d] += 1;
                    w *= frac[d];
                } else {
                    w *= 1.0 - frac[d];
                }
            }
            offsets[bits] = self.entry_offset(level, corner);
            weights[bits] = w;
        }
        Cell { offsets, weights, frac }
    }

    /// Features for a point in the unit hypercube (clamped), concatenated
    /// over levels.
    pub fn encode(&self, p: [f64; 4]) -> Vec<f64> {
        let f = self.config.features_per_level;
        let mut out = vec![0.0; self.output_dim()];
        for level in 0..self.config.levels {
            let cell = self.cell(level, p);
            let dst = &mut out[level * f..(level + 1) * f];
            for (&off, &w) in cell.offsets.iter().zip(&cell.weights) {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d += w * self.tables[off + k];
                }
            }
        }
        out
    }

    /// Accumulates `dL/dtables` and returns `dL/dp` (zero on clamped axes).
    pub fn backward(&self, p: [f64; 4], grad_features: &[f64], grad_tables: &mut [f64]) -> [f64; 4] {
        let f = self.config.features_per_level;
        let mut grad_p = [0.0; 4];
        for level in 0..self.config.levels {
            let cell = self.cell(level, p);
            let g = &grad_features[level * f..(level + 1) * f];
            let res = self.resolutions[level] as f64;
            for bits in 0..16usize {
                let off = cell.offsets[bits];
                let w = cell.weights[bits];
                let mut dot = 0.0;
                for k in 0..f {
                    grad_tables[off + k] += w * g[k];
                    dot += self.tables[off + k] * g[k];
                }
                if dot == 0.0 {
                    continue;
                }
                for d in 0..4 {
                    if !(p[d] > 0.0 && p[d] < 1.0) {
                        continue;
                    }
                    let mut dw = if bits >> d & 1 == 1 { 1.0 } else { -1.0 };
                    for e in (0..4).filter(|&e| e != d) {
                        dw *= if bits >> e & 1 == 1 { cell.frac[e] } else { 1.0 - cell.frac[e] };
                    }
                    grad_p[d] += dot * dw * res;
                }
            }
        }
        grad_p
    }
}
