//! Fully connected ReLU network with a linear output layer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::math::sqrt;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// Layer widths, input first.
    widths: Vec<usize>,
    /// Per layer: row-major `[out][in]` weights followed by `out` biases.
    pub params: Vec<f64>,
    zero_output: bool,
}

impl Mlp {
    /// Hidden layers use uniform `±1/sqrt(fan_in)` initialization; the output
    /// layer starts at zero when `zero_output` is set.
    pub fn new(widths: &[usize], zero_output: bool, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            bail!(Invalid, "MLP needs at least an input and an output width, all non-zero: {widths:?}");
        }
        let mut params = Vec::new();
        let layers = widths.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let count = fan_out * fan_in + fan_out;
            if zero_output && l == layers - 1 {
                params.extend(core::iter::repeat_n(0.0, count));
            } else {
                let bound = 1.0 / sqrt(fan_in as f64);
                params.extend((0..count).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Ok(Self { widths: widths.to_vec(), params, zero_output })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>, zero_output: bool) -> Result<Self> {
        let expected: usize = widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        if widths.len() < 2 || params.len() != expected {
            bail!(Shape, "MLP {widths:?} needs {expected} parameters, got {}", params.len());
        }
        Ok(Self { widths: widths.to_vec(), params, zero_output })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    /// Whether the output layer was zero-initialized.
    pub fn zero_output(&self) -> bool {
        self.zero_output
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.widths.windows(2).map(move |w| {
            let start = off;
            off += w[1] * w[0] + w[1];
            (start, w[0], w[1])
        })
    }

    /// Output plus every layer's activations (input included) for backward.
    fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        for (l, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let x = &acts[l];
            let w = &self.params[off..off + fan_out * fan_in];
            let b = &self.params[off + fan_out * fan_in..off + fan_out * fan_in + fan_out];
            let mut y: Vec<f64> = (0..fan_out)
                .map(|o| b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l + 1 < layers {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            acts.push(y);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).pop().expect("non-empty")
    }

    /// Accumulates parameter gradients into `grad_params` (same layout as
    /// `params`) and returns the input gradient.
    pub fn backward(&self, input: &[f64], grad_output: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let acts = self.forward_cached(input);
        let layers = self.widths.len() - 1;
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut g = grad_output.to_vec();
        for l in (0..layers).rev() {
            let (off, fan_in, fan_out) = offsets[l];
            if l + 1 < layers {
                // ReLU mask from this layer's post-activation output
                for (gv, &a) in g.iter_mut().zip(&acts[l + 1]) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let x = &acts[l];
            let mut gx = vec![0.0; fan_in];
            for o in 0..fan_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = off + o * fan_in;
                for i in 0..fan_in {
                    grad_params[row + i] += go * x[i];
                    gx[i] += go * self.params[row + i];
                }
                grad_params[off + fan_out * fan_in + o] += go;
            }
            g = gx;
        }
        g
    }

    /// Index of output unit `o`'s bias in `params`.
    pub fn output_bias_index(&self, o: usize) -> usize {
        let (off, fan_in, fan_out) = self.layer_offsets().last().expect("non-empty");
        off + fan_out * fan_in + o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[5, 8, 8, 3], true, &mut rng).unwrap();
        assert_eq!(mlp.forward(&[0.1, -0.2, 0.3, 0.9, 1.0]), vec![0.0; 3]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[4, 6, 5, 3], false, &mut rng).unwrap();
        let x = [0.3, -0.7, 0.2, 0.5];
        let w = [0.4, -1.0, 0.25];
        let loss = |m: &Mlp, x: &[f64]| m.forward(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let mut gp = vec![0.0; mlp.params.len()];
        let gx = mlp.backward(&x, &w, &mut gp);
        let h = 1e-6;
        for i in 0..mlp.params.len() {
            let mut m = mlp.clone();
            m.params[i] += h;
            let up = loss(&m, &x);
            m.params[i] -= 2.0 * h;
            let fd = (up - loss(&m, &x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-7, "param {i}");
        }
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(Mlp::new(&[4], true, &mut rng).is_err());
        assert!(Mlp::from_params(&[2, 2], vec![0.0; 5], true).is_err());
    }
}
