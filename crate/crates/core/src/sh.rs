//! Real spherical harmonics up to degree 3, in the basis ordering and sign
//! convention used by common Gaussian-splatting implementations.
//!
//! A color is `clamp(Σ_l sh_l · Y_l(dir) + 0.5, 0, 1)` per channel.

use crate::error::{bail, Result};
use crate::math::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// DC coefficient whose evaluation yields `rgb` for every direction.
pub fn rgb_to_dc(rgb: Vec3) -> Vec3 {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// Basis values `Y_l(dir)` for the first `count` functions.
pub fn basis(dir: Vec3, count: usize) -> [f64; 16] {
    let [x, y, z] = dir;
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if count > 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if count > 9 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives `∂Y_l/∂(x, y, z)`.
fn basis_jacobian(dir: Vec3, count: usize) -> [Vec3; 16] {
    let [x, y, z] = dir;
    let mut j = [[0.0; 3]; 16];
    if count > 1 {
        j[1] = [0.0, -SH_C1, 0.0];
        j[2] = [0.0, 0.0, SH_C1];
        j[3] = [-SH_C1, 0.0, 0.0];
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        j[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        j[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        j[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        j[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        j[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
        if count > 9 {
            j[9] = [6.0 * SH_C3[0] * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            j[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
            j[11] = [-2.0 * SH_C3[2] * x * y, SH_C3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * SH_C3[2] * y * z];
            j[12] = [-6.0 * SH_C3[3] * x * z, -6.0 * SH_C3[3] * y * z, SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)];
            j[13] = [SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * SH_C3[4] * x * y, 8.0 * SH_C3[4] * x * z];
            j[14] = [2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)];
            j[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, 0.0];
        }
    }
    j
}

fn check_len(sh: &[Vec3]) -> Result<()> {
    if !matches!(sh.len(), 1 | 4 | 9 | 16) {
        bail!(Shape, "{} SH coefficients does not match any degree in 0..=3", sh.len());
    }
    Ok(())
}

/// Unclamped color `Σ sh_l Y_l(dir) + 0.5`.
pub fn eval_sh_raw(sh: &[Vec3], dir: Vec3) -> Vec3 {
    let b = basis(dir, sh.len());
    let mut out = [0.5; 3];
    for (coeff, &y) in sh.iter().zip(&b) {
        for c in 0..3 {
            out[c] += coeff[c] * y;
        }
    }
    out
}

/// Color seen along `dir` (unit vector), clamped to `[0, 1]`.
pub fn eval_sh(sh: &[Vec3], dir: Vec3) -> Result<Vec3> {
    check_len(sh)?;
    Ok(eval_sh_raw(sh, dir).map(crate::math::clamp01))
}

/// Like [`eval_sh`] but checks the length against an explicit degree.
pub fn eval_sh_with_degree(sh: &[Vec3], degree: crate::ShDegree, dir: Vec3) -> Result<Vec3> {
    if sh.len() != degree.coeff_count() {
        bail!(Shape, "{} SH coefficients for degree {} (expected {})", sh.len(), degree.get(), degree.coeff_count());
    }
    eval_sh(sh, dir)
}

/// Backward of [`eval_sh`]: accumulates `dL/dsh` into `grad_sh` and returns
/// `dL/ddir`. Channels whose raw value was clamped receive no gradient.
pub fn eval_sh_backward(sh: &[Vec3], dir: Vec3, grad_color: Vec3, grad_sh: &mut [Vec3]) -> Vec3 {
    let raw = eval_sh_raw(sh, dir);
    let g: Vec3 = core::array::from_fn(|c| if raw[c] > 0.0 && raw[c] < 1.0 { grad_color[c] } else { 0.0 });
    let b = basis(dir, sh.len());
    for (l, out) in grad_sh.iter_mut().enumerate() {
        for c in 0..3 {
            out[c] += g[c] * b[l];
        }
    }
    let jac = basis_jacobian(dir, sh.len());
    let mut grad_dir = [0.0; 3];
    for (coeff, dy) in sh.iter().zip(&jac).skip(1) {
        let w = coeff[0] * g[0] + coeff[1] * g[1] + coeff[2] * g[2];
        for a in 0..3 {
            grad_dir[a] += w * dy[a];
        }
    }
    grad_dir
}
