//! The Gaussian primitive, Gaussian sets and the pinhole camera.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math::{self, exp, fabs, sqrt, Mat3, Vec3};

/// Spherical-harmonic degree in `0..=3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShDegree(u8);

impl ShDegree {
    pub const MAX: u8 = 3;

    pub fn new(degree: u8) -> Result<Self> {
        if degree > Self::MAX {
            bail!(Invalid, "SH degree {degree} outside 0..=3");
        }
        Ok(Self(degree))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Number of coefficients per channel, `(deg + 1)²`.
    pub fn coeff_count(self) -> usize {
        let d = self.0 as usize + 1;
        d * d
    }

    /// Inverse of [`coeff_count`](Self::coeff_count).
    pub fn from_coeff_count(count: usize) -> Result<Self> {
        match count {
            1 => Ok(Self(0)),
            4 => Ok(Self(1)),
            9 => Ok(Self(2)),
            16 => Ok(Self(3)),
            _ => bail!(Invalid, "{count} SH coefficients is not a square of 1..=4"),
        }
    }
}

impl Default for ShDegree {
    fn default() -> Self {
        Self(1)
    }
}

/// One anisotropic 3D Gaussian.
///
/// Opacity is stored as a logit and scale as a log so that unconstrained
/// parameter updates always map back to valid primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub center: Vec3,
    /// Quaternion `(w, x, y, z)`; normalized wherever it is used.
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// One RGB triple per SH basis function.
    pub sh: Vec<Vec3>,
}

impl Gaussian {
    /// Isotropic Gaussian with a constant (degree-0) color.
    pub fn isotropic(center: Vec3, log_scale: f64, opacity: f64, rgb: Vec3, degree: ShDegree) -> Self {
        let mut sh = vec![[0.0; 3]; degree.coeff_count()];
        sh[0] = crate::sh::rgb_to_dc(rgb);
        Self {
            center,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [log_scale; 3],
            opacity_logit: math::logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        [exp(self.log_scale[0]), exp(self.log_scale[1]), exp(self.log_scale[2])]
    }

    pub fn max_scale(&self) -> f64 {
        let s = self.scale();
        s[0].max(s[1]).max(s[2])
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Frg,
    Bkg,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Frg => "frg",
            Role::Bkg => "bkg",
        }
    }
}

/// Non-empty collection of Gaussians belonging to one clip, all sharing one
/// SH degree.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    gaussians: Vec<Gaussian>,
    pub role: Role,
    pub clip_id: usize,
    degree: ShDegree,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>, role: Role, clip_id: usize) -> Result<Self> {
        let Some(first) = gaussians.first() else {
            bail!(Degenerate, "Gaussian set for clip {clip_id} ({}) is empty", role.as_str());
        };
        let degree = ShDegree::from_coeff_count(first.sh.len())?;
        if let Some(i) = gaussians.iter().position(|g| g.sh.len() != first.sh.len()) {
            bail!(Invalid, "Gaussian {i} has {} SH coefficients, expected {}", gaussians[i].sh.len(), first.sh.len());
        }
        Ok(Self { gaussians, role, clip_id, degree })
    }

    pub fn degree(&self) -> ShDegree {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    /// Mutable access to the parameters. The count and SH length must not
    /// change through this view.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn into_gaussians(self) -> Vec<Gaussian> {
        self.gaussians
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Pinhole camera with a rigid world-to-camera transform `p_cam = R p + t`.
///
/// Pixel `(u, v)` covers `[u, u+1) × [v, v+1)`; its center sits at
/// `(u + 0.5, v + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub frame_index: usize,
    /// `(w, x, y, z)` form of `rotation` for export. Kept verbatim when the
    /// camera was built from a quaternion, so a text round trip reproduces
    /// the rotation bit for bit.
    pub quaternion: [f64; 4],
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Mat3, translation: Vec3, frame_index: usize) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            bail!(Invalid, "focal lengths must be positive, got fx={} fy={}", intrinsics.fx, intrinsics.fy);
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            bail!(Invalid, "camera image size must be non-zero");
        }
        let err = math::orthonormality_error(&rotation);
        if !(err < 1e-6) {
            bail!(Invalid, "camera rotation is not orthonormal (|R Rᵀ - I| = {err:e})");
        }
        let quaternion = rotation_to_quaternion(&rotation);
        Ok(Self { intrinsics, rotation, translation, frame_index, quaternion })
    }

    pub fn from_quaternion(intrinsics: Intrinsics, q: [f64; 4], translation: Vec3, frame_index: usize) -> Result<Self> {
        let mut cam = Self::new(intrinsics, quaternion_to_rotation(q)?, translation, frame_index)?;
        cam.quaternion = q;
        Ok(cam)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation, p), self.translation)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn position(&self) -> Vec3 {
        math::scale(math::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// Rotation matrix of `q = (w, x, y, z)`, normalized first.
pub fn quaternion_to_rotation(q: [f64; 4]) -> Result<Mat3> {
    let n = sqrt(q.iter().map(|v| v * v).sum::<f64>());
    if !(n > 0.0) || !n.is_finite() {
        bail!(Degenerate, "quaternion has zero or non-finite norm");
    }
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Ok([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0` of a rotation matrix.
pub fn rotation_to_quaternion(r: &Mat3) -> [f64; 4] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace > 0.0 {
        let s = 2.0 * sqrt(trace + 1.0);
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = 2.0 * sqrt(1.0 + r[0][0] - r[1][1] - r[2][2]);
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] > r[2][2] {
        let s = 2.0 * sqrt(1.0 + r[1][1] - r[0][0] - r[2][2]);
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = 2.0 * sqrt(1.0 + r[2][2] - r[0][0] - r[1][1]);
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    };
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Pull `dL/dR` back to the raw (unnormalized) quaternion.
pub fn quaternion_to_rotation_backward(q: [f64; 4], grad_r: &Mat3) -> [f64; 4] {
    let n = sqrt(q.iter().map(|v| v * v).sum::<f64>());
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let g = grad_r;
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let gy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let gz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1] + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    let unit = [w, x, y, z];
    let gu = [gw, gx, gy, gz];
    let radial: f64 = unit.iter().zip(&gu).map(|(u, g)| u * g).sum();
    core::array::from_fn(|i| (gu[i] - unit[i] * radial) / n)
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(g: &Gaussian) -> Result<Mat3> {
    covariance_from(g.rotation, g.log_scale)
}

pub(crate) fn covariance_from(rotation: [f64; 4], log_scale: Vec3) -> Result<Mat3> {
    let r = quaternion_to_rotation(rotation)?;
    let d = [exp(2.0 * log_scale[0]), exp(2.0 * log_scale[1]), exp(2.0 * log_scale[2])];
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = r[i][0] * d[0] * r[j][0] + r[i][1] * d[1] * r[j][1] + r[i][2] * d[2] * r[j][2];
            sigma[i][j] = v;
            sigma[j][i] = v;
        }
    }
    Ok(sigma)
}

/// Quaternion norm deviation, for invariant checks.
pub fn quaternion_norm_error(q: [f64; 4]) -> f64 {
    fabs(sqrt(q.iter().map(|v| v * v).sum::<f64>()) - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{determinant, mat_mul, orthonormality_error, transpose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
        core::array::from_fn(|_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_half_turn() {
        assert_eq!(quaternion_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap(), math::IDENTITY3);
        let r = quaternion_to_rotation([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(r, [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quaternion_recovered_from_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let r = quaternion_to_rotation(q).unwrap();
            let back = rotation_to_quaternion(&r);
            let n = sqrt(q.iter().map(|v| v * v).sum::<f64>());
            let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
            for k in 0..4 {
                assert!((back[k] - sign * q[k] / n).abs() < 1e-12);
            }
        }
        assert_eq!(rotation_to_quaternion(&math::IDENTITY3), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_quaternion_is_degenerate() {
        assert!(matches!(quaternion_to_rotation([0.0; 4]), Err(crate::Error::Degenerate(_))));
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let r = quaternion_to_rotation(random_quat(&mut rng)).unwrap();
            assert!(orthonormality_error(&r) < 1e-10);
            assert!((determinant(&r) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let weights: Mat3 = core::array::from_fn(|_| core::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let loss = |q: [f64; 4]| {
                let r = quaternion_to_rotation(q).unwrap();
                (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * weights[i][j]).sum::<f64>()
            };
            let analytic = quaternion_to_rotation_backward(q, &weights);
            for k in 0..4 {
                let h = 1e-6;
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (loss(qp) - loss(qm)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-6, "component {k}: fd {fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let mut g = Gaussian::isotropic([0.0; 3], 0.0, 0.5, [0.5; 3], ShDegree::default());
        assert_eq!(build_covariance(&g).unwrap(), math::IDENTITY3);
        g.log_scale = [core::f64::consts::LN_2, 0.0, 0.0];
        let s = build_covariance(&g).unwrap();
        let expect = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[i][j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_matches_matrix_product_and_sign_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let ls: Vec3 = core::array::from_fn(|_| rng.random_range(-2.0..1.0));
            let mut g = Gaussian::isotropic([0.0; 3], 0.0, 0.5, [0.5; 3], ShDegree::default());
            g.rotation = q;
            g.log_scale = ls;
            let sigma = build_covariance(&g).unwrap();
            // brute-force R · diag(s²) · Rᵀ
            let r = quaternion_to_rotation(q).unwrap();
            let s2 = [[exp(2.0 * ls[0]), 0.0, 0.0], [0.0, exp(2.0 * ls[1]), 0.0], [0.0, 0.0, exp(2.0 * ls[2])]];
            let oracle = mat_mul(&mat_mul(&r, &s2), &transpose(&r));
            g.rotation = q.map(|v| -v);
            let flipped = build_covariance(&g).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((sigma[i][j] - oracle[i][j]).abs() < 1e-12);
                    assert!((sigma[i][j] - flipped[i][j]).abs() < 1e-12);
                    assert_eq!(sigma[i][j], sigma[j][i]);
                }
            }
            // positive definite: all leading minors positive
            assert!(sigma[0][0] > 0.0);
            assert!(sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0] > 0.0);
            assert!(determinant(&sigma) > 0.0);
        }
    }

    #[test]
    fn set_requires_consistent_degree() {
        let a = Gaussian::isotropic([0.0; 3], 0.0, 0.5, [0.5; 3], ShDegree::new(1).unwrap());
        let b = Gaussian::isotropic([0.0; 3], 0.0, 0.5, [0.5; 3], ShDegree::new(2).unwrap());
        assert!(GaussianSet::new(alloc::vec![a.clone(), b], Role::Frg, 0).is_err());
        assert!(GaussianSet::new(Vec::new(), Role::Frg, 0).is_err());
        let set = GaussianSet::new(alloc::vec![a], Role::Bkg, 2).unwrap();
        assert_eq!(set.degree().get(), 1);
    }

    #[test]
    fn opacity_stays_inside_open_interval() {
        for logit in [-30.0, -5.0, 0.0, 5.0, 30.0] {
            let mut g = Gaussian::isotropic([0.0; 3], 0.0, 0.5, [0.5; 3], ShDegree::default());
            g.opacity_logit = logit;
            let s = g.opacity();
            assert!(s > 0.0 && s < 1.0, "{logit} -> {s}");
        }
    }

    #[test]
    fn camera_rejects_bad_rotation() {
        let k = Intrinsics { fx: 10.0, fy: 10.0, cx: 5.0, cy: 5.0, width: 10, height: 10 };
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(k, skew, [0.0; 3], 0).is_err());
        let bad_k = Intrinsics { fx: 0.0, ..k };
        assert!(Camera::new(bad_k, math::IDENTITY3, [0.0; 3], 0).is_err());
        let cam = Camera::new(k, math::IDENTITY3, [0.0, 0.0, 4.0], 0).unwrap();
        assert_eq!(cam.position(), [0.0, 0.0, -4.0]);
    }
}
