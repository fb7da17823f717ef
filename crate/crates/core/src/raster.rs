//! Tile-based differentiable Gaussian rasterizer.
//!
//! Each Gaussian is projected to a 2D splat (EWA approximation), binned into
//! 16×16 pixel tiles, depth sorted per tile and alpha composited front to
//! back. The backward pass recomputes the per-pixel compositing and walks it
//! back to front, then chains through projection, covariance and
//! spherical-harmonic color to the Gaussian parameters.
//!
//! Per-tile work is independent. With the `parallel` feature tiles may run
//! on the rayon pool; per-Gaussian gradient partials are still reduced in
//! tile order, so results do not depend on scheduling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::gaussian::{quaternion_to_rotation, quaternion_to_rotation_backward, Camera, Gaussian, GaussianSet};
use crate::image::{Image, Plane};
use crate::math::{self, exp, log, sqrt, Mat3, Vec3};
use crate::sh;

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance (pixels²).
pub const COV_BLUR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

/// Per-Gaussian additive offsets produced by a deformation field.
///
/// The rendered Gaussian uses `center + center`, `normalize(rotation +
/// rotation)` and `log_scale + log_scale`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Delta {
    pub center: Vec3,
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
}

impl Delta {
    pub fn is_zero(&self) -> bool {
        self.center == [0.0; 3] && self.rotation == [0.0; 4] && self.log_scale == [0.0; 3]
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RenderOptions {
    /// Run tiles on the rayon pool (requires the `parallel` feature;
    /// ignored otherwise).
    pub parallel: bool,
}

/// A Gaussian projected into an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Upper triangle `(xx, xy, yy)` of the blurred 2D covariance.
    pub cov2d: [f64; 3],
    /// Upper triangle of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: Vec3,
    pub alpha_base: f64,
    pub source_index: usize,
    /// Pixel radius outside which the splat's alpha is below [`ALPHA_MIN`].
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub accum_alpha: Plane,
    /// Number of splats composited at each pixel.
    pub contributors: Vec<u32>,
}

/// Gradients for one Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub center: Vec3,
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub sh: Vec<Vec3>,
    /// Gradient w.r.t. the projected mean in pixels (densification statistic).
    pub mean2d: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub gaussians: Vec<GaussianGrad>,
    /// Present when deltas were supplied. Deltas enter additively, so each
    /// entry equals the matching center/rotation/log-scale gradient.
    pub deltas: Option<Vec<Delta>>,
    /// Whether each Gaussian touched at least one tile.
    pub visible: Vec<bool>,
}

fn effective(g: &Gaussian, d: Option<&Delta>) -> (Vec3, [f64; 4], Vec3) {
    match d {
        None => (g.center, g.rotation, g.log_scale),
        Some(d) => (
            math::add(g.center, d.center),
            core::array::from_fn(|i| g.rotation[i] + d.rotation[i]),
            math::add(g.log_scale, d.log_scale),
        ),
    }
}

/// `J W` for a camera-space point: the 2×3 Jacobian of the pinhole
/// projection composed with the view rotation.
fn projection_jacobian(cam: &Camera, pc: Vec3) -> [[f64; 3]; 2] {
    let k = &cam.intrinsics;
    let [x, y, z] = pc;
    let j = [[k.fx / z, 0.0, -k.fx * x / (z * z)], [0.0, k.fy / z, -k.fy * y / (z * z)]];
    let w = &cam.rotation;
    core::array::from_fn(|i| core::array::from_fn(|m| j[i][0] * w[0][m] + j[i][1] * w[1][m] + j[i][2] * w[2][m]))
}

fn project_parts(
    center: Vec3,
    rotation: [f64; 4],
    log_scale: Vec3,
    opacity_logit: f64,
    sh_coeffs: &[Vec3],
    source_index: usize,
    cam: &Camera,
) -> Result<Option<Splat2D>> {
    let pc = cam.world_to_camera(center);
    let z = pc[2];
    if !(z > NEAR_PLANE) {
        return Ok(None);
    }
    let k = &cam.intrinsics;
    let mean2d = [k.fx * pc[0] / z + k.cx, k.fy * pc[1] / z + k.cy];
    let sigma = crate::gaussian::covariance_from(rotation, log_scale)?;
    let t = projection_jacobian(cam, pc);
    let mut cov = [0.0; 3];
    for (slot, (i, j)) in [(0, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let mut acc = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                acc += t[i][a] * sigma[a][b] * t[j][b];
            }
        }
        cov[slot] = acc;
    }
    cov[0] += COV_BLUR;
    cov[2] += COV_BLUR;
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !det.is_finite() {
        bail!(Internal, "singular 2D covariance for Gaussian {source_index} (det {det:e})");
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let alpha_base = math::sigmoid(opacity_logit);
    let mid = 0.5 * (cov[0] + cov[2]);
    let lambda_max = mid + sqrt((mid * mid - det).max(0.0));
    let radius = if alpha_base * 255.0 > 1.0 { sqrt(2.0 * lambda_max * log(255.0 * alpha_base)) } else { 0.0 };
    let view = math::sub(center, cam.position());
    let dist = math::norm(view);
    let color = sh::eval_sh_raw(sh_coeffs, math::scale(view, 1.0 / dist)).map(math::clamp01);
    Ok(Some(Splat2D { mean2d, cov2d: cov, conic, depth: z, color, alpha_base, source_index, radius }))
}

/// Project one Gaussian; `None` when its center is at or behind the near plane.
pub fn project(g: &Gaussian, cam: &Camera) -> Result<Option<Splat2D>> {
    project_parts(g.center, g.rotation, g.log_scale, g.opacity_logit, &g.sh, 0, cam)
}

#[inline]
fn pixel_alpha(s: &Splat2D, floor: f64, px: f64, py: f64) -> Option<(f64, f64, bool)> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    // `floor` sits just below the exponent where alpha reaches ALPHA_MIN, so
    // this only skips pixels the exact test below would reject anyway
    if power > 0.0 || power < floor {
        return None;
    }
    let gauss = exp(power);
    let raw = s.alpha_base * gauss;
    let clamped = raw > ALPHA_MAX;
    let alpha = if clamped { ALPHA_MAX } else { raw };
    if alpha < ALPHA_MIN {
        return None;
    }
    Some((alpha, gauss, clamped))
}

struct Prepared {
    splats: Vec<Option<Splat2D>>,
    /// Per splat, a lower bound on the exponent of any visible pixel.
    floors: Vec<f64>,
    /// Splat indices per tile, sorted by (depth, source index).
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn prepare(set: &GaussianSet, cam: &Camera, deltas: Option<&[Delta]>) -> Result<Prepared> {
    if let Some(d) = deltas {
        if d.len() != set.len() {
            bail!(Shape, "{} deltas for {} Gaussians", d.len(), set.len());
        }
    }
    let (w, h) = (cam.width(), cam.height());
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut splats = Vec::with_capacity(set.len());
    let mut floors = Vec::with_capacity(set.len());
    for (i, g) in set.gaussians().iter().enumerate() {
        let (center, rotation, log_scale) = effective(g, deltas.map(|d| &d[i]));
        let splat = project_parts(center, rotation, log_scale, g.opacity_logit, &g.sh, i, cam)?;
        if let Some(s) = &splat {
            if s.radius > 0.0 {
                // pixel centers sit at u + 0.5; one pixel of slack on each side
                let x0 = math::floor(s.mean2d[0] - s.radius - 1.5).max(0.0);
                let x1 = math::floor(s.mean2d[0] + s.radius + 0.5).min(w as f64 - 1.0);
                let y0 = math::floor(s.mean2d[1] - s.radius - 1.5).max(0.0);
                let y1 = math::floor(s.mean2d[1] + s.radius + 0.5).min(h as f64 - 1.0);
                if x0 <= x1 && y0 <= y1 {
                    let (tx0, tx1) = (x0 as usize / TILE_SIZE, x1 as usize / TILE_SIZE);
                    let (ty0, ty1) = (y0 as usize / TILE_SIZE, y1 as usize / TILE_SIZE);
                    for ty in ty0..=ty1 {
                        for tx in tx0..=tx1 {
                            tiles[ty * tiles_x + tx].push(i as u32);
                        }
                    }
                }
            }
        }
        floors.push(splat.as_ref().map_or(0.0, |s| log(ALPHA_MIN / s.alpha_base) - 1e-9));
        splats.push(splat);
    }
    for list in &mut tiles {
        list.sort_by(|&a, &b| {
            let da = splats[a as usize].as_ref().map_or(0.0, |s| s.depth);
            let db = splats[b as usize].as_ref().map_or(0.0, |s| s.depth);
            da.total_cmp(&db).then(a.cmp(&b))
        });
    }
    Ok(Prepared { splats, floors, tiles, tiles_x, tiles_y })
}

fn map_tiles<T, F>(count: usize, opts: RenderOptions, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if opts.parallel {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = opts;
    (0..count).map(f).collect()
}

fn tile_bounds(p: &Prepared, tile: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let tx = tile % p.tiles_x;
    let ty = tile / p.tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, (x0 + TILE_SIZE).min(w), y0, (y0 + TILE_SIZE).min(h))
}

/// Render a Gaussian set, optionally offset by per-Gaussian deltas.
pub fn render(
    set: &GaussianSet,
    cam: &Camera,
    deltas: Option<&[Delta]>,
    background: Vec3,
    opts: RenderOptions,
) -> Result<RenderOutput> {
    let prepared = prepare(set, cam, deltas)?;
    let (w, h) = (cam.width(), cam.height());
    let tile_count = prepared.tiles_x * prepared.tiles_y;
    let tiles = map_tiles(tile_count, opts, |tile| {
        let (x0, x1, y0, y1) = tile_bounds(&prepared, tile, w, h);
        let list = &prepared.tiles[tile];
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for py in y0..y1 {
            for px in x0..x1 {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let mut transmittance = 1.0;
                let mut color = [0.0; 3];
                let mut count = 0u32;
                for &si in list {
                    let s = prepared.splats[si as usize].as_ref().expect("binned splats are projected");
                    if let Some((alpha, _, _)) = pixel_alpha(s, prepared.floors[si as usize], fx, fy) {
                        let weight = alpha * transmittance;
                        for c in 0..3 {
                            color[c] += s.color[c] * weight;
                        }
                        transmittance *= 1.0 - alpha;
                        count += 1;
                    }
                }
                for c in 0..3 {
                    color[c] += background[c] * transmittance;
                }
                out.push((color, 1.0 - transmittance, count));
            }
        }
        out
    });
    let mut image = Image::new(w, h);
    let mut accum_alpha = Plane::new(w, h);
    let mut contributors = vec![0u32; w * h];
    for (tile, pixels) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(&prepared, tile, w, h);
        let mut it = pixels.into_iter();
        for py in y0..y1 {
            for px in x0..x1 {
                let (color, acc, count) = it.next().expect("one entry per tile pixel");
                image.set(px, py, color);
                accum_alpha.data[py * w + px] = acc;
                contributors[py * w + px] = count;
            }
        }
    }
    Ok(RenderOutput { image, accum_alpha, contributors })
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    alpha_base: f64,
    color: Vec3,
}

/// Gradients of `Σ upstream · image` w.r.t. every Gaussian parameter (and the
/// deltas, when supplied).
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    deltas: Option<&[Delta]>,
    background: Vec3,
    upstream: &Image,
    opts: RenderOptions,
) -> Result<RenderGrads> {
    let (w, h) = (cam.width(), cam.height());
    if upstream.width != w || upstream.height != h {
        bail!(Shape, "upstream gradient is {}x{}, camera renders {}x{}", upstream.width, upstream.height, w, h);
    }
    let prepared = prepare(set, cam, deltas)?;
    let tile_count = prepared.tiles_x * prepared.tiles_y;
    let partials = map_tiles(tile_count, opts, |tile| {
        let (x0, x1, y0, y1) = tile_bounds(&prepared, tile, w, h);
        let list = &prepared.tiles[tile];
        let mut grads = vec![SplatGrad::default(); list.len()];
        // (position in list, alpha, gaussian factor, clamped, transmittance before)
        let mut hits: Vec<(usize, f64, f64, bool, f64)> = Vec::with_capacity(list.len());
        for py in y0..y1 {
            for px in x0..x1 {
                let up = upstream.get(px, py);
                if up == [0.0; 3] {
                    continue;
                }
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                hits.clear();
                let mut transmittance = 1.0;
                for (pos, &si) in list.iter().enumerate() {
                    let s = prepared.splats[si as usize].as_ref().expect("binned splats are projected");
                    if let Some((alpha, gauss, clamped)) = pixel_alpha(s, prepared.floors[si as usize], fx, fy) {
                        hits.push((pos, alpha, gauss, clamped, transmittance));
                        transmittance *= 1.0 - alpha;
                    }
                }
                // color of everything behind the current splat, normalized by
                // the transmittance right after it
                let mut rest = background;
                for &(pos, alpha, gauss, clamped, t_before) in hits.iter().rev() {
                    let s = prepared.splats[list[pos] as usize].as_ref().expect("binned splats are projected");
                    let g = &mut grads[pos];
                    let mut d_alpha = 0.0;
                    for c in 0..3 {
                        g.color[c] += up[c] * alpha * t_before;
                        d_alpha += up[c] * t_before * (s.color[c] - rest[c]);
                        rest[c] = alpha * s.color[c] + (1.0 - alpha) * rest[c];
                    }
                    if clamped {
                        continue;
                    }
                    g.alpha_base += d_alpha * gauss;
                    let d_power = d_alpha * alpha;
                    let dx = fx - s.mean2d[0];
                    let dy = fy - s.mean2d[1];
                    let [a, b, c] = s.conic;
                    g.mean2d[0] += d_power * (a * dx + b * dy);
                    g.mean2d[1] += d_power * (b * dx + c * dy);
                    g.conic[0] += d_power * (-0.5 * dx * dx);
                    g.conic[1] += d_power * (-dx * dy);
                    g.conic[2] += d_power * (-0.5 * dy * dy);
                }
            }
        }
        grads
    });

    let n = set.len();
    let mut splat_grads = vec![SplatGrad::default(); n];
    let mut visible = vec![false; n];
    for (tile, grads) in partials.into_iter().enumerate() {
        for (&si, g) in prepared.tiles[tile].iter().zip(grads) {
            let acc = &mut splat_grads[si as usize];
            visible[si as usize] = true;
            for k in 0..2 {
                acc.mean2d[k] += g.mean2d[k];
            }
            for k in 0..3 {
                acc.conic[k] += g.conic[k];
                acc.color[k] += g.color[k];
            }
            acc.alpha_base += g.alpha_base;
        }
    }

    let mut out = Vec::with_capacity(n);
    for (i, g) in set.gaussians().iter().enumerate() {
        let mut grad = GaussianGrad { sh: vec![[0.0; 3]; g.sh.len()], ..Default::default() };
        if let (true, Some(splat)) = (visible[i], &prepared.splats[i]) {
            let (center, rotation, log_scale) = effective(g, deltas.map(|d| &d[i]));
            chain_to_gaussian(g, center, rotation, log_scale, splat, &splat_grads[i], cam, &mut grad)?;
        }
        out.push(grad);
    }
    let delta_grads = deltas.map(|_| {
        out.iter().map(|g| Delta { center: g.center, rotation: g.rotation, log_scale: g.log_scale }).collect()
    });
    Ok(RenderGrads { gaussians: out, deltas: delta_grads, visible })
}

#[allow(clippy::too_many_arguments)]
fn chain_to_gaussian(
    g: &Gaussian,
    center: Vec3,
    rotation: [f64; 4],
    log_scale: Vec3,
    splat: &Splat2D,
    sg: &SplatGrad,
    cam: &Camera,
    out: &mut GaussianGrad,
) -> Result<()> {
    let k = &cam.intrinsics;
    let pc = cam.world_to_camera(center);
    let [x, y, z] = pc;

    // opacity
    let sigma_o = splat.alpha_base;
    out.opacity_logit = sg.alpha_base * sigma_o * (1.0 - sigma_o);

    // conic -> covariance (upper triangle A, B, C of the blurred covariance)
    let [ca, cb, cc] = splat.cov2d;
    let det = ca * cc - cb * cb;
    let det2 = det * det;
    let [ga, gb, gc] = sg.conic;
    let d_a = ga * (-cc * cc / det2) + gb * (cb * cc / det2) + gc * (-cb * cb / det2);
    let d_b = ga * (2.0 * cb * cc / det2) + gb * (-(det + 2.0 * cb * cb) / det2) + gc * (2.0 * ca * cb / det2);
    let d_c = ga * (-cb * cb / det2) + gb * (cb * ca / det2) + gc * (-ca * ca / det2);
    // symmetric 2×2 gradient, off-diagonal split evenly
    let gcov = [[d_a, 0.5 * d_b], [0.5 * d_b, d_c]];

    // cov = T Σ Tᵀ with T = J W
    let t = projection_jacobian(cam, pc);
    let rot = quaternion_to_rotation(rotation)?;
    let dvals = [exp(2.0 * log_scale[0]), exp(2.0 * log_scale[1]), exp(2.0 * log_scale[2])];
    let sigma = crate::gaussian::covariance_from(rotation, log_scale)?;

    let mut d_sigma: Mat3 = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    acc += t[i][a] * gcov[i][j] * t[j][b];
                }
            }
            d_sigma[a][b] = acc;
        }
    }
    // dT = 2 G T Σ
    let mut d_t = [[0.0; 3]; 2];
    for i in 0..2 {
        for m in 0..3 {
            let mut acc = 0.0;
            for j in 0..2 {
                for b in 0..3 {
                    acc += gcov[i][j] * t[j][b] * sigma[b][m];
                }
            }
            d_t[i][m] = 2.0 * acc;
        }
    }
    // dJ = dT Wᵀ
    let wrot = &cam.rotation;
    let d_j: [[f64; 3]; 2] =
        core::array::from_fn(|i| core::array::from_fn(|r| (0..3).map(|m| d_t[i][m] * wrot[r][m]).sum()));

    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_pc = [0.0; 3];
    d_pc[0] += d_j[0][2] * (-k.fx / z2);
    d_pc[1] += d_j[1][2] * (-k.fy / z2);
    d_pc[2] += d_j[0][0] * (-k.fx / z2)
        + d_j[0][2] * (2.0 * k.fx * x / z3)
        + d_j[1][1] * (-k.fy / z2)
        + d_j[1][2] * (2.0 * k.fy * y / z3);
    // mean2d
    let [gmx, gmy] = sg.mean2d;
    d_pc[0] += gmx * k.fx / z;
    d_pc[1] += gmy * k.fy / z;
    d_pc[2] += -gmx * k.fx * x / z2 - gmy * k.fy * y / z2;
    out.mean2d = sg.mean2d;

    let mut d_center = math::mat_t_vec(wrot, d_pc);

    // color through SH, including the view direction's dependence on the center
    let view = math::sub(center, cam.position());
    let dist = math::norm(view);
    let dir = math::scale(view, 1.0 / dist);
    let d_dir = sh::eval_sh_backward(&g.sh, dir, sg.color, &mut out.sh);
    let radial = math::dot(dir, d_dir);
    d_center = math::add(d_center, math::scale(math::sub(d_dir, math::scale(dir, radial)), 1.0 / dist));
    out.center = d_center;

    // Σ = R D Rᵀ
    let mut d_rot: Mat3 = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            d_rot[a][b] = 2.0 * (0..3).map(|m| d_sigma[a][m] * rot[m][b]).sum::<f64>() * dvals[b];
        }
    }
    for i in 0..3 {
        let mut dd = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                dd += rot[a][i] * d_sigma[a][b] * rot[b][i];
            }
        }
        out.log_scale[i] = dd * 2.0 * dvals[i];
    }
    out.rotation = quaternion_to_rotation_backward(rotation, &d_rot);
    Ok(())
}
