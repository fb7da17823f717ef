//! Reconstruction loss (L1 + D-SSIM) with exact gradients, and the image
//! quality metrics PSNR, SSIM, WarpSSIM and the edit-quality product.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) evaluated at every position
//! where the window fits entirely inside the image, computed per channel and
//! averaged.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::image::{Image, Plane};
use crate::math::{exp, log};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Default D-SSIM weight in the reconstruction loss.
pub const DEFAULT_LAMBDA: f64 = 0.2;

fn window_1d() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        core::array::from_fn(|i| exp(-(i as f64 - half) * (i as f64 - half) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)));
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Separable "valid" correlation with the SSIM window.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = row[x..x + SSIM_WINDOW].iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| tmp[(y + i) * ow + x] * k[i]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a window-map back onto the image.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            if v != 0.0 {
                for i in 0..SSIM_WINDOW {
                    tmp[(y + i) * ow + x] += v * k[i];
                }
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v != 0.0 {
                for i in 0..SSIM_WINDOW {
                    out[y * w + x + i] += v * k[i];
                }
            }
        }
    }
    out
}

struct ChannelSsim {
    value: f64,
    /// dSSIM/dx when requested.
    grad: Option<Vec<f64>>,
}

/// Mean SSIM of one channel over the windows selected by `window_weights`
/// (all windows when `None`).
fn ssim_channel(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    peak: f64,
    window_weights: Option<&[f64]>,
    want_grad: bool,
) -> ChannelSsim {
    let k = window_1d();
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &k);
    let mu_y = filter_valid(y, w, h, &k);
    let m_xx = filter_valid(&xx, w, h, &k);
    let m_yy = filter_valid(&yy, w, h, &k);
    let m_xy = filter_valid(&xy, w, h, &k);
    let n = mu_x.len();
    let total_weight: f64 = window_weights.map_or(n as f64, |ww| ww.iter().sum());
    let mut sum = 0.0;
    let (mut g_mu, mut g_xx, mut g_xy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let weight = window_weights.map_or(1.0, |ww| ww[i]);
        if weight == 0.0 {
            continue;
        }
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = m_xx[i] - mx * mx;
        let var_y = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = var_x + var_y + c2;
        let s = a1 * a2 / (b1 * b2);
        sum += weight * s;
        if want_grad {
            let scale = weight / total_weight;
            g_mu[i] = scale * ((2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - s * (2.0 * mx / b1 - 2.0 * mx / b2));
            g_xx[i] = scale * (-s / b2);
            g_xy[i] = scale * (2.0 * a1 / (b1 * b2));
        }
    }
    let grad = want_grad.then(|| {
        let a = filter_adjoint(&g_mu, w, h, &k);
        let b = filter_adjoint(&g_xx, w, h, &k);
        let c = filter_adjoint(&g_xy, w, h, &k);
        (0..w * h).map(|p| a[p] + 2.0 * x[p] * b[p] + y[p] * c[p]).collect()
    });
    ChannelSsim { value: sum / total_weight, grad }
}

fn check_ssim_size(a: &Image) -> Result<()> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        bail!(Shape, "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}", a.width, a.height);
    }
    Ok(())
}

/// Structural similarity with peak 1, averaged over RGB.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.check_shape(b, "ssim")?;
    check_ssim_size(a)?;
    let mut total = 0.0;
    for c in 0..3 {
        let (x, y) = (a.channel(c), b.channel(c));
        total += ssim_channel(&x.data, &y.data, a.width, a.height, peak, None, false).value;
    }
    Ok(total / 3.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.check_shape(b, "ssim")?;
    check_ssim_size(a)?;
    let mut total = 0.0;
    let mut grad = Image::new(a.width, a.height);
    for c in 0..3 {
        let (x, y) = (a.channel(c), b.channel(c));
        let r = ssim_channel(&x.data, &y.data, a.width, a.height, 1.0, None, true);
        total += r.value;
        for (p, g) in r.grad.expect("requested").into_iter().enumerate() {
            grad.data[p * 3 + c] = g / 3.0;
        }
    }
    Ok((total / 3.0, grad))
}

/// A reconstruction loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    /// `(1 - λ) · l1 + λ · dssim`
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    /// d total / d pred
    pub gradient: Image,
}

/// L1 + D-SSIM loss between a prediction and its target.
///
/// The optional mask weights the L1 term per pixel; D-SSIM is always taken
/// over the whole image.
pub fn recon_loss(pred: &Image, target: &Image, mask: Option<&Plane>, lambda: f64) -> Result<LossValue> {
    pred.check_shape(target, "recon_loss")?;
    let n = pred.pixel_count();
    let (weights, weight_sum) = match mask {
        Some(m) => {
            if m.width != pred.width || m.height != pred.height {
                bail!(Shape, "mask is {}x{}, image {}x{}", m.width, m.height, pred.width, pred.height);
            }
            if m.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                bail!(Invalid, "mask weights must lie in [0, 1]");
            }
            let s: f64 = m.data.iter().sum();
            if s <= 0.0 {
                bail!(Degenerate, "mask has no positive weight");
            }
            (Some(&m.data), s)
        }
        None => (None, n as f64),
    };
    let norm = 3.0 * weight_sum;
    let mut l1 = 0.0;
    let mut gradient = Image::new(pred.width, pred.height);
    for p in 0..n {
        let wgt = weights.map_or(1.0, |m| m[p]);
        for c in 0..3 {
            let i = p * 3 + c;
            let d = pred.data[i] - target.data[i];
            l1 += wgt * d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            gradient.data[i] = (1.0 - lambda) * wgt * sign / norm;
        }
    }
    l1 /= norm;
    let (s, sgrad) = ssim_with_grad(pred, target)?;
    let dssim = 1.0 - s;
    for (g, sg) in gradient.data.iter_mut().zip(&sgrad.data) {
        *g -= lambda * sg;
    }
    let total = (1.0 - lambda) * l1 + lambda * dssim;
    Ok(LossValue { total, l1, dssim, gradient })
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.check_shape(b, "psnr")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * log(peak * peak / mse) / core::f64::consts::LN_10)
}

/// Dense optical flow mapping pixels of one frame to the next, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        let n = width * height;
        Self { width, height, u: vec![u; n], v: vec![v; n], valid: vec![true; n] }
    }

    pub fn zero(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }
}

/// Bilinear sample at continuous pixel-index coordinates; `None` outside the
/// grid of pixel centers.
fn sample_bilinear(img: &Image, sx: f64, sy: f64) -> Option<[f64; 3]> {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(sx >= 0.0 && sy >= 0.0 && sx <= w - 1.0 && sy <= h - 1.0) {
        return None;
    }
    let x0 = crate::math::floor(sx) as usize;
    let y0 = crate::math::floor(sy) as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let (p00, p10, p01, p11) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
    Some(core::array::from_fn(|c| {
        (1.0 - fy) * ((1.0 - fx) * p00[c] + fx * p10[c]) + fy * ((1.0 - fx) * p01[c] + fx * p11[c])
    }))
}

/// Backward-warp `next` into the frame the flow starts from:
/// `out(p) = next(p + flow(p))`. Pixels whose flow is invalid or whose sample
/// falls outside `next` are marked invalid (and left black).
pub fn backward_warp(next: &Image, flow: &FlowField) -> Result<(Image, Vec<bool>)> {
    if flow.width != next.width || flow.height != next.height {
        bail!(Shape, "flow is {}x{}, frame {}x{}", flow.width, flow.height, next.width, next.height);
    }
    let mut out = Image::new(next.width, next.height);
    let mut valid = vec![false; next.pixel_count()];
    for y in 0..next.height {
        for x in 0..next.width {
            let p = y * next.width + x;
            if !flow.valid[p] {
                continue;
            }
            if let Some(rgb) = sample_bilinear(next, x as f64 + flow.u[p], y as f64 + flow.v[p]) {
                out.set(x, y, rgb);
                valid[p] = true;
            }
        }
    }
    Ok((out, valid))
}

/// SSIM restricted to windows lying entirely on valid pixels. `None` when no
/// such window exists.
pub fn masked_ssim(a: &Image, b: &Image, valid: &[bool]) -> Result<Option<f64>> {
    a.check_shape(b, "masked_ssim")?;
    check_ssim_size(a)?;
    let (w, h) = (a.width, a.height);
    let invalid: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect();
    // box filter of invalid counts; any invalid pixel excludes the window
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut weights = vec![0.0; ow * oh];
    let mut any = false;
    for y in 0..oh {
        for x in 0..ow {
            let clean = (0..SSIM_WINDOW)
                .all(|dy| invalid[(y + dy) * w + x..(y + dy) * w + x + SSIM_WINDOW].iter().all(|&v| v == 0.0));
            if clean {
                weights[y * ow + x] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        return Ok(None);
    }
    let mut total = 0.0;
    for c in 0..3 {
        let (x, y) = (a.channel(c), b.channel(c));
        total += ssim_channel(&x.data, &y.data, w, h, 1.0, Some(&weights), false).value;
    }
    Ok(Some(total / 3.0))
}

/// Mean over consecutive frame pairs of the SSIM between frame `i` and frame
/// `i + 1` backward-warped by `flows[i]`, on valid pixels.
pub fn warp_ssim(frames: &[Image], flows: &[FlowField]) -> Result<f64> {
    if frames.len() < 2 {
        bail!(Invalid, "WarpSSIM needs at least two frames, got {}", frames.len());
    }
    if flows.len() != frames.len() - 1 {
        bail!(Shape, "{} frames need {} flows, got {}", frames.len(), frames.len() - 1, flows.len());
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, flow) in flows.iter().enumerate() {
        let (warped, valid) = backward_warp(&frames[i + 1], flow)?;
        if let Some(s) = masked_ssim(&warped, &frames[i], &valid)? {
            sum += s;
            pairs += 1;
        }
    }
    if pairs == 0 {
        bail!(Degenerate, "no frame pair has an 11x11 window of valid warped pixels");
    }
    Ok(sum / pairs as f64)
}

/// Joint edit-quality score: text-alignment score times WarpSSIM.
pub fn q_edit(clip_score_text: f64, warp_ssim: f64) -> f64 {
    clip_score_text * warp_ssim
}
