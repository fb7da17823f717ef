//! Stage-1 training: per clip, a foreground and a background Gaussian set,
//! each with its own deformation field, merged through learnable per-frame
//! alpha maps and fitted to the video with the L1 + D-SSIM loss.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adam::{exponential_decay, AdamConfig, AdamState};
use crate::decompose::{self, BackgroundParams, ClipManifest, MaskedVideo, SfmPoint};
use crate::deform::{time_normalize, Aabb, DeformConfig, DeformGrads, DeformationField};
use crate::error::{bail, Error, Result};
use crate::gaussian::{quaternion_to_rotation, Camera, Gaussian, GaussianSet, Role, ShDegree};
use crate::image::Image;
use crate::loss::{recon_loss, LossValue, DEFAULT_LAMBDA};
use crate::math::{self, log, sigmoid, sqrt, Vec3};
use crate::raster::{render, render_backward, Delta, GaussianGrad, RenderOptions};

const BLACK: Vec3 = [0.0; 3];

pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-group Adam step sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    /// Center step size decays exponentially from `center_start` to
    /// `center_end` over the run.
    pub center_start: f64,
    pub center_end: f64,
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub deform: f64,
    pub alpha: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center_start: 1.6e-4,
            center_end: 1.6e-6,
            sh: 2.5e-3,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
            deform: 1.6e-3,
            alpha: 5e-2,
        }
    }
}

impl LearningRates {
    /// Every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            center_start: self.center_start * factor,
            center_end: self.center_end * factor,
            sh: self.sh * factor,
            opacity: self.opacity * factor,
            scale: self.scale * factor,
            rotation: self.rotation * factor,
            deform: self.deform * factor,
            alpha: self.alpha * factor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: usize,
    pub warmup: usize,
    /// Densification stops after this fraction of the iterations.
    pub stop_fraction: f64,
    /// Threshold on the mean screen-space positional gradient, in NDC units.
    pub grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub percent_dense: f64,
    pub min_opacity: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            interval: 100,
            warmup: 500,
            stop_fraction: 0.7,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            min_opacity: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub seed: u64,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub densify: DensifyConfig,
    pub sh_degree: ShDegree,
    pub background: BackgroundParams,
    pub initial_opacity: f64,
    pub deform: DeformConfig,
    /// Rasterize tiles in parallel (bit-identical to sequential).
    pub parallel: bool,
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            densify: DensifyConfig::default(),
            sh_degree: ShDegree::default(),
            background: BackgroundParams::default(),
            initial_opacity: 0.1,
            deform: DeformConfig::default(),
            parallel: false,
            trace_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!(Invalid, "lambda must lie in [0, 1], got {}", self.lambda);
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            bail!(Invalid, "initial opacity must lie in (0, 1)");
        }
        if self.trace_every == 0 {
            bail!(Invalid, "trace interval must be positive");
        }
        if self.background.count == 0 {
            bail!(Invalid, "background point count must be positive");
        }
        Ok(())
    }

    pub(crate) fn render_options(&self) -> RenderOptions {
        RenderOptions { parallel: self.parallel }
    }
}

/// Per-frame merge weights, stored as logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMap {
    pub frame_index: usize,
    pub width: usize,
    pub height: usize,
    pub logits: Vec<f64>,
}

impl AlphaMap {
    /// All weights exactly 0.5.
    pub fn new(frame_index: usize, width: usize, height: usize) -> Self {
        Self { frame_index, width, height, logits: vec![0.0; width * height] }
    }

    pub fn weight(&self, pixel: usize) -> f64 {
        sigmoid(self.logits[pixel])
    }
}

fn check_merge_shapes(frg: &Image, bkg: &Image, alpha: &AlphaMap) -> Result<()> {
    frg.check_shape(bkg, "merge")?;
    if alpha.width != frg.width || alpha.height != frg.height {
        bail!(Shape, "alpha map is {}x{}, images {}x{}", alpha.width, alpha.height, frg.width, frg.height);
    }
    Ok(())
}

/// `a · frg + (1 - a) · bkg` with `a = sigmoid(logit)` per pixel.
pub fn merge_views(frg: &Image, bkg: &Image, alpha: &AlphaMap) -> Result<Image> {
    check_merge_shapes(frg, bkg, alpha)?;
    let mut out = Image::new(frg.width, frg.height);
    for p in 0..frg.pixel_count() {
        let a = alpha.weight(p);
        for c in 0..3 {
            let i = p * 3 + c;
            out.data[i] = a * frg.data[i] + (1.0 - a) * bkg.data[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeGrads {
    pub frg: Image,
    pub bkg: Image,
    pub logits: Vec<f64>,
}

pub fn merge_views_backward(frg: &Image, bkg: &Image, alpha: &AlphaMap, upstream: &Image) -> Result<MergeGrads> {
    check_merge_shapes(frg, bkg, alpha)?;
    upstream.check_shape(frg, "merge upstream")?;
    let n = frg.pixel_count();
    let mut g = MergeGrads { frg: Image::new(frg.width, frg.height), bkg: Image::new(frg.width, frg.height), logits: vec![0.0; n] };
    for p in 0..n {
        let a = alpha.weight(p);
        let mut dl = 0.0;
        for c in 0..3 {
            let i = p * 3 + c;
            let u = upstream.data[i];
            g.frg.data[i] = a * u;
            g.bkg.data[i] = (1.0 - a) * u;
            dl += u * (frg.data[i] - bkg.data[i]);
        }
        g.logits[p] = dl * a * (1.0 - a);
    }
    Ok(g)
}

/// A Gaussian set with its deformation field.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub set: GaussianSet,
    pub deform: DeformationField,
}

impl Layer {
    pub fn deltas(&self, t: f64) -> Vec<Delta> {
        self.deform.deform_set(&self.set, t)
    }

    pub fn render(&self, cam: &Camera, t: f64, opts: RenderOptions) -> Result<Image> {
        let deltas = self.deltas(t);
        Ok(render(&self.set, cam, Some(&deltas), BLACK, opts)?.image)
    }
}

/// The Gaussians of one clip. `bkg` is `None` for a single-set model, whose
/// foreground render is used directly as the output frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipModel {
    pub frg: Layer,
    pub bkg: Option<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub manifest: ClipManifest,
    pub clips: Vec<ClipModel>,
    /// One per video frame, in frame order.
    pub alphas: Vec<AlphaMap>,
    pub config: TrainConfig,
}

/// Seeded generator for one purpose and clip, independent of call order.
pub(crate) fn stream_rng(seed: u64, purpose: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 32 | index as u64);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_DENSIFY: u64 = 3;
pub(crate) const STREAM_REFINE: u64 = 4;

/// Log-scale per point from the root mean squared distance to its three
/// nearest neighbours.
pub fn knn_log_scales(points: &[Vec3]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = math::sub(*p, *q);
                let d2 = math::dot(d, d);
                if d2 < best[2] {
                    best[2] = d2;
                    best.sort_by(f64::total_cmp);
                }
            }
            let finite: Vec<f64> = best.iter().copied().filter(|v| v.is_finite()).collect();
            let mean = if finite.is_empty() { 1.0 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
            0.5 * log(mean.max(1e-7))
        })
        .collect()
}

/// Gaussians centered on `points`, colored by the point colors.
pub fn gaussians_from_points(points: &[SfmPoint], degree: ShDegree, opacity: f64) -> Vec<Gaussian> {
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let scales = knn_log_scales(&positions);
    points
        .iter()
        .zip(scales)
        .map(|(p, s)| {
            let rgb = p.color.map(|c| c as f64 / 255.0);
            Gaussian::isotropic(p.position, s, opacity, rgb, degree)
        })
        .collect()
}

fn new_layer(
    gaussians: Vec<Gaussian>,
    role: Role,
    clip_id: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Layer> {
    let set = GaussianSet::new(gaussians, role, clip_id)?;
    let domain = Aabb::around(set.gaussians().iter().map(|g| g.center), 0.1)?;
    let deform = DeformationField::new(&config.deform, clip_id, domain, rng)?;
    Ok(Layer { set, deform })
}

fn alpha_maps(video: &MaskedVideo) -> Vec<AlphaMap> {
    (1..=video.len()).map(|f| AlphaMap::new(f, video.width(), video.height())).collect()
}

fn check_video(manifest: &ClipManifest, video: &MaskedVideo) -> Result<()> {
    manifest.validate()?;
    if manifest.frame_count != video.len() {
        bail!(Shape, "manifest covers {} frames, video has {}", manifest.frame_count, video.len());
    }
    Ok(())
}

impl SceneModel {
    /// Foreground sets from each clip's SfM points and background sets on a
    /// sphere around them.
    pub fn initialize(manifest: ClipManifest, video: &MaskedVideo, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_video(&manifest, video)?;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for (j, clip) in manifest.clips.iter().enumerate() {
            let mut rng = stream_rng(config.seed, STREAM_INIT, j);
            let fg: Vec<Vec3> = clip.sfm.points.iter().map(|p| p.position).collect();
            let bkg_points = decompose::init_background_points(&fg, &config.background, &mut rng)?;
            let frg = gaussians_from_points(&clip.sfm.points, config.sh_degree, config.initial_opacity);
            let bkg = gaussians_from_points(&bkg_points, config.sh_degree, config.initial_opacity);
            let frg = new_layer(frg, Role::Frg, j, &config, &mut rng)?;
            let bkg = new_layer(bkg, Role::Bkg, j, &config, &mut rng)?;
            clips.push(ClipModel { frg, bkg: Some(bkg) });
        }
        Ok(Self { alphas: alpha_maps(video), manifest, clips, config })
    }

    /// Single-set baseline: one foreground-initialized set per clip holding
    /// `budgets[j]` Gaussians (SfM points plus jittered copies of them),
    /// fitted to the full frames.
    pub fn initialize_single(manifest: ClipManifest, video: &MaskedVideo, config: TrainConfig, budgets: &[usize]) -> Result<Self> {
        config.validate()?;
        check_video(&manifest, video)?;
        if budgets.len() != manifest.clips.len() {
            bail!(Shape, "{} budgets for {} clips", budgets.len(), manifest.clips.len());
        }
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for (j, clip) in manifest.clips.iter().enumerate() {
            let budget = budgets[j];
            let mut rng = stream_rng(config.seed, STREAM_INIT, j);
            let base = &clip.sfm.points;
            if budget < base.len() {
                bail!(Invalid, "budget {budget} is below the {} foreground points of clip {}", base.len(), j + 1);
            }
            let positions: Vec<Vec3> = base.iter().map(|p| p.position).collect();
            let spread = knn_log_scales(&positions);
            let mut points = base.clone();
            while points.len() < budget {
                let k = rng.random_range(0..base.len());
                let sigma = math::exp(spread[k]);
                let jitter: Vec3 = core::array::from_fn(|_| sigma * normal(&mut rng));
                points.push(SfmPoint { position: math::add(base[k].position, jitter), color: base[k].color });
            }
            let frg = gaussians_from_points(&points, config.sh_degree, config.initial_opacity);
            clips.push(ClipModel { frg: new_layer(frg, Role::Frg, j, &config, &mut rng)?, bkg: None });
        }
        Ok(Self { alphas: alpha_maps(video), manifest, clips, config })
    }

    pub fn gaussian_count(&self) -> usize {
        self.clips.iter().map(|c| c.frg.set.len() + c.bkg.as_ref().map_or(0, |b| b.set.len())).sum()
    }

    pub fn frame_count(&self) -> usize {
        self.alphas.len()
    }

    /// Render `frame` (1-based) from clip `clip_id`.
    pub fn render_from_clip(&self, clip_id: usize, frame: usize) -> Result<Image> {
        let clip = self.manifest.clips.get(clip_id).ok_or_else(|| Error::Invalid(alloc::format!("no clip {clip_id}")))?;
        let cam = clip.camera(frame)?;
        let t = time_normalize(frame, clip.first, clip.last)?;
        let model = &self.clips[clip_id];
        let opts = self.config.render_options();
        let frg = model.frg.render(cam, t, opts)?;
        match &model.bkg {
            None => Ok(frg),
            Some(bkg) => merge_views(&frg, &bkg.render(cam, t, opts)?, &self.alphas[frame - 1]),
        }
    }

    /// Render `frame` from its owning (earliest) clip.
    pub fn render_frame(&self, frame: usize) -> Result<Image> {
        let owner = self
            .manifest
            .owner(frame)
            .ok_or_else(|| Error::Invalid(alloc::format!("frame {frame} belongs to no clip")))?;
        self.render_from_clip(owner, frame)
    }
}

/// Every frame of the video, each rendered by its owning clip.
pub fn reconstruct_video(scene: &SceneModel) -> Result<Vec<Image>> {
    (1..=scene.frame_count()).map(|f| scene.render_frame(f)).collect()
}

/// Which parameter groups an optimization step may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub geometry: bool,
    pub color: bool,
    pub deform: bool,
    pub alpha: bool,
}

impl Trainable {
    pub const ALL: Self = Self { geometry: true, color: true, deform: true, alpha: true };
}

#[derive(Clone, Debug)]
pub(crate) struct LayerOptim {
    centers: AdamState,
    sh: AdamState,
    opacity: AdamState,
    scale: AdamState,
    rotation: AdamState,
    tables: AdamState,
    mlp: AdamState,
}

impl LayerOptim {
    pub(crate) fn new(layer: &Layer) -> Self {
        let n = layer.set.len();
        let coeffs = layer.set.degree().coeff_count();
        Self {
            centers: AdamState::new(3 * n),
            sh: AdamState::new(3 * coeffs * n),
            opacity: AdamState::new(n),
            scale: AdamState::new(3 * n),
            rotation: AdamState::new(4 * n),
            tables: AdamState::new(layer.deform.encoding.tables.len()),
            mlp: AdamState::new(layer.deform.mlp.params.len()),
        }
    }

    fn remap(&self, origin: &[Option<usize>], coeffs: usize) -> Self {
        Self {
            centers: self.centers.remap(origin, 3),
            sh: self.sh.remap(origin, 3 * coeffs),
            opacity: self.opacity.remap(origin, 1),
            scale: self.scale.remap(origin, 3),
            rotation: self.rotation.remap(origin, 4),
            tables: self.tables.clone(),
            mlp: self.mlp.clone(),
        }
    }
}

pub(crate) struct LayerGrads {
    gaussians: Vec<GaussianGrad>,
    deform: DeformGrads,
    visible: Vec<bool>,
}

pub(crate) struct ClipGrads {
    frg: LayerGrads,
    bkg: Option<LayerGrads>,
    logits: Vec<f64>,
}

impl ClipGrads {
    pub(crate) fn frg(&self) -> &LayerGrads {
        &self.frg
    }

    pub(crate) fn bkg(&self) -> Option<&LayerGrads> {
        self.bkg.as_ref()
    }

    pub(crate) fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// Loss targets for one frame. `frg`/`bkg` add per-layer terms to the
/// merged-image term.
pub(crate) struct Targets<'a> {
    pub frg: Option<&'a Image>,
    pub bkg: Option<&'a Image>,
    pub merged: &'a Image,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub dssim: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, v: &LossValue) {
        self.l1 += v.l1;
        self.dssim += v.dssim;
        self.total += v.total;
    }
}

fn finite_or(v: &LossValue, iteration: usize, component: &'static str) -> Result<()> {
    if v.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, component })
    }
}

fn layer_backward(
    layer: &Layer,
    deltas: &[Delta],
    cam: &Camera,
    t: f64,
    upstream: &Image,
    opts: RenderOptions,
    with_deform: bool,
) -> Result<LayerGrads> {
    let rg = render_backward(&layer.set, cam, Some(deltas), BLACK, upstream, opts)?;
    let mut deform = DeformGrads::zeros_like(&layer.deform);
    if with_deform {
        let dg = rg.deltas.as_deref().expect("deltas were supplied");
        layer.deform.backward_set(&layer.set, t, dg, &mut deform);
    }
    Ok(LayerGrads { gaussians: rg.gaussians, deform, visible: rg.visible })
}

/// Losses and gradients of one clip model on one frame.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate(
    model: &ClipModel,
    alpha: &AlphaMap,
    cam: &Camera,
    t: f64,
    targets: &Targets<'_>,
    lambda: f64,
    opts: RenderOptions,
    iteration: usize,
    with_deform: bool,
) -> Result<(LossParts, ClipGrads)> {
    let mut parts = LossParts::default();
    let frg_deltas = model.frg.deltas(t);
    let frg_img = render(&model.frg.set, cam, Some(&frg_deltas), BLACK, opts)?.image;
    let Some(bkg) = &model.bkg else {
        let l = recon_loss(&frg_img, targets.merged, None, lambda)?;
        finite_or(&l, iteration, "merged")?;
        parts.add(&l);
        let frg = layer_backward(&model.frg, &frg_deltas, cam, t, &l.gradient, opts, with_deform)?;
        return Ok((parts, ClipGrads { frg, bkg: None, logits: vec![0.0; alpha.logits.len()] }));
    };
    let bkg_deltas = bkg.deltas(t);
    let bkg_img = render(&bkg.set, cam, Some(&bkg_deltas), BLACK, opts)?.image;
    let merged = merge_views(&frg_img, &bkg_img, alpha)?;
    let lm = recon_loss(&merged, targets.merged, None, lambda)?;
    finite_or(&lm, iteration, "merged")?;
    parts.add(&lm);
    let mg = merge_views_backward(&frg_img, &bkg_img, alpha, &lm.gradient)?;
    let mut up_frg = mg.frg;
    let mut up_bkg = mg.bkg;
    if let Some(target) = targets.frg {
        let l = recon_loss(&frg_img, target, None, lambda)?;
        finite_or(&l, iteration, "frg")?;
        parts.add(&l);
        up_frg.data.iter_mut().zip(&l.gradient.data).for_each(|(a, b)| *a += b);
    }
    if let Some(target) = targets.bkg {
        let l = recon_loss(&bkg_img, target, None, lambda)?;
        finite_or(&l, iteration, "bkg")?;
        parts.add(&l);
        up_bkg.data.iter_mut().zip(&l.gradient.data).for_each(|(a, b)| *a += b);
    }
    let frg = layer_backward(&model.frg, &frg_deltas, cam, t, &up_frg, opts, with_deform)?;
    let bkg = layer_backward(bkg, &bkg_deltas, cam, t, &up_bkg, opts, with_deform)?;
    Ok((parts, ClipGrads { frg, bkg: Some(bkg), logits: mg.logits }))
}

/// Step sizes for one iteration.
pub(crate) struct StepRates {
    pub center: f64,
    pub lr: LearningRates,
}

pub(crate) fn apply_layer(
    layer: &mut Layer,
    grads: &LayerGrads,
    opt: &mut LayerOptim,
    adam: &AdamConfig,
    rates: &StepRates,
    trainable: Trainable,
) {
    let lr = &rates.lr;
    let coeffs = layer.set.degree().coeff_count();
    let gs = layer.set.gaussians_mut();
    if trainable.geometry {
        let (sc, ss, sr) = (opt.centers.begin(adam), opt.scale.begin(adam), opt.rotation.begin(adam));
        for (i, (g, d)) in gs.iter_mut().zip(&grads.gaussians).enumerate() {
            for k in 0..3 {
                opt.centers.update(adam, sc, 3 * i + k, &mut g.center[k], d.center[k], rates.center);
                opt.scale.update(adam, ss, 3 * i + k, &mut g.log_scale[k], d.log_scale[k], lr.scale);
            }
            for k in 0..4 {
                opt.rotation.update(adam, sr, 4 * i + k, &mut g.rotation[k], d.rotation[k], lr.rotation);
            }
        }
    }
    if trainable.color {
        let (sh, so) = (opt.sh.begin(adam), opt.opacity.begin(adam));
        for (i, (g, d)) in gs.iter_mut().zip(&grads.gaussians).enumerate() {
            opt.opacity.update(adam, so, i, &mut g.opacity_logit, d.opacity_logit, lr.opacity);
            for (b, (coef, dc)) in g.sh.iter_mut().zip(&d.sh).enumerate() {
                for c in 0..3 {
                    opt.sh.update(adam, sh, (i * coeffs + b) * 3 + c, &mut coef[c], dc[c], lr.sh);
                }
            }
        }
    }
    if trainable.deform {
        opt.tables.step_slice(adam, &mut layer.deform.encoding.tables, &grads.deform.tables, lr.deform);
        opt.mlp.step_slice(adam, &mut layer.deform.mlp.params, &grads.deform.mlp, lr.deform);
    }
}

/// One trace sample: the summed loss terms at `iteration`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub l1: f64,
    pub dssim: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub clip_id: usize,
    pub trace: Vec<TraceRow>,
    /// Total loss of every iteration.
    pub totals: Vec<f64>,
    pub densify_events: usize,
}

impl TrainReport {
    /// Mean total loss over the last `n` iterations.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.totals.len());
        (n > 0).then(|| self.totals[self.totals.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

/// Accumulated screen-space positional gradient per Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub counts: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_accum: vec![0.0; n], counts: vec![0; n] }
    }

    /// Add one view's gradients; `width`/`height` convert pixel gradients to
    /// NDC units.
    pub fn record(&mut self, grads: &[GaussianGrad], visible: &[bool], width: usize, height: usize) {
        let (sx, sy) = (width as f64 / 2.0, height as f64 / 2.0);
        for (i, (g, &v)) in grads.iter().zip(visible).enumerate() {
            if v {
                let (gx, gy) = (g.mean2d[0] * sx, g.mean2d[1] * sy);
                self.grad_accum[i] += sqrt(gx * gx + gy * gy);
                self.counts[i] += 1;
            }
        }
    }

    fn mean(&self, i: usize) -> f64 {
        if self.counts[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.counts[i] as f64
        }
    }
}

/// Clone small and split large Gaussians whose mean positional gradient
/// exceeds the threshold, then prune near-transparent ones.
///
/// Returns the new set and, for each output Gaussian, the input index whose
/// optimizer state it inherits (`None` for newly created Gaussians).
pub fn densify_and_prune(
    set: &GaussianSet,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    rng: &mut impl Rng,
) -> Result<(GaussianSet, Vec<Option<usize>>)> {
    if stats.counts.len() != set.len() {
        bail!(Shape, "densify statistics cover {} Gaussians, set has {}", stats.counts.len(), set.len());
    }
    let limit = cfg.percent_dense * scene_extent;
    let mut out = Vec::with_capacity(set.len());
    let mut origin = Vec::with_capacity(set.len());
    let shrink = log(1.6);
    for (i, g) in set.gaussians().iter().enumerate() {
        let hot = stats.mean(i) > cfg.grad_threshold;
        if hot && g.max_scale() > limit {
            let rot = quaternion_to_rotation(g.rotation)?;
            let s = g.scale();
            for _ in 0..2 {
                let n: Vec3 = core::array::from_fn(|k| s[k] * normal(rng));
                let mut child = g.clone();
                child.center = math::add(g.center, math::mat_vec(&rot, n));
                child.log_scale = g.log_scale.map(|v| v - shrink);
                out.push(child);
                origin.push(None);
            }
            continue;
        }
        out.push(g.clone());
        origin.push(Some(i));
        if hot {
            out.push(g.clone());
            origin.push(None);
        }
    }
    let mut kept = Vec::with_capacity(out.len());
    let mut kept_origin = Vec::with_capacity(out.len());
    for (g, o) in out.into_iter().zip(origin) {
        if g.opacity() >= cfg.min_opacity {
            kept.push(g);
            kept_origin.push(o);
        }
    }
    let new_set = GaussianSet::new(kept, set.role, set.clip_id)?;
    Ok((new_set, kept_origin))
}

fn scene_extent(set: &GaussianSet) -> f64 {
    let centers: Vec<Vec3> = set.gaussians().iter().map(|g| g.center).collect();
    decompose::bounding_diagonal(&centers)
}

struct LayerTraining {
    optim: LayerOptim,
    stats: DensifyStats,
}

impl LayerTraining {
    fn new(layer: &Layer) -> Self {
        Self { optim: LayerOptim::new(layer), stats: DensifyStats::new(layer.set.len()) }
    }

    fn densify(&mut self, layer: &mut Layer, cfg: &DensifyConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        let extent = scene_extent(&layer.set);
        let (set, origin) = densify_and_prune(&layer.set, &self.stats, cfg, extent, rng)?;
        self.optim = self.optim.remap(&origin, set.degree().coeff_count());
        self.stats = DensifyStats::new(set.len());
        layer.set = set;
        Ok(())
    }
}

/// Optimize one clip's Gaussians, deformation fields and the alpha maps of
/// its frames for `iterations` steps.
pub fn train_clip(scene: &mut SceneModel, clip_id: usize, video: &MaskedVideo, iterations: usize) -> Result<TrainReport> {
    check_video(&scene.manifest, video)?;
    let Some(clip) = scene.manifest.clips.get(clip_id) else {
        bail!(Invalid, "no clip {clip_id}");
    };
    let (first, last) = (clip.first, clip.last);
    let config = scene.config.clone();
    let opts = config.render_options();
    let mut rng = stream_rng(config.seed, STREAM_TRAIN, clip_id);
    let mut densify_rng = stream_rng(config.seed, STREAM_DENSIFY, clip_id);
    let mut report = TrainReport { clip_id, ..Default::default() };
    let model = &mut scene.clips[clip_id];
    let mut frg_state = LayerTraining::new(&model.frg);
    let mut bkg_state = model.bkg.as_ref().map(LayerTraining::new);
    let mut alpha_states: Vec<AdamState> = (first..=last).map(|f| AdamState::new(scene.alphas[f - 1].logits.len())).collect();
    let dual = model.bkg.is_some();
    let densify_stop = (config.densify.stop_fraction * iterations as f64) as usize;
    for it in 0..iterations {
        let frame = rng.random_range(first..=last);
        let cam = scene.manifest.clips[clip_id].camera(frame)?;
        let t = time_normalize(frame, first, last)?;
        let gt = video.frame(frame);
        let masked = video.masked_frame(frame);
        let targets = if dual {
            Targets { frg: Some(&masked), bkg: Some(gt), merged: gt }
        } else {
            Targets { frg: None, bkg: None, merged: gt }
        };
        let alpha = &scene.alphas[frame - 1];
        let (loss, grads) = evaluate(model, alpha, cam, t, &targets, config.lambda, opts, it, true)?;
        report.totals.push(loss.total);
        if it % config.trace_every == 0 {
            report.trace.push(TraceRow { iteration: it, l1: loss.l1, dssim: loss.dssim, total: loss.total });
        }
        let rates = StepRates {
            center: exponential_decay(config.lr.center_start, config.lr.center_end, it, iterations),
            lr: config.lr,
        };
        apply_layer(&mut model.frg, &grads.frg, &mut frg_state.optim, &config.adam, &rates, Trainable::ALL);
        if let (Some(layer), Some(state), Some(g)) = (model.bkg.as_mut(), bkg_state.as_mut(), grads.bkg.as_ref()) {
            apply_layer(layer, g, &mut state.optim, &config.adam, &rates, Trainable::ALL);
        }
        if dual {
            let a = &mut scene.alphas[frame - 1];
            alpha_states[frame - first].step_slice(&config.adam, &mut a.logits, &grads.logits, config.lr.alpha);
        }
        if config.densify.enabled && it < densify_stop {
            frg_state.stats.record(&grads.frg.gaussians, &grads.frg.visible, cam.width(), cam.height());
            if let (Some(state), Some(g)) = (bkg_state.as_mut(), grads.bkg.as_ref()) {
                state.stats.record(&g.gaussians, &g.visible, cam.width(), cam.height());
            }
            let step = it + 1;
            if step > config.densify.warmup && step % config.densify.interval == 0 {
                frg_state.densify(&mut model.frg, &config.densify, &mut densify_rng)?;
                if let (Some(layer), Some(state)) = (model.bkg.as_mut(), bkg_state.as_mut()) {
                    state.densify(layer, &config.densify, &mut densify_rng)?;
                }
                report.densify_events += 1;
            }
        }
    }
    Ok(report)
}

/// Train every clip in index order with the configured iteration count.
pub fn train_scene(scene: &mut SceneModel, video: &MaskedVideo) -> Result<Vec<TrainReport>> {
    let iterations = scene.config.iterations;
    (0..scene.clips.len()).map(|j| train_clip(scene, j, video, iterations)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{Clip, SfmResult, SfmStatus};
    use crate::gaussian::Intrinsics;
    use crate::hashgrid::HashConfig;
    use crate::image::Mask;
    use crate::math::IDENTITY3;

    fn small_deform() -> DeformConfig {
        DeformConfig {
            hash: HashConfig { levels: 2, features_per_level: 2, log2_table_size: 8, base_resolution: 4, growth: 1.5 },
            hidden_width: 8,
            hidden_layers: 1,
        }
    }

    #[test]
    fn merge_limits_and_midpoint() {
        let frg = Image::filled(4, 4, [1.0; 3]);
        let bkg = Image::filled(4, 4, [0.0; 3]);
        let mut alpha = AlphaMap::new(1, 4, 4);
        assert!(merge_views(&frg, &bkg, &alpha).unwrap().data.iter().all(|&v| v == 0.5));
        alpha.logits.fill(800.0);
        assert_eq!(merge_views(&frg, &bkg, &alpha).unwrap(), frg);
        assert!(merge_views(&frg, &Image::new(3, 4), &alpha).is_err());
    }

    #[test]
    fn merge_is_convex_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frg = Image::from_data(5, 3, (0..45).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let bkg = Image::from_data(5, 3, (0..45).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let mut alpha = AlphaMap::new(1, 5, 3);
        for v in &mut alpha.logits {
            *v = rng.random_range(-3.0..3.0);
        }
        let m = merge_views(&frg, &bkg, &alpha).unwrap();
        for i in 0..45 {
            assert!(m.data[i] >= frg.data[i].min(bkg.data[i]) - 1e-15);
            assert!(m.data[i] <= frg.data[i].max(bkg.data[i]) + 1e-15);
        }
        let up = Image::from_data(5, 3, (0..45).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = |a: &AlphaMap| merge_views(&frg, &bkg, a).unwrap().data.iter().zip(&up.data).map(|(x, y)| x * y).sum::<f64>();
        let g = merge_views_backward(&frg, &bkg, &alpha, &up).unwrap();
        for p in 0..15 {
            let h = 1e-6;
            let mut a = alpha.clone();
            a.logits[p] += h;
            let plus = f(&a);
            a.logits[p] -= 2.0 * h;
            let fd = (plus - f(&a)) / (2.0 * h);
            assert!((fd - g.logits[p]).abs() <= 1e-3 * fd.abs().max(1e-3), "pixel {p}");
        }
    }

    #[test]
    fn knn_scale_of_a_regular_grid() {
        let pts: Vec<Vec3> = (0..5).flat_map(|x| (0..5).map(move |y| [x as f64 * 0.2, y as f64 * 0.2, 0.0])).collect();
        let s = knn_log_scales(&pts);
        // an interior point has its three nearest neighbours at distance 0.2
        assert!((math::exp(s[12]) - 0.2).abs() < 1e-12);
    }

    fn flat_scene(color: Vec3, frames: usize) -> (SceneModel, MaskedVideo) {
        let intr = Intrinsics { fx: 16.0, fy: 16.0, cx: 8.0, cy: 8.0, width: 16, height: 16 };
        let cams: Vec<Camera> = (1..=frames).map(|f| Camera::new(intr, IDENTITY3, [0.0; 3], f).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<SfmPoint> = (0..20)
            .map(|_| SfmPoint {
                position: [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(1.8..2.2)],
                color: [200, 60, 90],
            })
            .collect();
        let sfm = SfmResult { points, cameras: cams, status: SfmStatus::Success };
        let manifest = ClipManifest { clips: vec![Clip { first: 1, last: frames, overlap_with_prev: 0, sfm }], k: 10, frame_count: frames };
        let frame = Image::filled(16, 16, color);
        let mut mask = Mask::new(16, 16);
        mask.data.fill(true);
        let video = MaskedVideo::new(vec![frame; frames], vec![mask; frames], "flat").unwrap();
        let config = TrainConfig {
            deform: small_deform(),
            background: BackgroundParams { count: 50, ..Default::default() },
            ..Default::default()
        };
        let scene = SceneModel::initialize(manifest, &video, config).unwrap();
        (scene, video)
    }

    #[test]
    fn zero_iterations_leave_scene_untouched() {
        let (mut scene, video) = flat_scene([0.3, 0.5, 0.7], 1);
        let before = scene.clone();
        let report = train_clip(&mut scene, 0, &video, 0).unwrap();
        assert!(report.totals.is_empty());
        assert_eq!(scene, before);
    }

    #[test]
    fn untrained_scene_renders_static_clip() {
        let (scene, _) = flat_scene([0.3, 0.5, 0.7], 3);
        let clip = &scene.clips[0];
        let cam = scene.manifest.clips[0].camera(2).unwrap();
        let frg = render(&clip.frg.set, cam, None, BLACK, RenderOptions::default()).unwrap().image;
        let bkg = render(&clip.bkg.as_ref().unwrap().set, cam, None, BLACK, RenderOptions::default()).unwrap().image;
        assert_eq!(scene.render_frame(2).unwrap(), merge_views(&frg, &bkg, &scene.alphas[1]).unwrap());
    }

    #[test]
    fn single_frame_clip_fits_a_flat_color() {
        let target = [0.3, 0.5, 0.7];
        let (mut scene, video) = flat_scene(target, 1);
        let report = train_clip(&mut scene, 0, &video, 500).unwrap();
        let out = scene.render_frame(1).unwrap();
        let l1 = out.mean_abs_diff(video.frame(1));
        assert!(l1 < 0.01, "merged L1 {l1}");
        assert!(report.tail_mean(100).unwrap() <= report.trace[0].total);
        assert_eq!(report.trace.len(), 10);
    }

    #[test]
    fn training_is_deterministic() {
        let (mut a, video) = flat_scene([0.6, 0.2, 0.4], 2);
        let mut b = a.clone();
        let ra = train_clip(&mut a, 0, &video, 30).unwrap();
        let rb = train_clip(&mut b, 0, &video, 30).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_rendering_does_not_change_training() {
        let (mut a, video) = flat_scene([0.6, 0.2, 0.4], 2);
        let mut b = a.clone();
        b.config.parallel = true;
        train_clip(&mut a, 0, &video, 10).unwrap();
        train_clip(&mut b, 0, &video, 10).unwrap();
        assert_eq!(a.clips, b.clips);
    }

    fn iso(center: Vec3, log_scale: f64, opacity: f64) -> Gaussian {
        Gaussian::isotropic(center, log_scale, opacity, [0.5; 3], ShDegree::default())
    }

    #[test]
    fn densify_rules() {
        let cfg = DensifyConfig { enabled: true, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = GaussianSet::new(vec![iso([0.0; 3], -5.0, 0.9), iso([1.0; 3], -5.0, 0.9)], Role::Frg, 0).unwrap();
        let mut stats = DensifyStats::new(2);
        stats.counts = vec![1, 1];
        stats.grad_accum = vec![1e-5, 1e-5];
        let (same, origin) = densify_and_prune(&set, &stats, &cfg, 10.0, &mut rng).unwrap();
        assert_eq!(same, set);
        assert_eq!(origin, vec![Some(0), Some(1)]);

        stats.grad_accum[1] = 1.0;
        let (cloned, origin) = densify_and_prune(&set, &stats, &cfg, 10.0, &mut rng).unwrap();
        assert_eq!(cloned.len(), 3);
        assert_eq!(origin, vec![Some(0), Some(1), None]);

        let big = GaussianSet::new(vec![iso([0.0; 3], 0.0, 0.9)], Role::Frg, 0).unwrap();
        let stats1 = DensifyStats { grad_accum: vec![1.0], counts: vec![1] };
        let (split, origin) = densify_and_prune(&big, &stats1, &cfg, 10.0, &mut rng).unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(origin, vec![None, None]);
        for g in split.gaussians() {
            assert!((g.log_scale[0] + log(1.6)).abs() < 1e-12);
        }

        let faint = GaussianSet::new(vec![iso([0.0; 3], -5.0, 0.9), iso([1.0; 3], -5.0, 0.001)], Role::Frg, 0).unwrap();
        let (pruned, origin) = densify_and_prune(&faint, &DensifyStats::new(2), &cfg, 10.0, &mut rng).unwrap();
        assert_eq!(pruned.len(), 1);
        assert_eq!(origin, vec![Some(0)]);
    }
}
