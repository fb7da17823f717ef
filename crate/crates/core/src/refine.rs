//! Stage-2 refinement: re-fit colors, opacities and merge maps of a trained
//! scene to externally edited frames while geometry and deformation stay
//! frozen, and the recursive, ensembled orchestration around a video editor.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::adam::AdamState;
use crate::deform::time_normalize;
use crate::error::{bail, Error, Result};
use crate::image::Image;
use crate::loss::{recon_loss, DEFAULT_LAMBDA};
use crate::math::{self, Mat3, Vec3};
use crate::train::{
    apply_layer, evaluate, normal, reconstruct_video, stream_rng, LayerOptim, LearningRates, SceneModel, StepRates, Targets,
    TraceRow, Trainable, STREAM_REFINE,
};

/// One editor invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub prompt: String,
    /// Denoising steps for this call.
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub phase: usize,
}

/// A zero-shot video editor. Implementations must be deterministic for a
/// given request and input frames, and must accept arbitrary input frames
/// so that a later phase can resume from refined output.
pub trait EditorProvider {
    /// Guidance scales to ensemble over, low to high.
    fn guidance_scales(&self) -> Vec<f64>;

    /// Full denoising budget of one edit.
    fn total_steps(&self) -> usize;

    fn edit(&mut self, frames: &[Image], request: &EditRequest) -> Result<Vec<Image>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditVariant {
    pub guidance_scale: f64,
    pub frames: Vec<Image>,
}

/// Edited versions of a whole video, one per guidance scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EditBatch {
    pub variants: Vec<EditVariant>,
    pub phase: usize,
    pub prompt: String,
}

impl EditBatch {
    /// A batch holding a single edited sequence.
    pub fn single(frames: Vec<Image>) -> Self {
        Self { variants: vec![EditVariant { guidance_scale: 0.0, frames }], phase: 1, prompt: String::new() }
    }

    pub fn validate(&self, frames: usize, width: usize, height: usize) -> Result<()> {
        if self.variants.is_empty() {
            bail!(Invalid, "edit batch has no variants");
        }
        for (v, variant) in self.variants.iter().enumerate() {
            if variant.frames.len() != frames {
                bail!(Shape, "variant {v} has {} frames, the scene has {frames}", variant.frames.len());
            }
            for (i, f) in variant.frames.iter().enumerate() {
                if f.width != width || f.height != height {
                    bail!(Shape, "variant {v} frame {} is {}x{}, expected {width}x{height}", i + 1, f.width, f.height);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Recursion phases.
    pub n_r: usize,
    /// Overrides the editor's declared scales when set.
    pub guidance_scales: Option<Vec<f64>>,
    pub train_alpha: bool,
    pub lambda: f64,
    pub lr: LearningRates,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            n_r: 2,
            guidance_scales: None,
            train_alpha: true,
            lambda: DEFAULT_LAMBDA,
            lr: LearningRates::default(),
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_r == 0 {
            bail!(Invalid, "need at least one refinement phase");
        }
        if self.iterations == 0 {
            bail!(Invalid, "refinement needs a positive iteration count");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!(Invalid, "lambda must lie in [0, 1], got {}", self.lambda);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineReport {
    pub phase: usize,
    /// Mean loss of the rendered video against every variant, before and
    /// after.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<TraceRow>,
    /// Mean absolute difference between each refined frame and the mean of
    /// the edited variants.
    pub final_l1: Vec<f64>,
}

fn video_loss(frames: &[Image], batch: &EditBatch, lambda: f64) -> Result<f64> {
    let mut sum = 0.0;
    for v in &batch.variants {
        for (f, e) in frames.iter().zip(&v.frames) {
            sum += recon_loss(f, e, None, lambda)?.total;
        }
    }
    Ok(sum / (frames.len() * batch.variants.len()) as f64)
}

fn mean_variant(batch: &EditBatch, frame: usize) -> Image {
    let first = &batch.variants[0].frames[frame];
    let mut out = Image::new(first.width, first.height);
    for v in &batch.variants {
        for (o, x) in out.data.iter_mut().zip(&v.frames[frame].data) {
            *o += x / batch.variants.len() as f64;
        }
    }
    out
}

/// Fit SH, opacity and (optionally) alpha logits to the edited frames.
///
/// Each iteration draws a (clip, frame) pair uniformly, so frames shared by
/// two clips refine both, and a variant uniformly from the batch. Centers,
/// rotations, scales and deformation fields are never written.
pub fn refine_single_phase(scene: &mut SceneModel, batch: &EditBatch, config: &RefineConfig) -> Result<(Vec<Image>, RefineReport)> {
    config.validate()?;
    let (w, h) = (scene.alphas[0].width, scene.alphas[0].height);
    batch.validate(scene.frame_count(), w, h)?;
    let opts = scene.config.render_options();
    let adam = scene.config.adam;
    let pairs: Vec<(usize, usize)> =
        scene.manifest.clips.iter().enumerate().flat_map(|(j, c)| (c.first..=c.last).map(move |f| (j, f))).collect();
    let mut rng = stream_rng(config.seed, STREAM_REFINE, 2 * batch.phase);
    let mut variant_rng = stream_rng(config.seed, STREAM_REFINE, 2 * batch.phase + 1);
    let mut optims: Vec<(LayerOptim, Option<LayerOptim>)> =
        scene.clips.iter().map(|c| (LayerOptim::new(&c.frg), c.bkg.as_ref().map(LayerOptim::new))).collect();
    let mut alpha_optims: Vec<AdamState> = scene.alphas.iter().map(|a| AdamState::new(a.logits.len())).collect();
    let trainable = Trainable { geometry: false, color: true, deform: false, alpha: config.train_alpha };
    let rates = StepRates { center: 0.0, lr: config.lr };
    let before = reconstruct_video(scene)?;
    let mut report = RefineReport { phase: batch.phase, initial_loss: video_loss(&before, batch, config.lambda)?, ..Default::default() };
    for it in 0..config.iterations {
        let (j, frame) = pairs[rng.random_range(0..pairs.len())];
        let v = variant_rng.random_range(0..batch.variants.len());
        let clip = &scene.manifest.clips[j];
        let cam = clip.camera(frame)?;
        let t = time_normalize(frame, clip.first, clip.last)?;
        let target = &batch.variants[v].frames[frame - 1];
        let targets = Targets { frg: None, bkg: None, merged: target };
        let model = &mut scene.clips[j];
        let (loss, grads) =
            evaluate(model, &scene.alphas[frame - 1], cam, t, &targets, config.lambda, opts, it, false)?;
        if it % scene.config.trace_every == 0 {
            report.trace.push(TraceRow { iteration: it, l1: loss.l1, dssim: loss.dssim, total: loss.total });
        }
        let (fo, bo) = &mut optims[j];
        apply_layer(&mut model.frg, grads.frg(), fo, &adam, &rates, trainable);
        if let (Some(layer), Some(o), Some(g)) = (model.bkg.as_mut(), bo.as_mut(), grads.bkg()) {
            apply_layer(layer, g, o, &adam, &rates, trainable);
        }
        if trainable.alpha && model.bkg.is_some() {
            let a = &mut scene.alphas[frame - 1];
            alpha_optims[frame - 1].step_slice(&adam, &mut a.logits, grads.logits(), config.lr.alpha);
        }
    }
    let after = reconstruct_video(scene)?;
    report.final_loss = video_loss(&after, batch, config.lambda)?;
    report.final_l1 = after.iter().enumerate().map(|(i, f)| f.mean_abs_diff(&mean_variant(batch, i))).collect();
    Ok((after, report))
}

/// Result of a recursive, ensembled refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct RecursiveOutcome {
    pub frames: Vec<Image>,
    /// The editor output of every phase.
    pub batches: Vec<EditBatch>,
    pub reports: Vec<RefineReport>,
}

/// Split the editor's step budget over `n_r` phases; in each phase edit the
/// current frames at every guidance scale, refine on the ensemble, and feed
/// the refined render into the next phase.
pub fn refine_recursive_ensembled(
    scene: &mut SceneModel,
    editor: &mut dyn EditorProvider,
    prompt: &str,
    config: &RefineConfig,
) -> Result<RecursiveOutcome> {
    config.validate()?;
    let scales = config.guidance_scales.clone().unwrap_or_else(|| editor.guidance_scales());
    if scales.is_empty() {
        bail!(Invalid, "no guidance scales to ensemble over");
    }
    let steps = (editor.total_steps() / config.n_r).max(1);
    let phase_config = RefineConfig { iterations: (config.iterations / config.n_r).max(1), ..config.clone() };
    let mut current = reconstruct_video(scene)?;
    let mut outcome = RecursiveOutcome { frames: Vec::new(), batches: Vec::new(), reports: Vec::new() };
    for phase in 1..=config.n_r {
        let mut variants = Vec::with_capacity(scales.len());
        for &scale in &scales {
            let request = EditRequest {
                prompt: prompt.to_string(),
                steps,
                guidance_scale: scale,
                seed: config.seed,
                phase,
            };
            let frames = editor.edit(&current, &request).map_err(|e| match e {
                Error::Editor { .. } => e,
                other => Error::Editor { phase, reason: other.to_string() },
            })?;
            variants.push(EditVariant { guidance_scale: scale, frames });
        }
        let batch = EditBatch { variants, phase, prompt: prompt.to_string() };
        let (frames, report) = refine_single_phase(scene, &batch, &phase_config)?;
        outcome.batches.push(batch);
        outcome.reports.push(report);
        current = frames;
    }
    outcome.frames = current;
    Ok(outcome)
}

/// Rotation of RGB colors about the gray axis by `degrees`.
pub fn hue_rotation(degrees: f64) -> Mat3 {
    let th = degrees.to_radians();
    let (c, s) = (libm::cos(th), libm::sin(th));
    let k = 1.0 / 3.0;
    let r = libm::sqrt(k);
    let a = c + (1.0 - c) * k;
    let b = k * (1.0 - c) - r * s;
    let d = k * (1.0 - c) + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Affine color transform `M x + offset`, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorStyle {
    pub matrix: Mat3,
    pub offset: Vec3,
}

impl ColorStyle {
    pub fn hue(degrees: f64) -> Self {
        Self { matrix: hue_rotation(degrees), offset: [0.0; 3] }
    }

    /// Blend between identity (`strength = 0`) and the full transform.
    pub fn apply(&self, rgb: Vec3, strength: f64) -> Vec3 {
        let styled = math::add(math::mat_vec(&self.matrix, rgb), self.offset);
        core::array::from_fn(|c| ((1.0 - strength) * rgb[c] + strength * styled[c]).clamp(0.0, 1.0))
    }

    pub fn apply_image(&self, img: &Image, strength: f64) -> Image {
        let mut out = img.clone();
        for px in out.data.chunks_exact_mut(3) {
            let rgb = self.apply([px[0], px[1], px[2]], strength);
            px.copy_from_slice(&rgb);
        }
        out
    }
}

/// Deterministic stand-in for a diffusion video editor: a color style whose
/// strength grows with guidance scale and step count, plus per-frame and
/// per-pixel noise that makes consecutive frames disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFlickerEditor {
    pub style: ColorStyle,
    pub flicker_amplitude: f64,
    pub seed: u64,
    /// Scale at which one full-budget edit applies the style completely.
    pub default_scale: f64,
    pub scales: Vec<f64>,
    pub total_steps: usize,
    /// Fail every request of this phase (for error-path tests).
    pub fail_phase: Option<usize>,
}

impl SyntheticFlickerEditor {
    pub fn new(style: ColorStyle, flicker_amplitude: f64, seed: u64) -> Self {
        Self {
            style,
            flicker_amplitude,
            seed,
            default_scale: 7.5,
            scales: vec![5.0, 7.5, 10.0],
            total_steps: 50,
            fail_phase: None,
        }
    }
}

impl EditorProvider for SyntheticFlickerEditor {
    fn guidance_scales(&self) -> Vec<f64> {
        self.scales.clone()
    }

    fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn edit(&mut self, frames: &[Image], request: &EditRequest) -> Result<Vec<Image>> {
        if self.fail_phase == Some(request.phase) {
            return Err(Error::Editor { phase: request.phase, reason: "scripted editor failure".into() });
        }
        let progress = request.steps as f64 / self.total_steps as f64;
        let strength = request.guidance_scale / self.default_scale * progress;
        let amp = self.flicker_amplitude * progress;
        let key = self.seed ^ request.seed.rotate_left(17) ^ request.guidance_scale.to_bits().rotate_left(31);
        Ok(frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut rng = stream_rng(key, request.phase as u64, i);
                let shift: Vec3 = core::array::from_fn(|_| amp * normal(&mut rng));
                let mut out = self.style.apply_image(f, strength);
                for px in out.data.chunks_exact_mut(3) {
                    for c in 0..3 {
                        let noise = normal(&mut rng);
                        px[c] = (px[c] + shift[c] + 0.5 * amp * noise).clamp(0.0, 1.0);
                    }
                }
                out
            })
            .collect())
    }
}

/// FNV-1a over the bit patterns of every frozen parameter: centers,
/// rotations, log-scales and deformation tables and weights.
pub fn geometry_fingerprint(scene: &SceneModel) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for clip in &scene.clips {
        for layer in core::iter::once(&clip.frg).chain(clip.bkg.as_ref()) {
            for g in layer.set.gaussians() {
                g.center.iter().chain(&g.rotation).chain(&g.log_scale).for_each(|&v| eat(v));
            }
            layer.deform.encoding.tables.iter().chain(&layer.deform.mlp.params).for_each(|&v| eat(v));
        }
    }
    h
}

/// Mean over pixels of the per-pixel temporal variance, restricted to
/// pixels that every flow marks valid and static (zero displacement).
pub fn static_region_variance(frames: &[Image], flows: &[crate::loss::FlowField]) -> Result<f64> {
    let Some(first) = frames.first() else {
        bail!(Invalid, "no frames");
    };
    let n = first.pixel_count();
    let mut still = vec![true; n];
    for flow in flows {
        if flow.u.len() != n {
            bail!(Shape, "flow does not match frame size");
        }
        for p in 0..n {
            still[p] &= flow.valid[p] && flow.u[p].abs() < 1e-9 && flow.v[p].abs() < 1e-9;
        }
    }
    let count = still.iter().filter(|&&s| s).count();
    if count == 0 {
        bail!(Degenerate, "no static pixels");
    }
    let frames_n = frames.len() as f64;
    let mut total = 0.0;
    for p in (0..n).filter(|&p| still[p]) {
        for c in 0..3 {
            let mean = frames.iter().map(|f| f.data[p * 3 + c]).sum::<f64>() / frames_n;
            total += frames.iter().map(|f| (f.data[p * 3 + c] - mean) * (f.data[p * 3 + c] - mean)).sum::<f64>() / frames_n;
        }
    }
    Ok(total / (3 * count) as f64)
}
