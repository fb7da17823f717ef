//! Central finite-difference checks of the full differentiable chain:
//! deformation field -> rasterizer -> alpha merge -> L1 + D-SSIM.
//!
//! The objective holds the deformation inputs (Gaussian centers) fixed, as
//! training does, so center gradients cover the rasterizer path only.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidgs_core::deform::{Aabb, DeformConfig, DeformGrads, DeformationField};
use vidgs_core::loss::recon_loss;
use vidgs_core::raster::{render, render_backward, Delta, RenderOptions};
use vidgs_core::train::{merge_views, merge_views_backward, AlphaMap};
use vidgs_core::{Camera, Gaussian, GaussianSet, Image, Intrinsics, Role, ShDegree};

pub const SIZE: usize = 16;
pub const STEP: f64 = 1e-4;
/// Retry step for checks whose `STEP` interval crosses a non-smooth point.
pub const FINE_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;
const LAMBDA: f64 = 0.2;
const BLACK: [f64; 3] = [0.0; 3];
const SLOTS: usize = 3 + 4 + 3 + 1 + 4 * 3;

pub struct Layer {
    pub set: GaussianSet,
    pub field: DeformationField,
    /// Deformation inputs, frozen at construction.
    pub anchors: Vec<[f64; 3]>,
}

pub struct Scene {
    pub frg: Layer,
    pub bkg: Layer,
    pub alpha: AlphaMap,
    pub cam: Camera,
    pub target: Image,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Rasterizer,
    HashTables,
    Mlp,
    AlphaLogits,
}

#[derive(Clone, Copy, Debug)]
enum Param {
    Gaussian { bkg: bool, index: usize, slot: usize },
    Table { bkg: bool, index: usize },
    Mlp { bkg: bool, index: usize },
    Logit(usize),
}

impl Param {
    fn family(self) -> Family {
        match self {
            Param::Gaussian { .. } => Family::Rasterizer,
            Param::Table { .. } => Family::HashTables,
            Param::Mlp { .. } => Family::Mlp,
            Param::Logit(_) => Family::AlphaLogits,
        }
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng, depth: (f64, f64)) -> Gaussian {
    let z = rng.random_range(depth.0..depth.1);
    let reach = 0.35 * z;
    let mut g = Gaussian::isotropic(
        [rng.random_range(-reach..reach), rng.random_range(-reach..reach), z],
        0.0,
        0.5,
        [0.5; 3],
        ShDegree::new(1).unwrap(),
    );
    g.log_scale = core::array::from_fn(|_| rng.random_range(-1.4..-0.5));
    g.rotation = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
    g.rotation[0] += 1.5;
    // sigmoid stays below 0.9, away from the alpha clamp
    g.opacity_logit = rng.random_range(-1.5..1.5);
    for (k, c) in g.sh.iter_mut().enumerate() {
        let spread = if k == 0 { 1.0 } else { 0.3 };
        *c = core::array::from_fn(|_| rng.random_range(-spread..spread));
    }
    g
}

fn random_layer(rng: &mut ChaCha8Rng, count: usize, depth: (f64, f64), role: Role) -> Layer {
    let gaussians: Vec<Gaussian> = (0..count).map(|_| random_gaussian(rng, depth)).collect();
    let anchors: Vec<[f64; 3]> = gaussians.iter().map(|g| g.center).collect();
    let set = GaussianSet::new(gaussians, role, 0).unwrap();
    let bounds = Aabb::around(anchors.iter().copied(), 0.5).unwrap();
    let mut field = DeformationField::new(&DeformConfig::default(), 0, bounds, rng).unwrap();
    // untrained fields are near-constant; spread the parameters so every
    // path carries a measurable gradient
    for v in &mut field.encoding.tables {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in &mut field.mlp.params {
        *v = rng.random_range(-0.1..0.1);
    }
    Layer { set, field, anchors }
}

pub fn random_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics { fx: 16.0, fy: 16.0, cx: 8.0, cy: 8.0, width: SIZE, height: SIZE };
    let cam = Camera::new(k, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3], 1).unwrap();
    let frg_count = rng.random_range(2..=3);
    let frg = random_layer(&mut rng, frg_count, (2.0, 3.0), Role::Frg);
    let bkg = random_layer(&mut rng, 5 - frg_count, (3.5, 5.0), Role::Bkg);
    let mut alpha = AlphaMap::new(1, SIZE, SIZE);
    for v in &mut alpha.logits {
        *v = rng.random_range(-2.0..2.0);
    }
    let target = Image::from_data(SIZE, SIZE, (0..SIZE * SIZE * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    Scene { frg, bkg, alpha, cam, target, t: rng.random_range(0.0..1.0) }
}

fn deltas(layer: &Layer, t: f64) -> Vec<Delta> {
    layer.anchors.iter().map(|&p| layer.field.deform(p, t)).collect()
}

/// Everything that switches a non-smooth branch: per-pixel contributor
/// counts (alpha threshold), L1 signs and hidden ReLU patterns.
#[derive(PartialEq)]
struct Branches {
    contributors: Vec<u32>,
    signs: Vec<i8>,
    relu: Vec<bool>,
}

fn relu_pattern(layer: &Layer, t: f64, out: &mut Vec<bool>) {
    let mlp = &layer.field.mlp;
    let widths = mlp.widths();
    for &p in &layer.anchors {
        let mut x = layer.field.encode(p, t);
        let mut off = 0;
        for l in 0..widths.len() - 2 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let w = &mlp.params[off..off + fan_in * fan_out];
            let b = &mlp.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let y: Vec<f64> = (0..fan_out).map(|o| b[o] + (0..fan_in).map(|i| w[o * fan_in + i] * x[i]).sum::<f64>()).collect();
            out.extend(y.iter().map(|&v| v > 0.0));
            x = y.into_iter().map(|v| v.max(0.0)).collect();
            off += fan_in * fan_out + fan_out;
        }
    }
}

fn evaluate(scene: &Scene) -> (f64, Branches) {
    let opts = RenderOptions::default();
    let df = deltas(&scene.frg, scene.t);
    let db = deltas(&scene.bkg, scene.t);
    let rf = render(&scene.frg.set, &scene.cam, Some(&df), BLACK, opts).unwrap();
    let rb = render(&scene.bkg.set, &scene.cam, Some(&db), BLACK, opts).unwrap();
    let merged = merge_views(&rf.image, &rb.image, &scene.alpha).unwrap();
    let loss = recon_loss(&merged, &scene.target, None, LAMBDA).unwrap();
    let mut contributors = rf.contributors;
    contributors.extend(rb.contributors);
    let signs = merged.data.iter().zip(&scene.target.data).map(|(a, b)| (a - b).signum() as i8).collect();
    let mut relu = Vec::new();
    relu_pattern(&scene.frg, scene.t, &mut relu);
    relu_pattern(&scene.bkg, scene.t, &mut relu);
    (loss.total, Branches { contributors, signs, relu })
}

pub struct Analytic {
    frg: Vec<[f64; SLOTS]>,
    bkg: Vec<[f64; SLOTS]>,
    frg_deform: DeformGrads,
    bkg_deform: DeformGrads,
    logits: Vec<f64>,
}

fn flatten(g: &vidgs_core::raster::GaussianGrad) -> [f64; SLOTS] {
    let mut out = [0.0; SLOTS];
    out[0..3].copy_from_slice(&g.center);
    out[3..7].copy_from_slice(&g.rotation);
    out[7..10].copy_from_slice(&g.log_scale);
    out[10] = g.opacity_logit;
    for (k, c) in g.sh.iter().enumerate() {
        out[11 + 3 * k..14 + 3 * k].copy_from_slice(c);
    }
    out
}

pub fn analytic(scene: &Scene) -> Analytic {
    let opts = RenderOptions::default();
    let df = deltas(&scene.frg, scene.t);
    let db = deltas(&scene.bkg, scene.t);
    let rf = render(&scene.frg.set, &scene.cam, Some(&df), BLACK, opts).unwrap().image;
    let rb = render(&scene.bkg.set, &scene.cam, Some(&db), BLACK, opts).unwrap().image;
    let merged = merge_views(&rf, &rb, &scene.alpha).unwrap();
    let loss = recon_loss(&merged, &scene.target, None, LAMBDA).unwrap();
    let mg = merge_views_backward(&rf, &rb, &scene.alpha, &loss.gradient).unwrap();
    let layer = |layer: &Layer, d: &[Delta], up: &Image| {
        let g = render_backward(&layer.set, &scene.cam, Some(d), BLACK, up, opts).unwrap();
        let mut dg = DeformGrads::zeros_like(&layer.field);
        for ((p, gd), _) in layer.anchors.iter().zip(g.deltas.as_ref().unwrap()).zip(d) {
            layer.field.backward(*p, scene.t, gd, &mut dg);
        }
        (g.gaussians.iter().map(flatten).collect::<Vec<_>>(), dg)
    };
    let (frg, frg_deform) = layer(&scene.frg, &df, &mg.frg);
    let (bkg, bkg_deform) = layer(&scene.bkg, &db, &mg.bkg);
    Analytic { frg, bkg, frg_deform, bkg_deform, logits: mg.logits }
}

fn slot(g: &mut Gaussian, slot: usize) -> &mut f64 {
    match slot {
        0..=2 => &mut g.center[slot],
        3..=6 => &mut g.rotation[slot - 3],
        7..=9 => &mut g.log_scale[slot - 7],
        10 => &mut g.opacity_logit,
        _ => &mut g.sh[(slot - 11) / 3][(slot - 11) % 3],
    }
}

fn layer_mut(scene: &mut Scene, bkg: bool) -> &mut Layer {
    if bkg {
        &mut scene.bkg
    } else {
        &mut scene.frg
    }
}

fn param(scene: &mut Scene, p: Param) -> &mut f64 {
    match p {
        Param::Gaussian { bkg, index, slot: k } => slot(&mut layer_mut(scene, bkg).set.gaussians_mut()[index], k),
        Param::Table { bkg, index } => &mut layer_mut(scene, bkg).field.encoding.tables[index],
        Param::Mlp { bkg, index } => &mut layer_mut(scene, bkg).field.mlp.params[index],
        Param::Logit(i) => &mut scene.alpha.logits[i],
    }
}

fn analytic_value(a: &Analytic, p: Param) -> f64 {
    match p {
        Param::Gaussian { bkg, index, slot } => (if bkg { &a.bkg } else { &a.frg })[index][slot],
        Param::Table { bkg, index } => (if bkg { &a.bkg_deform } else { &a.frg_deform }).tables[index],
        Param::Mlp { bkg, index } => (if bkg { &a.bkg_deform } else { &a.frg_deform }).mlp[index],
        Param::Logit(i) => a.logits[i],
    }
}

/// `None` when the `±h` interval crosses a branch switch.
fn central(scene: &mut Scene, p: Param, h: f64, base: &Branches) -> Option<f64> {
    let x = *param(scene, p);
    *param(scene, p) = x + h;
    let (plus, bp) = evaluate(scene);
    *param(scene, p) = x - h;
    let (minus, bm) = evaluate(scene);
    *param(scene, p) = x;
    (bp == *base && bm == *base).then(|| (plus - minus) / (2.0 * h))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct FamilyTally {
    pub checked: usize,
    pub failed: usize,
    /// Checks retried with [`FINE_STEP`] after straddling a branch switch.
    pub refined: usize,
    /// Checks whose fine interval still straddled a switch.
    pub skipped: usize,
    pub worst: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Tally {
    pub families: std::collections::BTreeMap<Family, FamilyTally>,
    pub failures: Vec<String>,
}

impl Tally {
    pub fn merge(&mut self, other: Tally) {
        for (f, t) in other.families {
            let e = self.families.entry(f).or_default();
            e.checked += t.checked;
            e.failed += t.failed;
            e.refined += t.refined;
            e.skipped += t.skipped;
            e.worst = e.worst.max(t.worst);
        }
        self.failures.extend(other.failures);
    }

    pub fn checked(&self) -> usize {
        self.families.values().map(|t| t.checked).sum()
    }

    pub fn failed(&self) -> usize {
        self.families.values().map(|t| t.failed).sum()
    }

    pub fn skipped(&self) -> usize {
        self.families.values().map(|t| t.skipped).sum()
    }

    pub fn worst(&self) -> f64 {
        self.families.values().map(|t| t.worst).fold(0.0, f64::max)
    }
}

fn params(scene: &Scene, a: &Analytic, rng: &mut ChaCha8Rng) -> Vec<Param> {
    let mut out = Vec::new();
    for (bkg, layer) in [(false, &scene.frg), (true, &scene.bkg)] {
        for index in 0..layer.set.len() {
            out.extend((0..SLOTS).map(|slot| Param::Gaussian { bkg, index, slot }));
        }
        let dg = if bkg { &a.bkg_deform } else { &a.frg_deform };
        // every touched table entry plus a sample of untouched ones
        out.extend(dg.tables.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(index, _)| Param::Table { bkg, index }));
        out.extend((0..16).map(|_| Param::Table { bkg, index: rng.random_range(0..dg.tables.len()) }));
        out.extend((0..dg.mlp.len()).map(|index| Param::Mlp { bkg, index }));
    }
    out.extend((0..scene.alpha.logits.len()).map(Param::Logit));
    out
}

pub fn check_scene(seed: u64) -> Tally {
    let mut scene = random_scene(seed);
    let a = analytic(&scene);
    let (_, base) = evaluate(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tally = Tally::default();
    for p in params(&scene, &a, &mut rng) {
        let t = tally.families.entry(p.family()).or_default();
        t.checked += 1;
        let numeric = match central(&mut scene, p, STEP, &base) {
            Some(n) => n,
            None => {
                t.refined += 1;
                match central(&mut scene, p, FINE_STEP, &base) {
                    Some(n) => n,
                    None => {
                        t.skipped += 1;
                        continue;
                    }
                }
            }
        };
        let analytic = analytic_value(&a, p);
        let err = relative_error(analytic, numeric);
        t.worst = t.worst.max(err);
        if err >= REL_TOL {
            t.failed += 1;
            tally.failures.push(format!("seed {seed} {p:?}: analytic {analytic:e} numeric {numeric:e} rel {err:e}"));
        }
    }
    tally
}
