//! Spatial and temporal decomposition of a video.
//!
//! Foreground masks restrict structure-from-motion to the moving object;
//! the video is then cut into short overlapping clips, each grown one frame
//! at a time until the SfM provider reports success. Frame numbers in this
//! module are 1-based and ranges are inclusive.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Error, Result};
use crate::gaussian::Camera;
use crate::image::{Image, Mask};
use crate::math::{self, Vec3};

/// Frames `V` with per-frame foreground masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedVideo {
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    /// Name of the segmented object class, kept for provenance.
    pub class_label: String,
}

impl MaskedVideo {
    pub fn new(frames: Vec<Image>, masks: Vec<Mask>, class_label: impl Into<String>) -> Result<Self> {
        if frames.len() != masks.len() {
            bail!(Shape, "{} frames but {} masks", frames.len(), masks.len());
        }
        for (i, (f, m)) in frames.iter().zip(&masks).enumerate() {
            if f.width != m.width || f.height != m.height {
                bail!(Shape, "frame {} is {}x{} but its mask is {}x{}", i + 1, f.width, f.height, m.width, m.height);
            }
            if f.width != frames[0].width || f.height != frames[0].height {
                bail!(Shape, "frame {} differs in size from frame 1", i + 1);
            }
        }
        Ok(Self { frames, masks, class_label: class_label.into() })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    /// Frame `frame` (1-based).
    pub fn frame(&self, frame: usize) -> &Image {
        &self.frames[frame - 1]
    }

    pub fn mask(&self, frame: usize) -> &Mask {
        &self.masks[frame - 1]
    }

    /// Frame with background pixels zeroed: what the SfM provider sees.
    pub fn masked_frame(&self, frame: usize) -> Image {
        self.frame(frame).masked(self.mask(frame))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfmPoint {
    pub position: Vec3,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SfmStatus {
    Success,
    Failure(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfmResult {
    pub points: Vec<SfmPoint>,
    /// One camera per frame of the requested range, in frame order.
    pub cameras: Vec<Camera>,
    pub status: SfmStatus,
}

impl SfmResult {
    pub fn failure(reason: impl Into<String>) -> Self {
        Self { points: Vec::new(), cameras: Vec::new(), status: SfmStatus::Failure(reason.into()) }
    }

    pub fn is_success(&self) -> bool {
        self.status == SfmStatus::Success
    }
}

/// A structure-from-motion backend that can be run on any contiguous frame
/// range. A failed reconstruction is a normal [`SfmStatus::Failure`]; `Err`
/// is reserved for misuse (such as an out-of-range request) or IO trouble.
pub trait SfmProvider {
    fn reconstruct(&mut self, video: &MaskedVideo, first: usize, last: usize) -> Result<SfmResult>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub first: usize,
    pub last: usize,
    /// Frames shared with the previous clip (0 for the first clip).
    pub overlap_with_prev: usize,
    pub sfm: SfmResult,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.first..=self.last).contains(&frame)
    }

    /// Camera for `frame` (1-based, inside the clip).
    pub fn camera(&self, frame: usize) -> Result<&Camera> {
        if !self.contains(frame) {
            bail!(Precondition, "frame {frame} outside clip {}..={}", self.first, self.last);
        }
        self.sfm.cameras.get(frame - self.first).ok_or_else(|| {
            Error::Invalid(format!("clip {}..={} has no camera for frame {frame}", self.first, self.last))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipManifest {
    pub clips: Vec<Clip>,
    /// Initial clip length.
    pub k: usize,
    pub frame_count: usize,
}

impl ClipManifest {
    pub fn overlaps(&self) -> Vec<usize> {
        self.clips.iter().skip(1).map(|c| c.overlap_with_prev).collect()
    }

    pub fn clip_sizes(&self) -> Vec<usize> {
        self.clips.iter().map(Clip::len).collect()
    }

    /// Earliest clip containing `frame`.
    pub fn owner(&self, frame: usize) -> Option<usize> {
        self.clips.iter().position(|c| c.contains(frame))
    }

    /// Check coverage, overlap and camera-count invariants.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.clips.first() else {
            bail!(Invalid, "manifest has no clips");
        };
        if first.first != 1 {
            bail!(Invalid, "first clip starts at frame {}, not 1", first.first);
        }
        let last = self.clips.last().expect("non-empty");
        if last.last != self.frame_count {
            bail!(Invalid, "last clip ends at {} but the video has {} frames", last.last, self.frame_count);
        }
        for (j, c) in self.clips.iter().enumerate() {
            if c.first > c.last {
                bail!(Invalid, "clip {} has an empty range {}..={}", j + 1, c.first, c.last);
            }
            if c.is_success_with_cameras() {
                continue;
            }
            bail!(Invalid, "clip {} lacks a successful reconstruction with points and one camera per frame", j + 1);
        }
        for (j, w) in self.clips.windows(2).enumerate() {
            let (a, b) = (&w[0], &w[1]);
            if b.first > a.last {
                bail!(Invalid, "gap between clip {} (ends {}) and clip {} (starts {})", j + 1, a.last, j + 2, b.first);
            }
            let shared = a.last + 1 - b.first;
            if shared < 1 || shared != b.overlap_with_prev {
                bail!(Invalid, "clip {} overlaps its predecessor by {shared}, recorded {}", j + 2, b.overlap_with_prev);
            }
            if b.last <= a.last {
                bail!(Invalid, "clip {} does not advance past clip {}", j + 2, j + 1);
            }
        }
        Ok(())
    }
}

impl Clip {
    fn is_success_with_cameras(&self) -> bool {
        self.sfm.is_success() && self.sfm.cameras.len() == self.len() && !self.sfm.points.is_empty()
    }
}

/// Progressive clip decomposition.
///
/// Each clip starts with `k` frames (or all remaining frames when fewer
/// remain) and grows by one frame per provider failure. The next clip
/// starts `overlap` frames before the previous clip's end. If the provider
/// still fails once a clip reaches the last frame, that tail is merged into
/// the previous clip and the merged range is reconstructed again.
pub fn split_clips(video: &MaskedVideo, provider: &mut dyn SfmProvider, k: usize, overlap: usize) -> Result<ClipManifest> {
    let n = video.len();
    if n < 2 {
        bail!(Precondition, "decomposition needs at least 2 frames, got {n}");
    }
    if overlap == 0 || k <= overlap {
        bail!(Invalid, "need 1 <= overlap < k, got overlap {overlap}, k {k}");
    }
    let mut clips: Vec<Clip> = Vec::new();
    let mut start = 1;
    let mut overlap_with_prev = 0;
    loop {
        let remaining = n - start + 1;
        let mut end = if remaining < k { n } else { start + k - 1 };
        let clip = loop {
            let sfm = provider.reconstruct(video, start, end)?;
            if sfm.is_success() {
                break Clip { first: start, last: end, overlap_with_prev, sfm };
            }
            if end < n {
                end += 1;
                continue;
            }
            let reason = match &sfm.status {
                SfmStatus::Failure(r) => r.clone(),
                SfmStatus::Success => unreachable!(),
            };
            let Some(prev) = clips.pop() else {
                return Err(Error::Decomposition { first: start, last: n, reason });
            };
            let merged = provider.reconstruct(video, prev.first, n)?;
            if !merged.is_success() {
                let reason = match merged.status {
                    SfmStatus::Failure(r) => r,
                    SfmStatus::Success => unreachable!(),
                };
                return Err(Error::Decomposition { first: prev.first, last: n, reason: format!("tail merge failed: {reason}") });
            }
            end = n;
            break Clip { first: prev.first, last: n, overlap_with_prev: prev.overlap_with_prev, sfm: merged };
        };
        clips.push(clip);
        if end == n {
            break;
        }
        start = end + 1 - overlap;
        overlap_with_prev = overlap;
    }
    let manifest = ClipManifest { clips, k, frame_count: n };
    manifest.validate()?;
    Ok(manifest)
}

/// Largest Euclidean distance between any two points (exact, `O(n²)`).
pub fn max_pairwise_distance(points: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max(math::distance(*a, *b));
        }
    }
    best
}

/// Bounding-box diagonal: an upper bound on [`max_pairwise_distance`] that
/// is linear in the point count.
pub fn bounding_diagonal(points: &[Vec3]) -> f64 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in points {
        for d in 0..3 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    math::distance(min, max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackgroundSphere {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackgroundParams {
    pub count: usize,
    pub radius_mult: f64,
    /// Use the bounding-box diagonal instead of the exact maximum distance.
    pub approximate_extent: bool,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self { count: 60_000, radius_mult: 3.0, approximate_extent: false }
    }
}

/// Sphere around the foreground points: centered at their centroid with
/// radius `radius_mult` times their largest pairwise distance.
pub fn background_sphere(fg: &[Vec3], params: &BackgroundParams) -> Result<BackgroundSphere> {
    if fg.len() < 2 {
        bail!(Degenerate, "background sphere needs at least 2 foreground points, got {}", fg.len());
    }
    let mut center = [0.0; 3];
    for p in fg {
        center = math::add(center, *p);
    }
    center = math::scale(center, 1.0 / fg.len() as f64);
    let extent = if params.approximate_extent { bounding_diagonal(fg) } else { max_pairwise_distance(fg) };
    if !(extent > 0.0) {
        bail!(Degenerate, "foreground points are coincident");
    }
    Ok(BackgroundSphere { center, radius: params.radius_mult * extent })
}

/// Mid-gray points spread area-uniformly over the background sphere.
pub fn init_background_points(fg: &[Vec3], params: &BackgroundParams, rng: &mut impl Rng) -> Result<Vec<SfmPoint>> {
    let sphere = background_sphere(fg, params)?;
    let mut out = Vec::with_capacity(params.count);
    while out.len() < params.count {
        let v: Vec3 = core::array::from_fn(|_| StandardNormal.sample(rng));
        let n = math::norm(v);
        if n < 1e-12 {
            continue;
        }
        let p = math::add(sphere.center, math::scale(v, sphere.radius / n));
        out.push(SfmPoint { position: p, color: [128, 128, 128] });
    }
    Ok(out)
}

impl core::fmt::Display for SfmStatus {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SfmStatus::Success => f.write_str("success"),
            SfmStatus::Failure(r) => write!(f, "failure: {r}"),
        }
    }
}

/// Human-readable one-line summary: clip count, sizes and overlaps.
pub fn summary(manifest: &ClipManifest) -> String {
    let sizes: Vec<String> = manifest.clip_sizes().iter().map(ToString::to_string).collect();
    let overlaps: Vec<String> = manifest.overlaps().iter().map(ToString::to_string).collect();
    format!("M={} sizes=[{}] overlaps=[{}]", manifest.clips.len(), sizes.join(","), overlaps.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_radius_rule() {
        let s = background_sphere(&[[0.0; 3], [2.0, 0.0, 0.0]], &BackgroundParams::default()).unwrap();
        assert_eq!(s.center, [1.0, 0.0, 0.0]);
        assert_eq!(s.radius, 6.0);
        assert!(background_sphere(&[[0.0; 3]], &BackgroundParams::default()).is_err());
    }

    #[test]
    fn background_points_lie_on_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fg = [[0.0; 3], [2.0, 0.0, 0.0], [0.5, 1.0, 0.2]];
        let params = BackgroundParams { count: 1000, ..Default::default() };
        let sphere = background_sphere(&fg, &params).unwrap();
        let pts = init_background_points(&fg, &params, &mut rng).unwrap();
        assert_eq!(pts.len(), 1000);
        for p in &pts {
            assert!((math::distance(p.position, sphere.center) - sphere.radius).abs() < 1e-6);
            assert_eq!(p.color, [128; 3]);
        }
    }

    #[test]
    fn background_points_are_centered() {
        let fg = [[0.0; 3], [2.0, 0.0, 0.0]];
        let params = BackgroundParams { count: 1000, ..Default::default() };
        let sphere = background_sphere(&fg, &params).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = init_background_points(&fg, &params, &mut rng).unwrap();
            let mut mean = [0.0; 3];
            for p in &pts {
                mean = math::add(mean, p.position);
            }
            mean = math::scale(mean, 1.0 / pts.len() as f64);
            assert!(math::distance(mean, sphere.center) < 0.1 * sphere.radius, "seed {seed}");
        }
    }

    #[test]
    fn pairwise_distance_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..60).map(|_| core::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let mut brute = 0.0f64;
        for a in &pts {
            for b in &pts {
                let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
                let d = libm::sqrt(x * x + y * y + z * z);
                brute = brute.max(d);
            }
        }
        assert_eq!(max_pairwise_distance(&pts), brute);
        assert!(bounding_diagonal(&pts) >= brute);
    }

    #[test]
    fn validate_catches_gaps() {
        let manifest = ClipManifest { clips: vec![], k: 10, frame_count: 5 };
        assert!(manifest.validate().is_err());
    }
}
