//! Analytic ground-truth scene: a textured sphere translating in front of a
//! textured background plane, seen by a pinhole camera on a straight path.
//!
//! Frames, masks and optical flow are computed by ray casting, so they are
//! exact. [`SyntheticProvider`] plays the role of an SfM backend for this
//! scene, returning the true cameras and foreground surface points, and can
//! be scripted to fail to exercise clip splitting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use libm::{cos, sin};

use crate::decompose::{MaskedVideo, SfmPoint, SfmProvider, SfmResult, SfmStatus};
use crate::error::{bail, Result};
use crate::gaussian::{Camera, Intrinsics};
use crate::image::{Image, Mask};
use crate::loss::FlowField;
use crate::math::{self, Vec3, IDENTITY3};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Focal length in pixels (both axes).
    pub focal: f64,
    pub sphere_radius: f64,
    /// Sphere center at the first and last frame; linear in between.
    pub sphere_start: Vec3,
    pub sphere_end: Vec3,
    /// Background plane `z = plane_z` (world).
    pub plane_z: f64,
    pub camera_start: Vec3,
    pub camera_end: Vec3,
    /// Spatial frequency of both textures.
    pub texture_freq: f64,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 30,
            focal: 60.0,
            sphere_radius: 0.9,
            sphere_start: [-0.8, -0.1, 4.0],
            sphere_end: [0.8, 0.2, 4.0],
            plane_z: 8.0,
            camera_start: [-0.15, 0.0, 0.0],
            camera_end: [0.15, 0.0, 0.0],
            texture_freq: 3.0,
        }
    }
}

/// What a camera ray hits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub point: Vec3,
    pub foreground: bool,
}

impl SyntheticScene {
    /// Default scene at a different size and length.
    pub fn with_size(width: usize, height: usize, frames: usize) -> Self {
        let s = width.min(height) as f64 / 64.0;
        Self { width, height, frames, focal: 60.0 * s, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            bail!(Invalid, "synthetic scene needs non-zero size and frame count");
        }
        if !(self.focal > 0.0 && self.sphere_radius > 0.0) {
            bail!(Invalid, "focal length and sphere radius must be positive");
        }
        for f in 1..=self.frames {
            let (c, o) = (self.sphere_center(f), self.camera_position(f));
            if c[2] - self.sphere_radius <= o[2] || c[2] + self.sphere_radius >= self.plane_z {
                bail!(Invalid, "sphere must lie strictly between the camera and the background plane");
            }
        }
        Ok(())
    }

    fn lerp_param(&self, frame: usize) -> f64 {
        if self.frames < 2 {
            0.0
        } else {
            (frame - 1) as f64 / (self.frames - 1) as f64
        }
    }

    pub fn sphere_center(&self, frame: usize) -> Vec3 {
        let t = self.lerp_param(frame);
        core::array::from_fn(|d| self.sphere_start[d] * (1.0 - t) + self.sphere_end[d] * t)
    }

    pub fn camera_position(&self, frame: usize) -> Vec3 {
        let t = self.lerp_param(frame);
        core::array::from_fn(|d| self.camera_start[d] * (1.0 - t) + self.camera_end[d] * t)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    /// Camera of `frame` (1-based): axis-aligned, looking down `+z`.
    pub fn camera(&self, frame: usize) -> Camera {
        let t = math::scale(self.camera_position(frame), -1.0);
        Camera::new(self.intrinsics(), IDENTITY3, t, frame).expect("axis-aligned camera is valid")
    }

    /// Cast the ray through continuous image coordinates `(u, v)`.
    pub fn cast(&self, frame: usize, u: f64, v: f64) -> Hit {
        let o = self.camera_position(frame);
        let d = [(u - self.width as f64 / 2.0) / self.focal, (v - self.height as f64 / 2.0) / self.focal, 1.0];
        let c = self.sphere_center(frame);
        let oc = math::sub(o, c);
        let a = math::dot(d, d);
        let b = 2.0 * math::dot(oc, d);
        let k = math::dot(oc, oc) - self.sphere_radius * self.sphere_radius;
        let disc = b * b - 4.0 * a * k;
        if disc >= 0.0 {
            let t = (-b - math::sqrt(disc)) / (2.0 * a);
            if t > 0.0 {
                return Hit { point: math::add(o, math::scale(d, t)), foreground: true };
            }
        }
        let t = (self.plane_z - o[2]) / d[2];
        Hit { point: math::add(o, math::scale(d, t)), foreground: false }
    }

    /// Radiance at a surface point; foreground texture moves with the sphere.
    pub fn shade(&self, frame: usize, hit: &Hit) -> Vec3 {
        let f = self.texture_freq;
        if hit.foreground {
            let l = math::scale(math::sub(hit.point, self.sphere_center(frame)), 1.0 / self.sphere_radius);
            [
                0.65 + 0.25 * sin(f * 1.3 * l[0] + 0.4),
                0.35 + 0.25 * cos(f * 1.1 * l[1] - 0.3),
                0.3 + 0.2 * sin(f * (l[0] + l[1]) + f * 0.7 * l[2]),
            ]
        } else {
            let (x, y) = (hit.point[0], hit.point[1]);
            [
                0.45 + 0.3 * sin(f * 0.5 * x) * cos(f * 0.4 * y),
                0.55 + 0.25 * cos(f * 0.6 * x + 0.8),
                0.5 + 0.3 * sin(f * 0.45 * y - 0.5),
            ]
        }
    }

    pub fn render(&self, frame: usize) -> (Image, Mask) {
        let mut img = Image::new(self.width, self.height);
        let mut mask = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let hit = self.cast(frame, x as f64 + 0.5, y as f64 + 0.5);
                img.set(x, y, self.shade(frame, &hit));
                mask.data[y * self.width + x] = hit.foreground;
            }
        }
        (img, mask)
    }

    pub fn video(&self) -> Result<MaskedVideo> {
        self.validate()?;
        let (frames, masks) = (1..=self.frames).map(|f| self.render(f)).unzip();
        MaskedVideo::new(frames, masks, "sphere")
    }

    /// Exact forward flow from `frame` to `frame + 1`. Pixels whose surface
    /// point leaves the image or becomes occluded are invalid.
    pub fn flow(&self, frame: usize) -> Result<FlowField> {
        if frame == 0 || frame >= self.frames {
            bail!(Precondition, "flow needs 1 <= frame < {}, got {frame}", self.frames);
        }
        let (w, h) = (self.width, self.height);
        let mut flow = FlowField::zero(w, h);
        let shift = math::sub(self.sphere_center(frame + 1), self.sphere_center(frame));
        let o2 = self.camera_position(frame + 1);
        let tol = 1e-6 * self.plane_z.abs().max(1.0);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let hit = self.cast(frame, x as f64 + 0.5, y as f64 + 0.5);
                let moved = if hit.foreground { math::add(hit.point, shift) } else { hit.point };
                let rel = math::sub(moved, o2);
                let u = self.focal * rel[0] / rel[2] + w as f64 / 2.0;
                let v = self.focal * rel[1] / rel[2] + h as f64 / 2.0;
                flow.u[p] = u - 0.5 - x as f64;
                flow.v[p] = v - 0.5 - y as f64;
                let slack = 1e-9;
                let inside =
                    u >= 0.5 - slack && v >= 0.5 - slack && u <= w as f64 - 0.5 + slack && v <= h as f64 - 0.5 + slack;
                let seen = self.cast(frame + 1, u, v);
                flow.valid[p] = inside && seen.foreground == hit.foreground && math::distance(seen.point, moved) < tol;
            }
        }
        Ok(flow)
    }

    pub fn flows(&self) -> Result<Vec<FlowField>> {
        (1..self.frames).map(|f| self.flow(f)).collect()
    }

    /// Roughly `count` points spread over the sphere at `frame`, keeping
    /// those facing the camera.
    pub fn surface_points(&self, frame: usize, count: usize) -> Vec<SfmPoint> {
        let c = self.sphere_center(frame);
        let o = self.camera_position(frame);
        let golden = core::f64::consts::PI * (3.0 - math::sqrt(5.0));
        let mut out = Vec::new();
        for i in 0..count {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = math::sqrt(1.0 - z * z);
            let phi = golden * i as f64;
            let n = [r * cos(phi), r * sin(phi), z];
            let p = math::add(c, math::scale(n, self.sphere_radius));
            if math::dot(n, math::sub(o, p)) <= 0.0 {
                continue;
            }
            let rgb = self.shade(frame, &Hit { point: p, foreground: true });
            let color = rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8);
            out.push(SfmPoint { position: p, color });
        }
        out
    }
}

/// Provider failures keyed by clip ordinal (1-based): ordinal `j` fails its
/// first `schedule[j]` attempts.
pub type FailureSchedule = BTreeMap<usize, usize>;

/// Scripted SfM stand-in over a [`SyntheticScene`].
///
/// A new clip ordinal begins whenever the requested first frame differs from
/// the previous request's (so a tail merge counts as a new ordinal).
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    pub scene: SyntheticScene,
    pub schedule: FailureSchedule,
    pub point_count: usize,
    last_first: Option<usize>,
    ordinal: usize,
    attempts: usize,
    /// Every `(first, last)` range requested, in order.
    pub calls: Vec<(usize, usize)>,
}

impl SyntheticProvider {
    pub fn new(scene: SyntheticScene, schedule: FailureSchedule) -> Self {
        Self { scene, schedule, point_count: 400, last_first: None, ordinal: 0, attempts: 0, calls: Vec::new() }
    }

    /// Blackswan-like schedule: the first clip needs 7 extra frames and each
    /// of the next three needs one.
    pub fn blackswan_schedule() -> FailureSchedule {
        [(1, 7), (2, 1), (3, 1), (4, 1)].into_iter().collect()
    }
}

impl SfmProvider for SyntheticProvider {
    fn reconstruct(&mut self, video: &MaskedVideo, first: usize, last: usize) -> Result<SfmResult> {
        if first == 0 || first > last || last > video.len() {
            bail!(Precondition, "requested frames {first}..={last} of a {}-frame video", video.len());
        }
        self.calls.push((first, last));
        if self.last_first != Some(first) {
            self.last_first = Some(first);
            self.ordinal += 1;
            self.attempts = 0;
        }
        self.attempts += 1;
        let fails = self.schedule.get(&self.ordinal).copied().unwrap_or(0);
        if self.attempts <= fails {
            return Ok(SfmResult::failure(format!(
                "scripted failure {}/{fails} for clip ordinal {}",
                self.attempts, self.ordinal
            )));
        }
        let cameras = (first..=last).map(|f| self.scene.camera(f)).collect();
        let mid = (first + last) / 2;
        let points = self.scene.surface_points(mid, self.point_count);
        if points.is_empty() {
            return Ok(SfmResult::failure("no points registered"));
        }
        Ok(SfmResult { points, cameras, status: SfmStatus::Success })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::split_clips;
    use crate::loss::{backward_warp, warp_ssim};
    use alloc::vec;

    fn tiny() -> SyntheticScene {
        SyntheticScene::with_size(32, 32, 6)
    }

    #[test]
    fn mask_matches_projected_sphere() {
        let s = tiny();
        let (_, mask) = s.render(1);
        // the sphere center projects inside the mask
        let cam = s.camera(1);
        let pc = cam.world_to_camera(s.sphere_center(1));
        let u = s.focal * pc[0] / pc[2] + 16.0;
        let v = s.focal * pc[1] / pc[2] + 16.0;
        assert!(mask.data[v as usize * 32 + u as usize]);
        assert!(mask.foreground_count() > 20 && mask.foreground_count() < 32 * 32 / 2);
    }

    #[test]
    fn flow_lands_on_the_same_surface_point() {
        let s = tiny();
        for f in 1..s.frames {
            let flow = s.flow(f).unwrap();
            let mut count = 0;
            for y in 0..32 {
                for x in 0..32 {
                    let p = y * 32 + x;
                    if !flow.valid[p] {
                        continue;
                    }
                    count += 1;
                    let here = s.shade(f, &s.cast(f, x as f64 + 0.5, y as f64 + 0.5));
                    let (u, v) = (x as f64 + 0.5 + flow.u[p], y as f64 + 0.5 + flow.v[p]);
                    let there = s.shade(f + 1, &s.cast(f + 1, u, v));
                    for c in 0..3 {
                        assert!((here[c] - there[c]).abs() < 1e-9, "frame {f} pixel ({x},{y})");
                    }
                }
            }
            assert!(count > 700, "frame {f}: {count} valid pixels");
        }
    }

    #[test]
    fn warped_frames_agree_on_valid_pixels() {
        let s = SyntheticScene::default();
        let video = s.video().unwrap();
        let flow = s.flow(10).unwrap();
        let (warped, valid) = backward_warp(video.frame(11), &flow).unwrap();
        let cur = video.frame(10);
        let (mut sum, mut n) = (0.0, 0);
        for (p, &ok) in valid.iter().enumerate() {
            if ok {
                n += 1;
                sum += (0..3).map(|c| (warped.data[p * 3 + c] - cur.data[p * 3 + c]).abs()).sum::<f64>() / 3.0;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 0.01, "mean abs {mean}");
        assert!(warp_ssim(&video.frames, &s.flows().unwrap()).unwrap() > 0.9);
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let s = SyntheticScene { sphere_end: SyntheticScene::default().sphere_start, camera_end: [-0.15, 0.0, 0.0], ..tiny() };
        let flow = s.flow(2).unwrap();
        assert!(flow.u.iter().chain(&flow.v).all(|v| v.abs() < 1e-9));
        assert!(flow.valid.iter().all(|&v| v));
    }

    #[test]
    fn surface_points_face_the_camera() {
        let s = tiny();
        let pts = s.surface_points(3, 200);
        assert!(pts.len() > 60 && pts.len() < 140);
        for p in &pts {
            assert!((math::distance(p.position, s.sphere_center(3)) - s.sphere_radius).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_schedule_always_succeeds() {
        let s = SyntheticScene::with_size(16, 16, 28);
        let video = s.video().unwrap();
        let mut provider = SyntheticProvider::new(s, FailureSchedule::new());
        let m = split_clips(&video, &mut provider, 10, 1).unwrap();
        let ranges: Vec<_> = m.clips.iter().map(|c| (c.first, c.last)).collect();
        assert_eq!(ranges, vec![(1, 10), (10, 19), (19, 28)]);
        assert_eq!(m.overlaps(), vec![1, 1]);
    }

    #[test]
    fn first_clip_grows_by_scripted_failures() {
        let s = SyntheticScene::with_size(16, 16, 40);
        let video = s.video().unwrap();
        let mut provider = SyntheticProvider::new(s, [(1, 7)].into_iter().collect());
        let m = split_clips(&video, &mut provider, 10, 1).unwrap();
        assert_eq!(m.clips[0].len(), 17);
    }

    #[test]
    fn out_of_range_request_is_rejected() {
        let s = SyntheticScene::with_size(16, 16, 5);
        let video = s.video().unwrap();
        let mut provider = SyntheticProvider::new(s, FailureSchedule::new());
        assert!(provider.reconstruct(&video, 3, 6).is_err());
        assert!(provider.reconstruct(&video, 0, 2).is_err());
    }

    #[test]
    fn short_video_is_one_clip() {
        let s = SyntheticScene::with_size(16, 16, 5);
        let video = s.video().unwrap();
        let mut provider = SyntheticProvider::new(s, FailureSchedule::new());
        let m = split_clips(&video, &mut provider, 10, 1).unwrap();
        assert_eq!(m.clip_sizes(), vec![5]);
    }

    #[test]
    fn failing_tail_merges_into_previous_clip() {
        let s = SyntheticScene::with_size(16, 16, 14);
        let video = s.video().unwrap();
        // clip 2 (frames 10..14) fails every attempt; the merge is ordinal 3
        let mut provider = SyntheticProvider::new(s, [(2, 100)].into_iter().collect());
        let m = split_clips(&video, &mut provider, 10, 1).unwrap();
        assert_eq!(m.clips.len(), 1);
        assert_eq!((m.clips[0].first, m.clips[0].last), (1, 14));
        assert_eq!(provider.calls.last(), Some(&(1, 14)));
    }

    #[test]
    fn failing_merge_is_an_error() {
        let s = SyntheticScene::with_size(16, 16, 14);
        let video = s.video().unwrap();
        let mut provider = SyntheticProvider::new(s, [(2, 100), (3, 1)].into_iter().collect());
        let err = split_clips(&video, &mut provider, 10, 1).unwrap_err();
        assert!(matches!(err, crate::Error::Decomposition { first: 1, last: 14, .. }), "{err}");
    }
}
