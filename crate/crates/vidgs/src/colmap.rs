//! COLMAP sparse models in the text export format (`cameras.txt`,
//! `images.txt`, `points3D.txt`).
//!
//! Only the PINHOLE and SIMPLE_PINHOLE camera models are understood; any
//! other model yields an [`SfmStatus::Failure`] rather than an error, as does
//! a model without registered points. Image names must carry the 1-based
//! frame index as their numeric stem (`00012.png`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use vidgs_core::decompose::{MaskedVideo, SfmPoint, SfmProvider, SfmResult, SfmStatus};
use vidgs_core::{Camera, Intrinsics};

use crate::error::{Error, IoContext, Result};

pub const CAMERAS: &str = "cameras.txt";
pub const IMAGES: &str = "images.txt";
pub const POINTS: &str = "points3D.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum CameraModel {
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
    SimplePinhole { f: f64, cx: f64, cy: f64 },
    /// Any other model, kept by name so the failure can say which.
    Unsupported { name: String, params: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: CameraModel,
    pub width: usize,
    pub height: usize,
}

impl ColmapCamera {
    pub fn intrinsics(&self) -> Option<Intrinsics> {
        let (width, height) = (self.width, self.height);
        match self.model {
            CameraModel::Pinhole { fx, fy, cx, cy } => Some(Intrinsics { fx, fy, cx, cy, width, height }),
            CameraModel::SimplePinhole { f, cx, cy } => Some(Intrinsics { fx: f, fy: f, cx, cy, width, height }),
            CameraModel::Unsupported { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// `(w, x, y, z)`, world to camera.
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    /// `(x, y, point3d_id)`; `-1` marks an unmatched keypoint.
    pub points2d: Vec<(f64, f64, i64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub position: [f64; 3],
    pub color: [u8; 3],
    pub error: f64,
    /// `(image_id, point2d_index)`.
    pub track: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

/// Data lines (comments and blank lines dropped) with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    items: Vec<&'a str>,
    at: usize,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, line: usize, text: &'a str) -> Self {
        Self { path, line, items: text.split_whitespace().collect(), at: 0 }
    }

    fn err(&self, what: &str) -> Error {
        Error::format(self.path, format!("line {}: {what}", self.line))
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let Some(raw) = self.items.get(self.at) else {
            return Err(self.err(&format!("missing {what}")));
        };
        self.at += 1;
        raw.parse().map_err(|_| self.err(&format!("malformed {what} {raw:?}")))
    }

    fn rest(&self) -> usize {
        self.items.len() - self.at
    }
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<BTreeMap<u32, ColmapCamera>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        let mut f = Fields::new(path, line, l);
        let id: u32 = f.next("camera id")?;
        let name: String = f.next("camera model")?;
        let width = f.next("width")?;
        let height = f.next("height")?;
        let mut params = Vec::new();
        while f.rest() > 0 {
            params.push(f.next::<f64>("camera parameter")?);
        }
        let model = match (name.as_str(), params.as_slice()) {
            ("PINHOLE", &[fx, fy, cx, cy]) => CameraModel::Pinhole { fx, fy, cx, cy },
            ("SIMPLE_PINHOLE", &[f, cx, cy]) => CameraModel::SimplePinhole { f, cx, cy },
            ("PINHOLE", _) | ("SIMPLE_PINHOLE", _) => {
                return Err(f.err(&format!("{name} takes {} parameters, got {}", if name == "PINHOLE" { 4 } else { 3 }, params.len())));
            }
            _ => CameraModel::Unsupported { name, params },
        };
        if out.insert(id, ColmapCamera { id, model, width, height }).is_some() {
            return Err(f.err(&format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

pub fn parse_images(text: &str, path: &Path) -> Result<Vec<ColmapImage>> {
    // Each image spans two lines; the second (keypoints) may be empty, so
    // blank lines are significant here and only comments are skipped.
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.starts_with('#')).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (line, l) = lines[i];
        if l.is_empty() {
            i += 1;
            continue;
        }
        let mut f = Fields::new(path, line, l);
        let id = f.next("image id")?;
        let quaternion = [f.next("QW")?, f.next("QX")?, f.next("QY")?, f.next("QZ")?];
        let translation = [f.next("TX")?, f.next("TY")?, f.next("TZ")?];
        let camera_id = f.next("camera id")?;
        let name: String = f.next("image name")?;
        if f.rest() > 0 {
            return Err(f.err("trailing fields after image name"));
        }
        let mut points2d = Vec::new();
        if let Some(&(line2, l2)) = lines.get(i + 1) {
            let mut g = Fields::new(path, line2, l2);
            if g.rest() % 3 != 0 {
                return Err(g.err("keypoint list is not a multiple of (X, Y, POINT3D_ID)"));
            }
            while g.rest() > 0 {
                points2d.push((g.next("keypoint x")?, g.next("keypoint y")?, g.next("point3D id")?));
            }
        }
        out.push(ColmapImage { id, quaternion, translation, camera_id, name, points2d });
        i += 2;
    }
    Ok(out)
}

pub fn parse_points(text: &str, path: &Path) -> Result<Vec<ColmapPoint>> {
    let mut out = Vec::new();
    for (line, l) in data_lines(text) {
        let mut f = Fields::new(path, line, l);
        let id = f.next("point id")?;
        let position = [f.next("X")?, f.next("Y")?, f.next("Z")?];
        let color = [f.next("R")?, f.next("G")?, f.next("B")?];
        let error = f.next("error")?;
        if f.rest() % 2 != 0 {
            return Err(f.err("track is not a list of (IMAGE_ID, POINT2D_IDX) pairs"));
        }
        let mut track = Vec::new();
        while f.rest() > 0 {
            track.push((f.next("track image id")?, f.next("track keypoint index")?));
        }
        out.push(ColmapPoint { id, position, color, error, track });
    }
    Ok(out)
}

pub fn read_model(dir: &Path) -> Result<ColmapModel> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).at(&p).map(|t| (p, t))
    };
    let (cp, ct) = read(CAMERAS)?;
    let (ip, it) = read(IMAGES)?;
    let (pp, pt) = read(POINTS)?;
    Ok(ColmapModel { cameras: parse_cameras(&ct, &cp)?, images: parse_images(&it, &ip)?, points: parse_points(&pt, &pp)? })
}

/// Frame index encoded in an image name's numeric stem.
pub fn frame_of(name: &str) -> Option<usize> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    stem.parse().ok().filter(|&f| f > 0)
}

impl ColmapModel {
    /// Cameras and points restricted to frames `first..=last`; points count
    /// when their track touches the range (or when tracks are absent).
    pub fn to_sfm(&self, first: usize, last: usize, path: &Path) -> Result<SfmResult> {
        if let Some(c) = self.cameras.values().find(|c| c.intrinsics().is_none()) {
            let CameraModel::Unsupported { name, .. } = &c.model else { unreachable!() };
            return Ok(SfmResult::failure(format!("unsupported camera model {name}")));
        }
        let mut by_frame = BTreeMap::new();
        for img in &self.images {
            let frame = frame_of(&img.name)
                .ok_or_else(|| Error::format(path.join(IMAGES), format!("image name {:?} has no frame number", img.name)))?;
            if (first..=last).contains(&frame) && by_frame.insert(frame, img).is_some() {
                return Err(Error::format(path.join(IMAGES), format!("frame {frame} registered twice")));
            }
        }
        let missing: Vec<usize> = (first..=last).filter(|f| !by_frame.contains_key(f)).collect();
        if !missing.is_empty() {
            return Ok(SfmResult::failure(format!("frames {missing:?} not registered")));
        }
        let mut cameras = Vec::with_capacity(by_frame.len());
        for (&frame, img) in &by_frame {
            let cam = self.cameras.get(&img.camera_id).ok_or_else(|| {
                Error::format(path.join(IMAGES), format!("image {} uses unknown camera {}", img.id, img.camera_id))
            })?;
            let k = cam.intrinsics().expect("models checked above");
            cameras.push(Camera::from_quaternion(k, img.quaternion, img.translation, frame).at(path.join(IMAGES))?);
        }
        let ids: Vec<u32> = by_frame.values().map(|i| i.id).collect();
        let points: Vec<SfmPoint> = self
            .points
            .iter()
            .filter(|p| p.track.is_empty() || p.track.iter().any(|(im, _)| ids.contains(im)))
            .map(|p| SfmPoint { position: p.position, color: p.color })
            .collect();
        if points.is_empty() {
            return Ok(SfmResult::failure("no points registered"));
        }
        Ok(SfmResult { points, cameras, status: SfmStatus::Success })
    }

    /// Model holding one PINHOLE camera per image, as written for a clip.
    pub fn from_sfm(sfm: &SfmResult, ext: &str) -> Self {
        let mut model = Self::default();
        for (k, cam) in sfm.cameras.iter().enumerate() {
            let id = k as u32 + 1;
            let i = cam.intrinsics;
            let params = CameraModel::Pinhole { fx: i.fx, fy: i.fy, cx: i.cx, cy: i.cy };
            model.cameras.insert(id, ColmapCamera { id, model: params, width: i.width, height: i.height });
            model.images.push(ColmapImage {
                id,
                quaternion: cam.quaternion,
                translation: cam.translation,
                camera_id: id,
                name: crate::imageio::frame_name(cam.frame_index, ext),
                points2d: Vec::new(),
            });
        }
        model.points = sfm
            .points
            .iter()
            .enumerate()
            .map(|(k, p)| ColmapPoint { id: k as u64 + 1, position: p.position, color: p.color, error: 0.0, track: Vec::new() })
            .collect();
        model
    }

    pub fn cameras_text(&self) -> String {
        let mut s = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        for c in self.cameras.values() {
            let (name, params) = match &c.model {
                CameraModel::Pinhole { fx, fy, cx, cy } => ("PINHOLE", vec![*fx, *fy, *cx, *cy]),
                CameraModel::SimplePinhole { f, cx, cy } => ("SIMPLE_PINHOLE", vec![*f, *cx, *cy]),
                CameraModel::Unsupported { name, params } => (name.as_str(), params.clone()),
            };
            let _ = write!(s, "{} {name} {} {}", c.id, c.width, c.height);
            for p in params {
                let _ = write!(s, " {p:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn images_text(&self) -> String {
        let mut s = String::from(
            "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
        );
        for im in &self.images {
            let [qw, qx, qy, qz] = im.quaternion;
            let [tx, ty, tz] = im.translation;
            let _ = writeln!(s, "{} {qw:?} {qx:?} {qy:?} {qz:?} {tx:?} {ty:?} {tz:?} {} {}", im.id, im.camera_id, im.name);
            let kp: Vec<String> = im.points2d.iter().map(|(x, y, p)| format!("{x:?} {y:?} {p}")).collect();
            s.push_str(&kp.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn points_text(&self) -> String {
        let mut s = String::from(
            "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
        );
        for p in &self.points {
            let [x, y, z] = p.position;
            let [r, g, b] = p.color;
            let _ = write!(s, "{} {x:?} {y:?} {z:?} {r} {g} {b} {:?}", p.id, p.error);
            for (im, idx) in &p.track {
                let _ = write!(s, " {im} {idx}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        for (name, text) in [(CAMERAS, self.cameras_text()), (IMAGES, self.images_text()), (POINTS, self.points_text())] {
            let p = dir.join(name);
            fs::write(&p, text).at(&p)?;
        }
        Ok(())
    }
}

/// Parse a COLMAP text directory into an [`SfmResult`] covering every
/// registered image.
pub fn parse_colmap_text(dir: &Path) -> Result<SfmResult> {
    let model = read_model(dir)?;
    let frames: Vec<usize> = model.images.iter().filter_map(|i| frame_of(&i.name)).collect();
    let (Some(&first), Some(&last)) = (frames.iter().min(), frames.iter().max()) else {
        if let Some(c) = model.cameras.values().find(|c| c.intrinsics().is_none()) {
            let CameraModel::Unsupported { name, .. } = &c.model else { unreachable!() };
            return Ok(SfmResult::failure(format!("unsupported camera model {name}")));
        }
        return Ok(SfmResult::failure("no images registered"));
    };
    model.to_sfm(first, last, dir)
}

/// Serves frame ranges out of one COLMAP model of the whole video.
pub struct ColmapTextProvider {
    pub model: ColmapModel,
    pub dir: std::path::PathBuf,
}

impl ColmapTextProvider {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self { model: read_model(dir)?, dir: dir.to_path_buf() })
    }
}

impl SfmProvider for ColmapTextProvider {
    fn reconstruct(&mut self, video: &MaskedVideo, first: usize, last: usize) -> vidgs_core::Result<SfmResult> {
        if first == 0 || first > last || last > video.len() {
            return Err(vidgs_core::Error::Precondition(format!("frame range {first}..={last} outside 1..={}", video.len())));
        }
        self.model.to_sfm(first, last, &self.dir).map_err(|e| vidgs_core::Error::Invalid(e.to_string()))
    }
}
