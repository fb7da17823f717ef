//! Scene directories.
//!
//! ```text
//! manifest.txt          clip table, one "clip <j> <first> <last> <overlap> <sfm dir>" line per clip
//! config.txt            pipeline configuration snapshot
//! sfm/clip_<j>/         per-clip cameras and points (COLMAP text)
//! clip_<j>_frg.ply      foreground Gaussians
//! clip_<j>_bkg.ply      background Gaussians (absent for single-set models)
//! clip_<j>_deform.bin   deformation fields of the clip
//! alphas.bin            per-frame merge logits
//! ```
//!
//! Clip numbers in file names are 1-based. Binary sidecars start with an
//! 8-byte magic, a u32 version and the seed, all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use vidgs_core::decompose::{Clip, ClipManifest};
use vidgs_core::deform::{Aabb, DeformationField};
use vidgs_core::hashgrid::{HashConfig, HashEncoding};
use vidgs_core::mlp::Mlp;
use vidgs_core::train::{AlphaMap, ClipModel, Layer, SceneModel};
use vidgs_core::Role;

use crate::colmap::{parse_colmap_text, ColmapModel};
use crate::config::PipelineConfig;
use crate::error::{Error, IoContext, Result};
use crate::ply;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";
pub const ALPHAS: &str = "alphas.bin";
pub const DEFORM_MAGIC: &[u8; 8] = b"VGSDEFRM";
pub const ALPHA_MAGIC: &[u8; 8] = b"VGSALPHA";
pub const FORMAT_VERSION: u32 = 1;

pub fn frg_file(j: usize) -> String {
    format!("clip_{j}_frg.ply")
}

pub fn bkg_file(j: usize) -> String {
    format!("clip_{j}_bkg.ply")
}

pub fn deform_file(j: usize) -> String {
    format!("clip_{j}_deform.bin")
}

pub fn sfm_dir(j: usize) -> String {
    format!("sfm/clip_{j}")
}

// ---- manifest ----

/// Manifest text. SfM directories are relative to the manifest.
pub fn manifest_text(manifest: &ClipManifest, seed: u64) -> String {
    let mut s = String::from("# vidgs clip manifest\n# clip <j> <first> <last> <overlap_with_prev> <sfm_dir>\n");
    s.push_str(&format!("seed {seed}\nframes {}\nk {}\n", manifest.frame_count, manifest.k));
    for (i, c) in manifest.clips.iter().enumerate() {
        s.push_str(&format!("clip {} {} {} {} {}\n", i + 1, c.first, c.last, c.overlap_with_prev, sfm_dir(i + 1)));
    }
    s
}

/// Write the manifest and every clip's SfM output into `dir`.
pub fn write_manifest(dir: &Path, manifest: &ClipManifest, seed: u64, frame_ext: &str) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, c) in manifest.clips.iter().enumerate() {
        ColmapModel::from_sfm(&c.sfm, frame_ext).write(&dir.join(sfm_dir(i + 1)))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(manifest, seed)).at(&path)
}

pub struct ManifestFile {
    pub manifest: ClipManifest,
    pub seed: u64,
}

pub fn read_manifest(dir: &Path) -> Result<ManifestFile> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let bad = |line: usize, what: String| Error::format(&path, format!("line {line}: {what}"));
    let (mut seed, mut frames, mut k) = (None, None, None);
    let mut clips = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(i + 1, format!("malformed number {s:?}")));
        match parts.as_slice() {
            ["seed", v] => seed = Some(num(v)?),
            ["frames", v] => frames = Some(num(v)? as usize),
            ["k", v] => k = Some(num(v)? as usize),
            ["clip", j, first, last, overlap, sfm] => {
                if num(j)? as usize != clips.len() + 1 {
                    return Err(bad(i + 1, format!("clip {j} out of order")));
                }
                let sfm_path: PathBuf = dir.join(sfm);
                let sfm = parse_colmap_text(&sfm_path)?;
                clips.push(Clip {
                    first: num(first)? as usize,
                    last: num(last)? as usize,
                    overlap_with_prev: num(overlap)? as usize,
                    sfm,
                });
            }
            _ => return Err(bad(i + 1, format!("unrecognized line {line:?}"))),
        }
    }
    let missing = |what: &str| Error::format(&path, format!("no `{what}` line"));
    let manifest =
        ClipManifest { clips, k: k.ok_or_else(|| missing("k"))?, frame_count: frames.ok_or_else(|| missing("frames"))? };
    manifest.validate().at(&path)?;
    Ok(ManifestFile { manifest, seed: seed.ok_or_else(|| missing("seed"))? })
}

// ---- binary helpers ----

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 8], seed: u64) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(FORMAT_VERSION);
        w.u64(seed);
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks magic and version; returns the reader and the recorded seed.
    fn open(bytes: &'a [u8], path: &'a Path, magic: &[u8; 8]) -> Result<(Self, u64)> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::format(path, format!("bad magic (expected {:?})", String::from_utf8_lossy(magic))));
        }
        let mut r = Reader { bytes, at: 8, path };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let seed = r.u64()?;
        Ok((r, seed))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.at) / 8 {
            return Err(Error::format(self.path, format!("array of {n} values runs past the end of the file")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn finish(self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::format(self.path, format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

// ---- deformation fields ----

fn put_field(w: &mut Writer, field: &DeformationField) {
    let h = field.encoding.config();
    w.u64(field.clip_id as u64);
    w.u32(h.levels as u32);
    w.u32(h.features_per_level as u32);
    w.u32(h.log2_table_size);
    w.u32(h.base_resolution);
    w.f64(h.growth);
    for v in field.domain_box.min.iter().chain(&field.domain_box.max) {
        w.f64(*v);
    }
    let widths = field.mlp.widths();
    w.u32(widths.len() as u32);
    for &x in widths {
        w.u32(x as u32);
    }
    w.u8(field.mlp.zero_output() as u8);
    w.f64s(&field.encoding.tables);
    w.f64s(&field.mlp.params);
}

fn get_field(r: &mut Reader) -> Result<DeformationField> {
    let clip_id = r.u64()? as usize;
    let hash = HashConfig {
        levels: r.u32()? as usize,
        features_per_level: r.u32()? as usize,
        log2_table_size: r.u32()?,
        base_resolution: r.u32()?,
        growth: r.f64()?,
    };
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f64()?;
    }
    let domain_box = Aabb { min: [b[0], b[1], b[2]], max: [b[3], b[4], b[5]] };
    let n = r.u32()? as usize;
    let widths: Vec<usize> = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let zero_output = r.u8()? != 0;
    let mut encoding = HashEncoding::zeros(hash).at(r.path)?;
    let tables = r.f64s()?;
    if tables.len() != encoding.tables.len() {
        return Err(Error::format(r.path, format!("hash tables hold {} values, config needs {}", tables.len(), encoding.tables.len())));
    }
    encoding.tables = tables;
    let mlp = Mlp::from_params(&widths, r.f64s()?, zero_output).at(r.path)?;
    Ok(DeformationField { encoding, mlp, clip_id, domain_box })
}

/// Fields of one clip: foreground first, then the background if present.
pub fn encode_deform(fields: &[&DeformationField], seed: u64) -> Vec<u8> {
    let mut w = Writer::new(DEFORM_MAGIC, seed);
    w.u32(fields.len() as u32);
    for f in fields {
        put_field(&mut w, f);
    }
    w.0
}

pub fn decode_deform(bytes: &[u8], path: &Path) -> Result<(Vec<DeformationField>, u64)> {
    let (mut r, seed) = Reader::open(bytes, path, DEFORM_MAGIC)?;
    let n = r.u32()?;
    if !(1..=2).contains(&n) {
        return Err(Error::format(path, format!("{n} deformation fields, expected 1 or 2")));
    }
    let fields = (0..n).map(|_| get_field(&mut r)).collect::<Result<_>>()?;
    r.finish()?;
    Ok((fields, seed))
}

// ---- alpha maps ----

pub fn encode_alphas(alphas: &[AlphaMap], seed: u64) -> Vec<u8> {
    let mut w = Writer::new(ALPHA_MAGIC, seed);
    w.u64(alphas.len() as u64);
    for a in alphas {
        w.u64(a.frame_index as u64);
        w.u64(a.width as u64);
        w.u64(a.height as u64);
        w.f64s(&a.logits);
    }
    w.0
}

pub fn decode_alphas(bytes: &[u8], path: &Path) -> Result<(Vec<AlphaMap>, u64)> {
    let (mut r, seed) = Reader::open(bytes, path, ALPHA_MAGIC)?;
    let n = r.u64()?;
    let mut out = Vec::new();
    for i in 0..n {
        let frame_index = r.u64()? as usize;
        let width = r.u64()? as usize;
        let height = r.u64()? as usize;
        let logits = r.f64s()?;
        if frame_index != i as usize + 1 || logits.len() != width * height {
            return Err(Error::format(path, format!("alpha map {} is inconsistent", i + 1)));
        }
        out.push(AlphaMap { frame_index, width, height, logits });
    }
    r.finish()?;
    Ok((out, seed))
}

// ---- whole scenes ----

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).at(path)
}

/// Write every artifact of `scene` into `dir`, along with `config`.
pub fn save_scene(dir: &Path, scene: &SceneModel, config: &PipelineConfig) -> Result<()> {
    let seed = scene.config.seed;
    write_manifest(dir, &scene.manifest, seed, &config.frame_ext)?;
    write_file(&dir.join(CONFIG), config.serialize().as_bytes())?;
    let comment = |role: &str, j: usize| vec![format!("vidgs {role} clip {j}"), format!("seed {seed}")];
    for (i, clip) in scene.clips.iter().enumerate() {
        let j = i + 1;
        ply::write_ply(&dir.join(frg_file(j)), &clip.frg.set, &comment("frg", j))?;
        let mut fields = vec![&clip.frg.deform];
        let stale = dir.join(bkg_file(j));
        match &clip.bkg {
            Some(b) => {
                ply::write_ply(&stale, &b.set, &comment("bkg", j))?;
                fields.push(&b.deform);
            }
            None if stale.exists() => fs::remove_file(&stale).at(&stale)?,
            None => {}
        }
        write_file(&dir.join(deform_file(j)), &encode_deform(&fields, seed))?;
    }
    write_file(&dir.join(ALPHAS), &encode_alphas(&scene.alphas, seed))
}

pub fn read_config(dir: &Path) -> Result<PipelineConfig> {
    let path = dir.join(CONFIG);
    let text = fs::read_to_string(&path).at(&path)?;
    PipelineConfig::parse(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Load a scene directory. The training configuration is rebuilt from the
/// config snapshot.
pub fn load_scene(dir: &Path) -> Result<(SceneModel, PipelineConfig)> {
    let config = read_config(dir)?;
    let ManifestFile { manifest, seed } = read_manifest(dir)?;
    let check_seed = |path: &Path, s: u64| {
        if s != seed {
            return Err(Error::format(path, format!("seed {s} differs from the manifest's {seed}")));
        }
        Ok(())
    };
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for i in 0..manifest.clips.len() {
        let j = i + 1;
        let frg_set = ply::read_ply(&dir.join(frg_file(j)), Role::Frg, i)?;
        let bkg_path = dir.join(bkg_file(j));
        let bkg_set = if bkg_path.exists() { Some(ply::read_ply(&bkg_path, Role::Bkg, i)?) } else { None };
        let deform_path = dir.join(deform_file(j));
        let (mut fields, s) = decode_deform(&fs::read(&deform_path).at(&deform_path)?, &deform_path)?;
        check_seed(&deform_path, s)?;
        if fields.len() != 1 + bkg_set.is_some() as usize {
            return Err(Error::format(&deform_path, format!("{} fields for {} Gaussian sets", fields.len(), 1 + bkg_set.is_some() as usize)));
        }
        let bkg = bkg_set.map(|set| Layer { set, deform: fields.pop().expect("length checked") });
        let frg = Layer { set: frg_set, deform: fields.pop().expect("length checked") };
        clips.push(ClipModel { frg, bkg });
    }
    let alpha_path = dir.join(ALPHAS);
    let (alphas, s) = decode_alphas(&fs::read(&alpha_path).at(&alpha_path)?, &alpha_path)?;
    check_seed(&alpha_path, s)?;
    if alphas.len() != manifest.frame_count {
        return Err(Error::format(&alpha_path, format!("{} alpha maps for {} frames", alphas.len(), manifest.frame_count)));
    }
    let mut train = config.train_config();
    train.seed = seed;
    Ok((SceneModel { manifest, clips, alphas, config: train }, config))
}
