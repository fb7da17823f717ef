//! Middlebury `.flo` optical flow files: `PIEH`, width and height as
//! little-endian i32, then row-major interleaved little-endian f32 `(u, v)`.
//! Components above 1e9 in magnitude mark unknown flow.

use std::fs;
use std::path::Path;

use vidgs_core::loss::FlowField;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"PIEH";
const UNKNOWN: f32 = 1e10;

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let dim = |at: usize| i32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("bad flow size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("{}x{} flow needs {expected} bytes, file has {}", w, h, bytes.len())));
    }
    let mut flow = FlowField::zero(w, h);
    for (p, pair) in bytes[12..].chunks_exact(8).enumerate() {
        let u = f32::from_le_bytes(pair[0..4].try_into().expect("4 bytes"));
        let v = f32::from_le_bytes(pair[4..8].try_into().expect("4 bytes"));
        if u.abs() > 1e9 || v.abs() > 1e9 || !u.is_finite() || !v.is_finite() {
            flow.valid[p] = false;
        } else {
            flow.u[p] = f64::from(u);
            flow.v[p] = f64::from(v);
        }
    }
    Ok(flow)
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for p in 0..flow.u.len() {
        let (u, v) = if flow.valid[p] { (flow.u[p] as f32, flow.v[p] as f32) } else { (UNKNOWN, UNKNOWN) };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&fs::read(path).at(path)?, path)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow)).at(path)
}

/// Flow files of a directory in lexicographic order; flow `i` maps frame
/// `i` to frame `i + 1`.
pub fn read_flows(dir: &Path) -> Result<Vec<FlowField>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()).at(dir))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "flo"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_flo(p)).collect()
}

pub fn write_flows(dir: &Path, flows: &[FlowField]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, f) in flows.iter().enumerate() {
        write_flo(&dir.join(format!("{:05}.flo", i + 1)), f)?;
    }
    Ok(())
}
