//! Gaussian sets as binary little-endian PLY with the usual splatting
//! property names: `x y z`, `f_dc_0..2`, `f_rest_*`, `opacity` (logit),
//! `scale_0..2` (log), `rot_0..3` (`w x y z`).
//!
//! Properties are written as `double` so that a load reproduces every
//! parameter bit for bit; `float` properties are accepted on read. `f_rest`
//! is channel-major: coefficient `k` of channel `c` is `f_rest_{c*(n-1)+k}`.

use std::fs;
use std::path::Path;

use vidgs_core::{Gaussian, GaussianSet, Role, ShDegree};

use crate::error::{Error, IoContext, Result};

fn property_names(coeffs: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|c| format!("f_dc_{c}")));
    names.extend((0..3 * (coeffs - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Encode with `comments` (one per line) placed in the header.
pub fn encode_ply(set: &GaussianSet, comments: &[String]) -> Vec<u8> {
    let coeffs = set.degree().coeff_count();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    for c in comments {
        header.push_str(&format!("comment {c}\n"));
    }
    header.push_str(&format!("element vertex {}\n", set.len()));
    for name in property_names(coeffs) {
        header.push_str(&format!("property double {name}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for g in set.gaussians() {
        let mut row: Vec<f64> = g.center.to_vec();
        row.extend(g.sh[0]);
        for c in 0..3 {
            row.extend(g.sh[1..].iter().map(|coef| coef[c]));
        }
        row.push(g.opacity_logit);
        row.extend(g.log_scale);
        row.extend(g.rotation);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
}

struct Header {
    count: usize,
    properties: Vec<(String, Scalar)>,
    comments: Vec<String>,
    body: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(path, "no end_header line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(path, "missing ply magic"));
    }
    let mut header = Header { count: 0, properties: Vec::new(), comments: Vec::new(), body: end + END.len() };
    let mut seen_vertex = false;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(Error::format(path, format!("unsupported PLY format {other}"))),
            ["comment", ..] => header.comments.push(line["comment".len()..].trim().to_string()),
            ["element", "vertex", n] => {
                header.count = n.parse().map_err(|_| Error::format(path, format!("bad vertex count {n:?}")))?;
                seen_vertex = true;
            }
            ["element", other, ..] => return Err(Error::format(path, format!("unexpected element {other}"))),
            ["property", ty, name] => {
                let scalar = match *ty {
                    "double" | "float64" => Scalar::F64,
                    "float" | "float32" => Scalar::F32,
                    _ => return Err(Error::format(path, format!("property {name} has unsupported type {ty}"))),
                };
                header.properties.push((name.to_string(), scalar));
            }
            [] => {}
            _ => return Err(Error::format(path, format!("unrecognized header line {line:?}"))),
        }
    }
    if !seen_vertex {
        return Err(Error::format(path, "no vertex element"));
    }
    Ok(header)
}

/// Header comments of a PLY file.
pub fn comments(bytes: &[u8], path: &Path) -> Result<Vec<String>> {
    Ok(parse_header(bytes, path)?.comments)
}

pub fn decode_ply(bytes: &[u8], path: &Path, role: Role, clip_id: usize) -> Result<GaussianSet> {
    let header = parse_header(bytes, path)?;
    let rest_count = header.properties.iter().filter(|(n, _)| n.starts_with("f_rest_")).count();
    if rest_count % 3 != 0 {
        return Err(Error::format(path, format!("{rest_count} f_rest properties is not a multiple of 3")));
    }
    let coeffs = rest_count / 3 + 1;
    let degree = ShDegree::from_coeff_count(coeffs).at(path)?;
    let names = property_names(coeffs);
    let column = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let columns: Vec<usize> = names
        .iter()
        .map(|n| column(n).ok_or_else(|| Error::format(path, format!("missing property {n}"))))
        .collect::<Result<_>>()?;
    let widths: Vec<usize> = header.properties.iter().map(|(_, s)| if *s == Scalar::F64 { 8 } else { 4 }).collect();
    let offsets: Vec<usize> = widths.iter().scan(0, |acc, w| Some(std::mem::replace(acc, *acc + w))).collect();
    let stride: usize = widths.iter().sum();
    let body = &bytes[header.body..];
    if body.len() != stride * header.count {
        return Err(Error::format(path, format!("{} vertices need {} bytes, body has {}", header.count, stride * header.count, body.len())));
    }
    let mut gaussians = Vec::with_capacity(header.count);
    for row in body.chunks_exact(stride.max(1)).take(header.count) {
        let value = |col: usize| -> f64 {
            let at = offsets[col];
            match header.properties[col].1 {
                Scalar::F64 => f64::from_le_bytes(row[at..at + 8].try_into().expect("8 bytes")),
                Scalar::F32 => f64::from(f32::from_le_bytes(row[at..at + 4].try_into().expect("4 bytes"))),
            }
        };
        let v: Vec<f64> = columns.iter().map(|&c| value(c)).collect();
        let mut sh = vec![[v[3], v[4], v[5]]; coeffs];
        for k in 1..coeffs {
            sh[k] = std::array::from_fn(|c| v[6 + c * (coeffs - 1) + (k - 1)]);
        }
        let base = 6 + 3 * (coeffs - 1);
        let mut g = Gaussian::isotropic([v[0], v[1], v[2]], 0.0, 0.5, [0.5; 3], degree);
        g.sh = sh;
        g.opacity_logit = v[base];
        g.log_scale = [v[base + 1], v[base + 2], v[base + 3]];
        g.rotation = [v[base + 4], v[base + 5], v[base + 6], v[base + 7]];
        gaussians.push(g);
    }
    GaussianSet::new(gaussians, role, clip_id).at(path)
}

pub fn write_ply(path: &Path, set: &GaussianSet, comments: &[String]) -> Result<()> {
    fs::write(path, encode_ply(set, comments)).at(path)
}

pub fn read_ply(path: &Path, role: Role, clip_id: usize) -> Result<GaussianSet> {
    decode_ply(&fs::read(path).at(path)?, path, role, clip_id)
}
