//! Video editors behind a process boundary.
//!
//! Each request gets a work directory holding `input/` (the frames to edit),
//! `request.txt` and an empty `output/`. The editor program is invoked as
//! `<command...> <input dir> <request file> <output dir>` and must write one
//! edited frame per input frame into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use vidgs_core::refine::{EditRequest, EditorProvider};
use vidgs_core::Image;

use crate::error::{Error, IoContext, Result};
use crate::imageio;

pub const REQUEST: &str = "request.txt";

pub fn request_text(req: &EditRequest) -> String {
    format!(
        "prompt = {}\nsteps = {}\nguidance_scale = {}\nseed = {}\nphase = {}\n",
        req.prompt.replace('\n', " "),
        req.steps,
        req.guidance_scale,
        req.seed,
        req.phase
    )
}

pub fn parse_request(text: &str, path: &Path) -> Result<EditRequest> {
    let mut req = EditRequest { prompt: String::new(), steps: 0, guidance_scale: 0.0, seed: 0, phase: 1 };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: malformed {line:?}", i + 1));
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        let v = v.trim();
        match k.trim() {
            "prompt" => req.prompt = v.to_string(),
            "steps" => req.steps = v.parse().map_err(|_| bad())?,
            "guidance_scale" => req.guidance_scale = v.parse().map_err(|_| bad())?,
            "seed" => req.seed = v.parse().map_err(|_| bad())?,
            "phase" => req.phase = v.parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    Ok(req)
}

pub struct ProcessEditor {
    pub program: String,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
    pub scales: Vec<f64>,
    pub total_steps: usize,
}

impl ProcessEditor {
    /// `command` is split on whitespace into program and leading arguments.
    pub fn new(command: &str, work_dir: PathBuf, scales: Vec<f64>, total_steps: usize) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| Error::usage("empty editor command"))?;
        Ok(Self { program, args: parts.collect(), work_dir, scales, total_steps })
    }

    fn run(&self, frames: &[Image], req: &EditRequest) -> Result<Vec<Image>> {
        let dir = self.work_dir.join(format!("phase_{}_scale_{}", req.phase, req.guidance_scale));
        if dir.exists() {
            fs::remove_dir_all(&dir).at(&dir)?;
        }
        let (input, output) = (dir.join("input"), dir.join("output"));
        imageio::write_frames(&input, frames, "png")?;
        fs::create_dir_all(&output).at(&output)?;
        let request = dir.join(REQUEST);
        fs::write(&request, request_text(req)).at(&request)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&request)
            .arg(&output)
            .status()
            .at(&self.program)?;
        if !status.success() {
            return Err(Error::format(&output, format!("editor {:?} exited with {status}", self.program)));
        }
        let edited = imageio::read_frames(&output)?;
        if edited.len() != frames.len() {
            return Err(Error::format(&output, format!("editor returned {} frames for {}", edited.len(), frames.len())));
        }
        Ok(edited)
    }
}

impl EditorProvider for ProcessEditor {
    fn guidance_scales(&self) -> Vec<f64> {
        self.scales.clone()
    }

    fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn edit(&mut self, frames: &[Image], request: &EditRequest) -> vidgs_core::Result<Vec<Image>> {
        self.run(frames, request).map_err(|e| vidgs_core::Error::Editor { phase: request.phase, reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let req = EditRequest { prompt: "van gogh style".into(), steps: 25, guidance_scale: 7.5, seed: 3, phase: 2 };
        assert_eq!(parse_request(&request_text(&req), Path::new("r.txt")).unwrap(), req);
        assert!(parse_request("steps = many", Path::new("r.txt")).is_err());
    }
}
