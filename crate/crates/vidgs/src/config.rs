//! Pipeline configuration: a flat `key = value` text file.
//!
//! Lines starting with `#` are comments. Every key has a default, so a
//! config file only lists what it changes; command-line overrides are
//! applied on top with the same key names.

use std::fmt;
use std::path::PathBuf;

use vidgs_core::decompose::BackgroundParams;
use vidgs_core::refine::RefineConfig;
use vidgs_core::train::{LearningRates, TrainConfig};
use vidgs_core::ShDegree;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderKind {
    /// Ground-truth cameras and points of the built-in synthetic scene.
    Synthetic,
    /// One COLMAP text model of the whole video, read from `sfm`.
    ColmapText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditorKind {
    SyntheticFlicker,
    /// External program run as `editor_command <input dir> <request file> <output dir>`.
    Command,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub frames: PathBuf,
    pub masks: PathBuf,
    pub flows: PathBuf,
    pub scene: PathBuf,
    /// Pre-edited frames for single-phase refinement; empty means use the editor.
    pub edits: PathBuf,
    /// Output of `render` and `refine`.
    pub out: PathBuf,
    pub provider: ProviderKind,
    pub sfm: PathBuf,
    pub class_label: String,
    pub k: usize,
    pub overlap: usize,
    pub n_bkg: usize,
    pub radius_mult: f64,
    pub sh_degree: u8,
    pub iterations: usize,
    /// Multiplies `iterations` (and `refine_iterations`).
    pub scale: f64,
    /// Multiplies every learning rate of stage 1.
    pub lr_scale: f64,
    pub refine_iterations: usize,
    pub refine_lr_scale: f64,
    pub train_alpha: bool,
    pub n_r: usize,
    pub guidance_scales: Vec<f64>,
    pub editor: EditorKind,
    pub editor_command: String,
    pub editor_steps: usize,
    pub prompt: String,
    pub edit_hue: f64,
    pub flicker: f64,
    pub seed: u64,
    pub lambda: f64,
    /// Worker threads; 1 runs everything on the calling thread, 0 uses all cores.
    pub threads: usize,
    pub frame_ext: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frames: "frames".into(),
            masks: "masks".into(),
            flows: "flows".into(),
            scene: "scene".into(),
            edits: PathBuf::new(),
            out: "out".into(),
            provider: ProviderKind::Synthetic,
            sfm: "sfm".into(),
            class_label: "object".into(),
            k: 10,
            overlap: 1,
            n_bkg: 60_000,
            radius_mult: 3.0,
            sh_degree: ShDegree::default().get(),
            iterations: 3000,
            scale: 1.0,
            lr_scale: 1.0,
            refine_iterations: 1000,
            refine_lr_scale: 1.0,
            train_alpha: true,
            n_r: 2,
            guidance_scales: vec![5.0, 7.5, 10.0],
            editor: EditorKind::SyntheticFlicker,
            editor_command: String::new(),
            editor_steps: 50,
            prompt: String::new(),
            edit_hue: 120.0,
            flicker: 0.05,
            seed: 0,
            lambda: 0.2,
            threads: 1,
            frame_ext: "png".into(),
        }
    }
}

pub const KEYS: [&str; 32] = [
    "frames",
    "masks",
    "flows",
    "scene",
    "edits",
    "out",
    "provider",
    "sfm",
    "class_label",
    "k",
    "overlap",
    "n_bkg",
    "radius_mult",
    "sh_degree",
    "iterations",
    "scale",
    "lr_scale",
    "refine_iterations",
    "refine_lr_scale",
    "train_alpha",
    "n_r",
    "guidance_scales",
    "editor",
    "editor_command",
    "editor_steps",
    "prompt",
    "edit_hue",
    "flicker",
    "seed",
    "lambda",
    "threads",
    "frame_ext",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::usage(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::usage(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl PipelineConfig {
    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "frames" => self.frames = v.into(),
            "masks" => self.masks = v.into(),
            "flows" => self.flows = v.into(),
            "scene" => self.scene = v.into(),
            "edits" => self.edits = v.into(),
            "out" => self.out = v.into(),
            "provider" => {
                self.provider = match v {
                    "synthetic" => ProviderKind::Synthetic,
                    "colmap-text" => ProviderKind::ColmapText,
                    _ => return Err(Error::usage(format!("provider: expected synthetic or colmap-text, got {v:?}"))),
                }
            }
            "sfm" => self.sfm = v.into(),
            "class_label" => self.class_label = v.into(),
            "k" => self.k = parse_num(key, v)?,
            "overlap" => self.overlap = parse_num(key, v)?,
            "n_bkg" => self.n_bkg = parse_num(key, v)?,
            "radius_mult" => self.radius_mult = parse_num(key, v)?,
            "sh_degree" => self.sh_degree = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "scale" => self.scale = parse_num(key, v)?,
            "lr_scale" => self.lr_scale = parse_num(key, v)?,
            "refine_iterations" => self.refine_iterations = parse_num(key, v)?,
            "refine_lr_scale" => self.refine_lr_scale = parse_num(key, v)?,
            "train_alpha" => self.train_alpha = parse_bool(key, v)?,
            "n_r" => self.n_r = parse_num(key, v)?,
            "guidance_scales" => {
                self.guidance_scales =
                    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?
            }
            "editor" => {
                self.editor = match v {
                    "synthetic-flicker" => EditorKind::SyntheticFlicker,
                    "command" => EditorKind::Command,
                    _ => return Err(Error::usage(format!("editor: expected synthetic-flicker or command, got {v:?}"))),
                }
            }
            "editor_command" => self.editor_command = v.into(),
            "editor_steps" => self.editor_steps = parse_num(key, v)?,
            "prompt" => self.prompt = v.into(),
            "edit_hue" => self.edit_hue = parse_num(key, v)?,
            "flicker" => self.flicker = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "frame_ext" => self.frame_ext = v.to_ascii_lowercase(),
            _ => return Err(Error::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one key, as [`serialize`](Self::serialize) writes it.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &PathBuf| p.to_string_lossy().into_owned();
        Some(match key {
            "frames" => path(&self.frames),
            "masks" => path(&self.masks),
            "flows" => path(&self.flows),
            "scene" => path(&self.scene),
            "edits" => path(&self.edits),
            "out" => path(&self.out),
            "provider" => match self.provider {
                ProviderKind::Synthetic => "synthetic".into(),
                ProviderKind::ColmapText => "colmap-text".into(),
            },
            "sfm" => path(&self.sfm),
            "class_label" => self.class_label.clone(),
            "k" => self.k.to_string(),
            "overlap" => self.overlap.to_string(),
            "n_bkg" => self.n_bkg.to_string(),
            "radius_mult" => self.radius_mult.to_string(),
            "sh_degree" => self.sh_degree.to_string(),
            "iterations" => self.iterations.to_string(),
            "scale" => self.scale.to_string(),
            "lr_scale" => self.lr_scale.to_string(),
            "refine_iterations" => self.refine_iterations.to_string(),
            "refine_lr_scale" => self.refine_lr_scale.to_string(),
            "train_alpha" => self.train_alpha.to_string(),
            "n_r" => self.n_r.to_string(),
            "guidance_scales" => self.guidance_scales.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "editor" => match self.editor {
                EditorKind::SyntheticFlicker => "synthetic-flicker".into(),
                EditorKind::Command => "command".into(),
            },
            "editor_command" => self.editor_command.clone(),
            "editor_steps" => self.editor_steps.to_string(),
            "prompt" => self.prompt.clone(),
            "edit_hue" => self.edit_hue.to_string(),
            "flicker" => self.flicker.to_string(),
            "seed" => self.seed.to_string(),
            "lambda" => self.lambda.to_string(),
            "threads" => self.threads.to_string(),
            "frame_ext" => self.frame_ext.clone(),
            _ => return None,
        })
    }

    /// Parse config text over the defaults. Errors name the line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::usage(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::usage(format!("line {}: key {key:?} given twice", i + 1)));
            }
            self.set(key, value).map_err(|e| Error::usage(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| Error::usage(format!("override {pair:?} is not key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        self.to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("overlap", self.overlap),
            ("n_bkg", self.n_bkg),
            ("iterations", self.iterations),
            ("refine_iterations", self.refine_iterations),
            ("n_r", self.n_r),
            ("editor_steps", self.editor_steps),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::usage(format!("{key} must be positive")));
            }
        }
        for (key, v) in [("scale", self.scale), ("lr_scale", self.lr_scale), ("refine_lr_scale", self.refine_lr_scale), ("radius_mult", self.radius_mult)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("{key} must be a positive number")));
            }
        }
        if self.overlap >= self.k {
            return Err(Error::usage("overlap must be smaller than k"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::usage("lambda must lie in [0, 1]"));
        }
        ShDegree::new(self.sh_degree).map_err(|e| Error::usage(format!("sh_degree: {e}")))?;
        if self.guidance_scales.is_empty() {
            return Err(Error::usage("guidance_scales needs at least one value"));
        }
        if !["png", "ppm"].contains(&self.frame_ext.as_str()) {
            return Err(Error::usage("frame_ext must be png or ppm"));
        }
        if self.editor == EditorKind::Command && self.editor_command.is_empty() {
            return Err(Error::usage("editor = command needs editor_command"));
        }
        Ok(())
    }

    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.scale).round() as usize).max(1)
    }

    /// Stage-1 iterations after `scale`.
    pub fn effective_iterations(&self) -> usize {
        self.scaled(self.iterations)
    }

    pub fn effective_refine_iterations(&self) -> usize {
        self.scaled(self.refine_iterations)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.effective_iterations(),
            lambda: self.lambda,
            seed: self.seed,
            lr: LearningRates::default().scaled(self.lr_scale),
            sh_degree: ShDegree::new(self.sh_degree).unwrap_or_default(),
            background: BackgroundParams { count: self.n_bkg, radius_mult: self.radius_mult, ..Default::default() },
            parallel: self.threads != 1,
            ..Default::default()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            iterations: self.effective_refine_iterations(),
            n_r: self.n_r,
            guidance_scales: Some(self.guidance_scales.clone()),
            train_alpha: self.train_alpha,
            lambda: self.lambda,
            lr: LearningRates::default().scaled(self.refine_lr_scale),
            seed: self.seed,
        }
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# vidgs pipeline configuration")?;
        for key in KEYS {
            writeln!(f, "{key} = {}", self.get(key).expect("listed keys are known"))?;
        }
        Ok(())
    }
}
