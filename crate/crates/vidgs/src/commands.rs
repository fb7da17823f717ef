//! The pipeline stages behind each subcommand. Every command reads its
//! inputs from the directories named in the configuration, overwrites its
//! outputs, and leaves a `config.txt` snapshot (which carries the seed)
//! next to them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use vidgs_core::decompose::{split_clips, summary, MaskedVideo, SfmProvider};
use vidgs_core::loss::{psnr, q_edit, ssim, warp_ssim, FlowField};
use vidgs_core::refine::{
    refine_recursive_ensembled, refine_single_phase, ColorStyle, EditBatch, EditorProvider, RefineReport, SyntheticFlickerEditor,
};
use vidgs_core::synthetic::{FailureSchedule, SyntheticProvider, SyntheticScene};
use vidgs_core::train::{reconstruct_video, train_scene, SceneModel};
use vidgs_core::Image;

use crate::colmap::ColmapTextProvider;
use crate::config::{EditorKind, PipelineConfig, ProviderKind};
use crate::editor::ProcessEditor;
use crate::error::{Error, IoContext, Result};
use crate::report::{write_metrics, write_trace, MetricRow, Scope};
use crate::scene_io::{load_scene, read_manifest, save_scene, write_manifest, CONFIG};
use crate::{flo, imageio};

fn require_dir(path: &Path, key: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::usage(format!("{key} directory {} does not exist", path.display())))
    }
}

fn write_config(dir: &Path, config: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let path = dir.join(CONFIG);
    fs::write(&path, config.serialize()).at(&path)
}

pub fn read_video(config: &PipelineConfig) -> Result<MaskedVideo> {
    require_dir(&config.frames, "frames")?;
    require_dir(&config.masks, "masks")?;
    let frames = imageio::read_frames(&config.frames)?;
    let masks = imageio::read_masks(&config.masks)?;
    MaskedVideo::new(frames, masks, config.class_label.clone()).at(&config.masks)
}

/// Write a synthetic fixture (frames, masks and ground-truth flows).
pub fn synth(config: &PipelineConfig, width: usize, height: usize, count: usize) -> Result<SyntheticScene> {
    let scene = SyntheticScene::with_size(width, height, count);
    let video = scene.video()?;
    imageio::write_frames(&config.frames, &video.frames, &config.frame_ext)?;
    imageio::write_masks(&config.masks, &video.masks, &config.frame_ext)?;
    flo::write_flows(&config.flows, &scene.flows()?)?;
    Ok(scene)
}

fn provider(config: &PipelineConfig, video: &MaskedVideo) -> Result<Box<dyn SfmProvider>> {
    Ok(match config.provider {
        ProviderKind::Synthetic => {
            let scene = SyntheticScene::with_size(video.width(), video.height(), video.len());
            Box::new(SyntheticProvider::new(scene, FailureSchedule::new()))
        }
        ProviderKind::ColmapText => {
            require_dir(&config.sfm, "sfm")?;
            Box::new(ColmapTextProvider::open(&config.sfm)?)
        }
    })
}

/// Split the video into clips and write the manifest with per-clip SfM.
pub fn decompose(config: &PipelineConfig) -> Result<String> {
    let video = read_video(config)?;
    let mut provider = provider(config, &video)?;
    let manifest = split_clips(&video, provider.as_mut(), config.k, config.overlap)?;
    write_manifest(&config.scene, &manifest, config.seed, &config.frame_ext)?;
    write_config(&config.scene, config)?;
    Ok(summary(&manifest))
}

pub fn trace_file(clip: usize) -> String {
    format!("clip_{clip}_trace.csv")
}

/// Train every clip of a decomposed scene and save the result.
pub fn reconstruct(config: &PipelineConfig) -> Result<SceneModel> {
    let video = read_video(config)?;
    require_dir(&config.scene, "scene")?;
    let manifest = read_manifest(&config.scene)?.manifest;
    let mut scene = SceneModel::initialize(manifest, &video, config.train_config())?;
    let reports = train_scene(&mut scene, &video)?;
    save_scene(&config.scene, &scene, config)?;
    for r in &reports {
        write_trace(&config.scene.join(trace_file(r.clip_id + 1)), &r.trace)?;
    }
    Ok(scene)
}

pub fn render(config: &PipelineConfig) -> Result<Vec<Image>> {
    require_dir(&config.scene, "scene")?;
    let (scene, _) = load_scene(&config.scene)?;
    let frames = reconstruct_video(&scene)?;
    imageio::write_frames(&config.out, &frames, &config.frame_ext)?;
    write_config(&config.out, config)?;
    Ok(frames)
}

fn editor(config: &PipelineConfig) -> Result<Box<dyn EditorProvider>> {
    Ok(match config.editor {
        EditorKind::SyntheticFlicker => {
            let mut e = SyntheticFlickerEditor::new(ColorStyle::hue(config.edit_hue), config.flicker, config.seed);
            e.scales = config.guidance_scales.clone();
            e.total_steps = config.editor_steps;
            Box::new(e)
        }
        EditorKind::Command => Box::new(ProcessEditor::new(
            &config.editor_command,
            config.out.join("editor"),
            config.guidance_scales.clone(),
            config.editor_steps,
        )?),
    })
}

pub struct RefineOutcome {
    pub frames: Vec<Image>,
    pub reports: Vec<RefineReport>,
}

impl RefineOutcome {
    /// Mean L1 between the refined render and the edits of the last phase.
    pub fn final_l1(&self) -> f64 {
        let l1 = &self.reports.last().expect("at least one phase").final_l1;
        l1.iter().sum::<f64>() / l1.len() as f64
    }
}

/// Refine a trained scene on given edits (one phase) or through the editor
/// (recursive, ensembled). Writes frames, traces and the refined scene to
/// `out`.
pub fn refine(config: &PipelineConfig) -> Result<RefineOutcome> {
    require_dir(&config.scene, "scene")?;
    let (mut scene, _) = load_scene(&config.scene)?;
    let refine = config.refine_config();
    let (frames, reports) = if config.edits.as_os_str().is_empty() {
        let mut editor = editor(config)?;
        let out = refine_recursive_ensembled(&mut scene, editor.as_mut(), &config.prompt, &refine)?;
        (out.frames, out.reports)
    } else {
        require_dir(&config.edits, "edits")?;
        let edits = imageio::read_frames(&config.edits)?;
        let (frames, report) = refine_single_phase(&mut scene, &EditBatch::single(edits), &refine).at(&config.edits)?;
        (frames, vec![report])
    };
    imageio::write_frames(&config.out, &frames, &config.frame_ext)?;
    for r in &reports {
        write_trace(&config.out.join(format!("refine_phase_{}_trace.csv", r.phase)), &r.trace)?;
    }
    save_scene(&config.out.join("scene"), &scene, config)?;
    write_config(&config.out, config)?;
    Ok(RefineOutcome { frames, reports })
}

pub struct MetricsRequest {
    pub pred: PathBuf,
    pub reference: PathBuf,
    /// Flows of the predicted video; WarpSSIM is skipped when absent.
    pub flows: Option<PathBuf>,
    pub clip_score: Option<f64>,
}

pub fn metrics(req: &MetricsRequest) -> Result<Vec<MetricRow>> {
    require_dir(&req.pred, "pred")?;
    require_dir(&req.reference, "reference")?;
    let pred = imageio::read_frames(&req.pred)?;
    let reference = imageio::read_frames(&req.reference)?;
    if pred.len() != reference.len() {
        return Err(Error::format(&req.pred, format!("{} frames, reference has {}", pred.len(), reference.len())));
    }
    let mut rows = Vec::new();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, (p, r)) in pred.iter().zip(&reference).enumerate() {
        let db = psnr(p, r, 1.0).at(&req.pred)?;
        let s = ssim(p, r).at(&req.pred)?;
        psnr_sum += db;
        ssim_sum += s;
        rows.push(MetricRow { scope: Scope::Frame(i + 1), metric: "psnr", value: db, unit: "dB" });
        rows.push(MetricRow { scope: Scope::Frame(i + 1), metric: "ssim", value: s, unit: "1" });
    }
    let n = pred.len() as f64;
    rows.push(MetricRow { scope: Scope::Video, metric: "psnr", value: psnr_sum / n, unit: "dB" });
    rows.push(MetricRow { scope: Scope::Video, metric: "ssim", value: ssim_sum / n, unit: "1" });
    let warp = match &req.flows {
        Some(dir) => {
            require_dir(dir, "flows")?;
            let flows: Vec<FlowField> = flo::read_flows(dir)?;
            let w = warp_ssim(&pred, &flows).at(dir)?;
            rows.push(MetricRow { scope: Scope::Video, metric: "warp_ssim", value: w, unit: "1" });
            Some(w)
        }
        None => None,
    };
    if let Some(score) = req.clip_score {
        let w = warp.ok_or_else(|| Error::usage("--clip-score needs flows for WarpSSIM"))?;
        rows.push(MetricRow { scope: Scope::Video, metric: "q_edit", value: q_edit(score, w), unit: "1" });
    }
    Ok(rows)
}

pub fn print_metrics(rows: &[MetricRow], output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => {
            let file = fs::File::create(path).at(path)?;
            write_metrics(file, rows).map_err(|e| Error::format(path, e.to_string()))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_metrics(&mut lock, rows).map_err(|e| Error::format("<stdout>", e.to_string()))?;
            lock.flush().at("<stdout>")
        }
    }
}
