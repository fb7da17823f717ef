use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vidgs::commands::{self, MetricsRequest};
use vidgs::error::EXIT_USAGE;
use vidgs::{Error, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "vidgs", version, about = "Video Gaussian splatting: decompose, reconstruct, render, refine")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(flatten)]
    keys: KeyFlags,
    #[command(subcommand)]
    command: Command,
}

/// Shortcuts for common configuration keys.
#[derive(Args)]
struct KeyFlags {
    #[arg(long, global = true)]
    frames: Option<String>,
    #[arg(long, global = true)]
    masks: Option<String>,
    #[arg(long, global = true)]
    flows: Option<String>,
    #[arg(long, global = true)]
    scene: Option<String>,
    #[arg(long, global = true)]
    edits: Option<String>,
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    provider: Option<String>,
    #[arg(long, global = true)]
    sfm: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<String>,
    /// Multiplies the iteration counts.
    #[arg(long, global = true)]
    scale: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    threads: Option<String>,
}

impl KeyFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("frames", &self.frames),
            ("masks", &self.masks),
            ("flows", &self.flows),
            ("scene", &self.scene),
            ("edits", &self.edits),
            ("out", &self.out),
            ("provider", &self.provider),
            ("sfm", &self.sfm),
            ("iterations", &self.iterations),
            ("scale", &self.scale),
            ("seed", &self.seed),
            ("threads", &self.threads),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic fixture: frames, masks and ground-truth flows.
    Synth {
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 30)]
        count: usize,
    },
    /// Split the video into clips with per-clip structure from motion.
    Decompose,
    /// Train the foreground and background Gaussians of every clip.
    Reconstruct,
    /// Render the reconstructed video into `out`.
    Render,
    /// Refine a reconstruction on edited frames.
    Refine,
    /// PSNR and SSIM per frame, WarpSSIM and edit quality per video, as CSV.
    Metrics {
        /// Frames to score (defaults to `out`).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Reference frames (defaults to `frames`).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Text-video CLIP score; enables the edit quality row.
        #[arg(long)]
        clip_score: Option<f64>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text)?;
    }
    for (key, value) in cli.keys.pairs() {
        config.set(key, value)?;
    }
    config.apply_overrides(cli.set.iter().map(String::as_str))?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build_global()
        .map_err(|e| Error::usage(format!("threads: {e}")))?;
    match cli.command {
        Command::Synth { width, height, count } => {
            commands::synth(&config, width, height, count)?;
            println!("wrote {count} frames of {width}x{height} to {}", config.frames.display());
        }
        Command::Decompose => println!("{}", commands::decompose(&config)?),
        Command::Reconstruct => {
            let scene = commands::reconstruct(&config)?;
            println!("trained {} clips, {} Gaussians, saved to {}", scene.clips.len(), scene.gaussian_count(), config.scene.display());
        }
        Command::Render => {
            let frames = commands::render(&config)?;
            println!("rendered {} frames to {}", frames.len(), config.out.display());
        }
        Command::Refine => {
            let outcome = commands::refine(&config)?;
            println!(
                "refined {} frames in {} phase(s), final L1 {:.6}, written to {}",
                outcome.frames.len(),
                outcome.reports.len(),
                outcome.final_l1(),
                config.out.display()
            );
        }
        Command::Metrics { pred, reference, clip_score, output } => {
            let flows = config.flows.is_dir().then(|| config.flows.clone());
            let req = MetricsRequest {
                pred: pred.unwrap_or_else(|| config.out.clone()),
                reference: reference.unwrap_or_else(|| config.frames.clone()),
                flows,
                clip_score,
            };
            let rows = commands::metrics(&req)?;
            commands::print_metrics(&rows, output.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vidgs: {e}");
            e.to_exit()
        }
    }
}
