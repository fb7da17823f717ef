//! File formats, image IO, configuration and the pipeline stages of the
//! `vidgs` command line, on top of [`vidgs_core`].

pub mod colmap;
pub mod commands;
pub mod config;
pub mod editor;
pub mod error;
pub mod flo;
pub mod imageio;
pub mod ply;
pub mod report;
pub mod scene_io;

pub use config::PipelineConfig;
pub use error::{Error, Result};
