use std::path::PathBuf;

use anyhow::{bail, Result};
use invi_core::metrics::{embedder_from_descriptor, evaluate, lpips_from_descriptor, MetricsReport};
use invi_core::pipeline::EditConfig;

use crate::io::{load_masks, read_video};

#[derive(Debug, Clone)]
pub struct EvalManifest {
    pub original: PathBuf,
    pub edited: PathBuf,
    /// Directory of background masks; nonzero pixels count towards Back-L1.
    pub mask: Option<PathBuf>,
    pub prompt: Option<String>,
    pub config: Option<PathBuf>,
}

pub fn eval_command(m: &EvalManifest) -> Result<MetricsReport> {
    let mut cfg = match &m.config {
        Some(p) => EditConfig::from_file(p)?,
        None => EditConfig::default(),
    };
    cfg.apply_process_env()?;
    let original = read_video(&m.original)?;
    let edited = read_video(&m.edited)?;
    if original.len() != edited.len() {
        bail!("original has {} frames, edited has {}", original.len(), edited.len());
    }
    if original[0].dimensions() != edited[0].dimensions() {
        bail!(
            "original frames are {:?}, edited frames are {:?}",
            original[0].dimensions(),
            edited[0].dimensions()
        );
    }
    let masks = m.mask.as_ref().map(|d| load_masks(d, original.len())).transpose()?;
    let embedder = embedder_from_descriptor(&cfg.embedder)?;
    let lpips = lpips_from_descriptor(&cfg.lpips_model)?;
    Ok(evaluate(
        Some(&original),
        &edited,
        masks.as_deref(),
        m.prompt.as_deref(),
        embedder.as_deref(),
        lpips.as_deref(),
    )?)
}
