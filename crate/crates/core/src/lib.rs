//! Video object insertion by per-frame inpainting with an anchor-frame
//! attention cache.

pub mod attention;
pub mod denoiser;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod raster;
pub mod roi;
pub mod scheduler;
pub mod vae;
