//! Image files, checkpoints and run configuration.

mod checkpoint;
mod config;
mod images;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use images::{load_image, quantize, save_heatmap, save_image};
