//! Dataset ingestion, raster output, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
mod dataset;
pub mod idx;
pub mod pgm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{load_config, parse_config, render_config, ConfigError, RunConfig};
pub use dataset::{load_mnist, mnist_paths, ImageDataset, Split};
pub use idx::{parse_idx, serialize_idx, IdxArray, IdxError};
pub use pgm::{render_grid, Greymap, GridColumn, RenderError};
