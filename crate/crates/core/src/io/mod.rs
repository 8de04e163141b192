//! File formats: NPY arrays, the JSON tensor manifest, PGM/CSV grids.

pub mod grid;
pub mod manifest;
pub mod npy;

pub use grid::{export_heatmap, load_mask, HeatmapFormat};
pub use manifest::{load_layers, load_manifest, load_tensor, save_tensor, Manifest, ManifestEntry, MatrixStats};
pub use npy::{load_array, save_array, Dtype, NpyArray};
