//! Datasets, latent sampling, checkpoints and image export.

mod checkpoint;
mod dataset;
mod export;
mod idx;
mod latent;
mod synth;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use dataset::{BatchSampler, Dataset};
pub use export::{export_grid, tile, to_byte, Grid, GRID_GAP};
pub use idx::{
    dataset_from_idx, dataset_to_idx, encode_idx_images, encode_idx_labels, load_idx,
    parse_idx_images, parse_idx_labels, resize_bilinear, write_idx, IdxImages, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use latent::{LatentSampler, SeededRng};
pub use synth::{synth_shapes, SHAPE_CLASSES};
