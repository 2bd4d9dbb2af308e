//! Dataset ingest, splitting, preprocessing and augmentation.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod synthetic;

pub use augment::{augment, augment_with, flip_horizontal, rotate, AugmentParams};
pub use dataset::{
    discover_series, make_batches, scan_dataset, series_slices, split_dataset, DatasetScan, Manifest, ManifestEntry,
    SeriesSample, SliceItem, Split,
};
pub use image::{decode_image, load_preprocessed, rescale, resize_bilinear, Gray8, ImageGrid};
