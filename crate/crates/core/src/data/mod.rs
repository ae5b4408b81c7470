//! Synthetic composed-retrieval dataset: rendered attribute scenes,
//! templated single-attribute edits, and the on-disk directory format.

mod dataset;
mod image;
mod scene;

pub use dataset::{
    fnv1a64, generate_dataset, load_dataset, parse_manifest, save_dataset, subset_group, Dataset, DatasetManifest, Edit, GalleryEntry, Split,
    SplitRatios, Splits, TripletRecord, Vocabulary, FORMAT_VERSION, MANIFEST_FILE,
};
pub use image::Image;
pub use scene::{
    background_rgb, color_rgb, foreground_mask, foreground_patches, render, Attribute, Background, Color, Position,
    SceneSpec, Shape, Size, MAX_RENDER_SIZE, MIN_RENDER_SIZE, SCENE_COUNT,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported manifest format_version {found} (supported: {supported})")]
    Version { found: u64, supported: u64 },
    #[error("checksum mismatch for {file}: manifest {expected}, file {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("infeasible request: {0}")]
    Infeasible(String),
    #[error("unsupported image size {0}")]
    UnsupportedSize(usize),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
