//! Dataset ingestion, preprocessing, splits and the synthetic cohort.

pub mod image;
pub mod io;
pub mod manifest;
pub mod preprocess;
pub mod split;
pub mod synth;

pub use image::{BinaryMask, ImageTensor, MultiChannelImage, OutputRange, ValueRange};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, ImageRecord, Label, Split};
pub use preprocess::{
    apply_mask, denormalize, normalize, preprocess, resize, to_grayscale, PreprocessConfig,
};
pub use split::{build_split, cap_per_class, SplitSets};
pub use synth::{synth_generate, SyntheticConfig};
