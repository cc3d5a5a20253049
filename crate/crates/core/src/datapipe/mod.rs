//! Volume I/O, preprocessing, augmentation, patch sampling, domain
//! scheduling and synthetic data.

mod augment;
mod manifest;
mod patch;
mod pool;
mod preprocess;
mod synth;
mod volume;

pub use augment::{augment, mirror_axes, AugmentConfig};
pub use manifest::{Case, CropBox, DatasetManifest, Split};
pub use patch::{extract, pad_to, round_robin, sample_patch};
pub use pool::{num_workers, par_map, WORKERS_ENV};
pub use preprocess::{
    crop_nonzero, median_extent, median_spacing, normalize_intensity, percentile, plan_patch, preprocess_case,
    preprocess_dataset, resample, resampled_extent, resize, CaseReport, PatchPlan, Processed, PATCH_VOXEL_BUDGET,
};
pub use synth::{synth_case, synth_generate, Shape, SynthConfig};
pub use volume::{
    decode_volume, encode_volume, read_label, read_volume, write_volume, Volume, VolumeKind, VOLUME_MAGIC,
};
