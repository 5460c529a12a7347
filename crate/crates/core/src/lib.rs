//! Segmentation of extremely imbalanced 3D volumes with loss ensembles.
//!
//! The pipeline: synthetic case generation, preprocessing (crop, resample,
//! z-score), a small 3D U-Net trained with compound Dice losses over five
//! cross-validation folds, best-per-fold model selection, Gaussian-weighted
//! sliding-window ensemble inference, small-component removal, and the
//! DSC / HD95 / volumetric-similarity metrics.
//!
//! All volumes are stored x-fastest: the voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

pub mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nifti;
pub mod postprocess;
pub mod preprocess;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BoundingBox, Dims, LabelMask, Spacing, Volume};
