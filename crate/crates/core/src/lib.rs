//! Volumetric U-Net segmentation of uterine MRI: a small reverse-mode
//! autodiff engine, the network, losses, metrics, NIfTI I/O, synthetic
//! phantoms, training and sliding-window inference.

pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Case, LabelMap, Volume};
