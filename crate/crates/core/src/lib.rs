//! Longitudinal structural-MRI volumetry.
//!
//! The crate covers the whole per-patient chain: NIfTI-1 ingestion,
//! multiplicative bias-field correction, threshold-based brain extraction,
//! rigid registration to the first visit, three-class HMRF-EM tissue
//! segmentation, tissue volumes in millilitres and a modified Mann-Kendall
//! trend test on each patient's volume series. Synthetic phantoms with exact
//! ground truth stand in for clinical scans in the test suites.
//!
//! The companion guide under `book/` walks through each stage; its code
//! listings are compiled and run as doctests of this crate.

pub mod bias;
pub mod error;
pub mod extract;
mod fsutil;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod rng;
pub mod segmentation;
pub mod stats;
pub mod trend;
pub mod volume;
pub mod volumetry;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
pub use volume::{BrainMask, Geometry, Volume3D};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/bias-field.md")]
    mod bias_field {}
    #[doc = include_str!("../../../book/src/brain-extraction.md")]
    mod brain_extraction {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/volumetry.md")]
    mod volumetry {}
    #[doc = include_str!("../../../book/src/trend.md")]
    mod trend {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
