//! Ventricle segmentation and cardiac-function quantification for
//! bright-field heart videos.
//!
//! The pipeline runs frame by frame: [`preprocess`] (crop, sharpen, CLAHE),
//! a [`segment::Segmenter`] backend (classical or a trained [`neural::UNet`]),
//! [`geometry`] on the largest connected component, and finally [`cardiac`]
//! indices (EF, FS, SV, HR) over the per-frame area series.
//!
//! [`synth`] renders beating-ventricle videos whose indices are known in
//! closed form, which is how the whole pipeline is validated.
//!
//! ```
//! use cardioquant::cardiac::{quantify, CardiacReport};
//! use cardioquant::geometry::AxisMethod;
//! use cardioquant::preprocess::PreprocessConfig;
//! use cardioquant::segment::Otsu;
//! use cardioquant::synth::{generate, SynthConfig};
//!
//! let (video, _masks, truth) = generate(&SynthConfig::default())?;
//! let report: CardiacReport = quantify(&video, &Otsu, &PreprocessConfig::default(), AxisMethod::Moments)?;
//! assert!((report.ef_area - truth.ef_pct).abs() < 15.0);
//! # Ok::<(), cardioquant::Error>(())
//! ```

pub mod cardiac;
pub mod classical;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod neural;
pub mod preprocess;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};
pub use imaging::{BinaryMask, GrayFrame, VideoSequence};

// Book chapters compile and run as doctests.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod book_pipeline {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/synthetic.md")]
mod book_synthetic {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/segmentation.md")]
mod book_segmentation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/unet.md")]
mod book_unet {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/indices.md")]
mod book_indices {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/validation.md")]
mod book_validation {}
