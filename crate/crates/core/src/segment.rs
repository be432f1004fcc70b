//! Pluggable segmentation backends producing one ventricle mask per frame.

use rayon::prelude::*;

use crate::classical::{background_subtract, canny_edges, gmm_segment, kmeans_intensity, manual_threshold, otsu_threshold};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayFrame, VideoSequence};
use crate::neural::UNet;

pub trait Segmenter: Sync {
    /// One mask per frame, in frame order, each with the frame's dimensions.
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>>;
}

fn per_frame(seq: &VideoSequence, f: impl Fn(&GrayFrame) -> Result<BinaryMask> + Sync + Send) -> Result<Vec<BinaryMask>> {
    seq.frames().par_iter().map(f).collect()
}

/// Dark pixels (`<= threshold`) are ventricle.
pub struct Threshold(pub u8);

impl Segmenter for Threshold {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        per_frame(seq, |f| Ok(manual_threshold(f, self.0)))
    }
}

pub struct Otsu;

impl Segmenter for Otsu {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        per_frame(seq, |f| match otsu_threshold(f) {
            Ok((_, mask)) => Ok(mask),
            Err(Error::Degenerate(_)) => Ok(BinaryMask::empty(f.width(), f.height())),
            Err(e) => Err(e),
        })
    }
}

pub struct Canny {
    pub low: f64,
    pub high: f64,
}

impl Default for Canny {
    fn default() -> Self {
        Canny { low: 0.1, high: 0.3 }
    }
}

impl Segmenter for Canny {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        per_frame(seq, |f| canny_edges(f, self.low, self.high))
    }
}

pub struct BackgroundSubtraction {
    pub tau: f64,
}

impl Segmenter for BackgroundSubtraction {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        background_subtract(seq, self.tau)
    }
}

/// Darkest k-means intensity cluster.
pub struct KMeans {
    pub k: usize,
    pub seed: u64,
}

impl Segmenter for KMeans {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        per_frame(seq, |f| Ok(kmeans_intensity(f, self.k, self.seed)?.mask_of(0)))
    }
}

/// Darkest Gaussian-mixture component.
pub struct Gmm {
    pub k: usize,
    pub seed: u64,
}

impl Segmenter for Gmm {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        per_frame(seq, |f| Ok(gmm_segment(f, self.k, self.seed)?.mask_of(0)))
    }
}

pub struct UNetSegmenter {
    pub model: UNet<f32>,
}

impl Segmenter for UNetSegmenter {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        per_frame(seq, |f| self.model.predict_mask(f))
    }
}

/// Replays masks computed elsewhere, e.g. ground truth.
pub struct PrecomputedMasks {
    pub masks: Vec<BinaryMask>,
}

impl Segmenter for PrecomputedMasks {
    fn segment(&self, seq: &VideoSequence) -> Result<Vec<BinaryMask>> {
        if self.masks.len() != seq.len() {
            return Err(Error::invalid(format!(
                "{} precomputed masks for {} frames",
                self.masks.len(),
                seq.len()
            )));
        }
        Ok(self.masks.clone())
    }
}
