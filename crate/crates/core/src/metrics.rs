//! Segmentation losses and evaluation metrics, plus absolute-error statistics.

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

/// Clamp applied to predicted probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Predicted foreground probabilities, row-major, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != width * height {
            return Err(Error::invalid("probability buffer size does not match dimensions"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(ProbMap { width, height, probs })
    }

    /// Hard 0/1 probabilities from a mask.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        ProbMap {
            width: mask.width(),
            height: mask.height(),
            probs: mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Foreground iff `p > threshold` (strict).
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask::new(self.width, self.height, self.probs.iter().map(|&p| p > threshold).collect())
            .expect("dimensions match")
    }
}

fn check_dims(truth: &BinaryMask, pred: &ProbMap) -> Result<()> {
    if truth.dims() != pred.dims() {
        return Err(Error::DimensionMismatch {
            expected: truth.dims(),
            actual: pred.dims(),
        });
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
pub fn bce_loss(truth: &BinaryMask, pred: &ProbMap) -> Result<f64> {
    check_dims(truth, pred)?;
    let n = truth.bits().len().max(1) as f64;
    let sum: f64 = truth
        .bits()
        .iter()
        .zip(pred.probs())
        .map(|(&y, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / n)
}

/// Smoothed soft Dice loss `1 − (2Σyŷ + 1)/(Σy + Σŷ + 1)`.
pub fn dice_loss(truth: &BinaryMask, pred: &ProbMap) -> Result<f64> {
    check_dims(truth, pred)?;
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (&y, &p) in truth.bits().iter().zip(pred.probs()) {
        let y = if y { 1.0 } else { 0.0 };
        inter += y * p;
        sy += y;
        sp += p;
    }
    Ok(1.0 - (2.0 * inter + 1.0) / (sy + sp + 1.0))
}

pub fn pixel_accuracy(truth: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    truth.check_same_dims(pred)?;
    let n = truth.bits().len();
    if n == 0 {
        return Ok(1.0);
    }
    let hits = truth.bits().iter().zip(pred.bits()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / n as f64)
}

/// An overlap score; `both_empty` marks the 0/0 case scored as 1.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub value: f64,
    pub both_empty: bool,
}

fn counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    a.check_same_dims(b)?;
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    Ok((inter, na, nb))
}

/// `2|A∩B| / (|A| + |B|)`, unsmoothed. Two empty masks score 1.0 (flagged).
pub fn dice_coefficient(a: &BinaryMask, b: &BinaryMask) -> Result<Overlap> {
    let (inter, na, nb) = counts(a, b)?;
    if na + nb == 0 {
        return Ok(Overlap { value: 1.0, both_empty: true });
    }
    Ok(Overlap {
        value: 2.0 * inter as f64 / (na + nb) as f64,
        both_empty: false,
    })
}

/// `|A∩B| / |A∪B|`. Two empty masks score 1.0 (flagged).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<Overlap> {
    let (inter, na, nb) = counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(Overlap { value: 1.0, both_empty: true });
    }
    Ok(Overlap {
        value: inter as f64 / union as f64,
        both_empty: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean_abs_error: f64,
    pub std_abs_error: f64,
    pub n: usize,
}

/// Mean and population standard deviation of `|manual_i − auto_i|`.
pub fn error_stats(manual: &[f64], auto: &[f64]) -> Result<ErrorStats> {
    if manual.len() != auto.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} manual vs {} automatic values",
            manual.len(),
            auto.len()
        )));
    }
    if manual.is_empty() {
        return Err(Error::invalid("error statistics need at least one pair"));
    }
    let errs: Vec<f64> = manual.iter().zip(auto).map(|(m, a)| (m - a).abs()).collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(ErrorStats {
        mean_abs_error: mean,
        std_abs_error: var.sqrt(),
        n: errs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[bool]) -> BinaryMask {
        BinaryMask::new(bits.len(), 1, bits.to_vec()).unwrap()
    }

    fn probs(p: &[f64]) -> ProbMap {
        ProbMap::new(p.len(), 1, p.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        let t = mask(&[true, false, true]);
        assert!(bce_loss(&t, &ProbMap::from_mask(&t)).unwrap() <= 1e-6);
        let half = bce_loss(&mask(&[true; 4]), &probs(&[0.5; 4])).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let p = [0.2, 0.9, 0.6];
        let a = bce_loss(&t, &probs(&p)).unwrap();
        let b = bce_loss(&t.complement(), &probs(&p.map(|v| 1.0 - v))).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(bce_loss(&t, &probs(&[0.5; 2])).is_err());
    }

    #[test]
    fn dice_loss_examples() {
        assert_eq!(dice_loss(&mask(&[false; 3]), &probs(&[0.0; 3])).unwrap(), 0.0);
        assert_eq!(dice_loss(&mask(&[true]), &probs(&[1.0])).unwrap(), 0.0);
        assert_eq!(dice_loss(&mask(&[true]), &probs(&[0.0])).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_examples() {
        let a = mask(&[true, false, true, true]);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &a.complement()).unwrap(), 0.0);
        let mut truth = vec![false; 100];
        truth[..10].iter_mut().for_each(|b| *b = true);
        assert!((pixel_accuracy(&mask(&truth), &mask(&[false; 100])).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn overlap_examples() {
        let a = mask(&[true, true, false]);
        assert_eq!(dice_coefficient(&a, &a).unwrap().value, 1.0);
        assert_eq!(iou(&a, &a).unwrap().value, 1.0);

        let mut x = vec![false; 150];
        let mut y = vec![false; 150];
        x[..100].iter_mut().for_each(|b| *b = true);
        y[50..].iter_mut().for_each(|b| *b = true);
        assert_eq!(dice_coefficient(&mask(&x), &mask(&y)).unwrap().value, 0.5);

        let d = iou(&mask(&[true, false]), &mask(&[false, true])).unwrap();
        assert_eq!(d.value, 0.0);
        let e = dice_coefficient(&mask(&[false; 4]), &mask(&[false; 4])).unwrap();
        assert_eq!(e, Overlap { value: 1.0, both_empty: true });
        assert!(iou(&mask(&[false; 4]), &mask(&[false; 4])).unwrap().both_empty);
    }

    #[test]
    fn error_stats_examples() {
        let s = error_stats(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((s.mean_abs_error, s.std_abs_error), (0.0, 0.0));
        let s = error_stats(&[50.0, 60.0], &[48.0, 64.0]).unwrap();
        assert_eq!((s.mean_abs_error, s.std_abs_error, s.n), (3.0, 1.0, 2));
        assert!(error_stats(&[1.0], &[]).is_err());
        assert!(error_stats(&[], &[]).is_err());
    }

    fn bits_strategy() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
        (1usize..64).prop_flat_map(|n| (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)))
    }

    proptest! {
        #[test]
        fn iou_dice_identity_and_symmetry((a, b) in bits_strategy()) {
            let (a, b) = (mask(&a), mask(&b));
            let d = dice_coefficient(&a, &b).unwrap();
            let j = iou(&a, &b).unwrap();
            prop_assert_eq!(d, dice_coefficient(&b, &a).unwrap());
            prop_assert_eq!(j, iou(&b, &a).unwrap());
            if !d.both_empty {
                prop_assert!((j.value - d.value / (2.0 - d.value)).abs() < 1e-12);
            }
        }

        #[test]
        fn hard_dice_loss_is_smoothed_dice((a, b) in bits_strategy()) {
            let (t, p) = (mask(&a), mask(&b));
            let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
            let smoothed = (2.0 * inter + 1.0) / (t.count() as f64 + p.count() as f64 + 1.0);
            let loss = dice_loss(&t, &ProbMap::from_mask(&p)).unwrap();
            prop_assert!((loss - (1.0 - smoothed)).abs() < 1e-12);
        }

        #[test]
        fn bce_is_nonnegative((a, _) in bits_strategy(), seed in any::<u64>()) {
            let mut s = seed;
            let p: Vec<f64> = a.iter().map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 11) as f64 / (1u64 << 53) as f64
            }).collect();
            prop_assert!(bce_loss(&mask(&a), &probs(&p)).unwrap() >= 0.0);
        }
    }
}
