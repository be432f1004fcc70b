//! Non-learning segmentation baselines: manual and Otsu thresholding, Canny
//! edges, temporal-median background subtraction, and 1-D k-means / GMM
//! intensity clustering.
//!
//! None of these isolate a ventricle reliably on bright-field footage; they
//! are kept as comparators and are not wired into quantification unless a
//! caller asks for them.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayFrame, VideoSequence};

/// Per-pixel cluster ids in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    k: u32,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>, k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("label map needs k >= 1"));
        }
        if labels.len() != width * height {
            return Err(Error::invalid("label buffer size does not match dimensions"));
        }
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid(format!("label out of range for k = {k}")));
        }
        Ok(LabelMap { width, height, labels, k })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn mask_of(&self, label: u32) -> BinaryMask {
        BinaryMask::new(self.width, self.height, self.labels.iter().map(|&l| l == label).collect())
            .expect("dimensions match")
    }

    /// Labels spread over `0..=255` for viewing.
    pub fn to_frame(&self) -> GrayFrame {
        let scale = if self.k > 1 { 255 / (self.k - 1) } else { 0 };
        GrayFrame::new(
            self.width.max(1),
            self.height.max(1),
            self.labels.iter().map(|&l| (l * scale).min(255) as u8).collect(),
        )
        .expect("dimensions match")
    }
}

fn histogram(frame: &GrayFrame) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &p in frame.pixels() {
        h[p as usize] += 1;
    }
    h
}

/// Foreground where `pixel <= t`; the ventricle interior is dark in bright field.
pub fn manual_threshold(frame: &GrayFrame, t: u8) -> BinaryMask {
    BinaryMask::new(
        frame.width(),
        frame.height(),
        frame.pixels().iter().map(|&p| p <= t).collect(),
    )
    .expect("dimensions match")
}

/// Between-class variance of the split `class0 = {v <= t}` as an exact
/// fraction `num / den` proportional to `ω0·ω1·(μ0 − μ1)²`.
fn otsu_fraction(n: u128, n0: u128, total_sum: u128, sum0: u128) -> Option<(u128, u128)> {
    let n1 = n - n0;
    let a = n.checked_mul(sum0)?;
    let b = n0.checked_mul(total_sum)?;
    let diff = a.abs_diff(b);
    Some((diff.checked_mul(diff)?, n0.checked_mul(n1)?))
}

fn otsu_argmax_exact(splits: &[(u8, u128, u128)], n: u128, total_sum: u128) -> Option<u8> {
    let mut best: Option<(u8, u128, u128)> = None;
    for &(t, n0, sum0) in splits {
        let (num, den) = otsu_fraction(n, n0, total_sum, sum0)?;
        let better = match best {
            None => true,
            Some((_, bnum, bden)) => num.checked_mul(bden)? > bnum.checked_mul(den)?,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t)
}

/// Otsu's threshold: the `t` maximizing between-class variance, smallest `t`
/// on ties, and the resulting dark-foreground mask.
pub fn otsu_threshold(frame: &GrayFrame) -> Result<(u8, BinaryMask)> {
    let hist = histogram(frame);
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Degenerate("Otsu needs at least two distinct intensities".into()));
    }
    let n = frame.pixels().len() as u128;
    let total_sum: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();

    let mut splits = Vec::with_capacity(255);
    let (mut n0, mut sum0) = (0u128, 0u128);
    for t in 0..255usize {
        n0 += hist[t] as u128;
        sum0 += t as u128 * hist[t] as u128;
        if n0 > 0 && n0 < n {
            splits.push((t as u8, n0, sum0));
        }
    }
    let best_t = otsu_argmax_exact(&splits, n, total_sum).unwrap_or_else(|| {
        // frames too large for exact u128 comparison
        let mut best = (f64::NEG_INFINITY, 0u8);
        for &(t, n0, sum0) in &splits {
            let diff = n as f64 * sum0 as f64 - n0 as f64 * total_sum as f64;
            let var = diff * diff / (n0 as f64 * (n - n0) as f64);
            if var > best.0 {
                best = (var, t);
            }
        }
        best.1
    });
    Ok((best_t, manual_threshold(frame, best_t)))
}

// ---------------------------------------------------------------------------
// Canny

/// 5×5 Gaussian taps for σ = 1, normalized to unit sum.
fn gaussian_taps() -> [f64; 5] {
    let mut k = [0.0f64; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / 2.0).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

struct Field {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Field {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.w as isize - 1) as usize;
        let cy = y.clamp(0, self.h as isize - 1) as usize;
        self.data[cy * self.w + cx]
    }
}

/// Separable Gaussian blur on intensities centered at 127.5, so that
/// inverting the input exactly negates the blurred field.
fn blur(frame: &GrayFrame) -> Field {
    let (w, h) = frame.dims();
    let taps = gaussian_taps();
    let src = Field {
        w,
        h,
        data: frame.pixels().iter().map(|&p| p as f64 - 127.5).collect(),
    };
    let mut tmp = Field { w, h, data: vec![0.0; w * h] };
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in taps.iter().enumerate() {
                acc += k * src.at(x as isize + i as isize - 2, y as isize);
            }
            tmp.data[y * w + x] = acc;
        }
    }
    let mut out = Field { w, h, data: vec![0.0; w * h] };
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in taps.iter().enumerate() {
                acc += k * tmp.at(x as isize, y as isize + i as isize - 2);
            }
            out.data[y * w + x] = acc;
        }
    }
    out
}

const TAN_22_5: f64 = 0.414_213_562_373_095_1;
const TAN_67_5: f64 = 2.414_213_562_373_095;

/// Canny edge detector. `low` and `high` are fractions of the maximum
/// gradient magnitude.
pub fn canny_edges(frame: &GrayFrame, low: f64, high: f64) -> Result<BinaryMask> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(Error::invalid(format!(
            "canny thresholds must satisfy 0 <= low < high <= 1, got {low}, {high}"
        )));
    }
    let (w, h) = frame.dims();
    let g = blur(frame);
    let mut mag = vec![0.0f64; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (g.at(x + 1, y - 1) + 2.0 * g.at(x + 1, y) + g.at(x + 1, y + 1))
                - (g.at(x - 1, y - 1) + 2.0 * g.at(x - 1, y) + g.at(x - 1, y + 1));
            let gy = (g.at(x - 1, y + 1) + 2.0 * g.at(x, y + 1) + g.at(x + 1, y + 1))
                - (g.at(x - 1, y - 1) + 2.0 * g.at(x, y - 1) + g.at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // direction modulo 180°, quantized to 0°, 45°, 90°, 135°; sign-symmetric
            let (ax, ay) = (gx.abs(), gy.abs());
            dir[i] = if ay <= ax * TAN_22_5 {
                0
            } else if ay >= ax * TAN_67_5 {
                2
            } else if (gx > 0.0) == (gy > 0.0) {
                1
            } else {
                3
            };
        }
    }
    let max = mag.iter().copied().fold(0.0f64, f64::max);
    if max <= 1e-9 {
        return Ok(BinaryMask::empty(w, h));
    }

    let mag_at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            // asymmetric comparison keeps exactly one pixel of a flat ridge
            if m >= mag_at(x - dx, y - dy) && m > mag_at(x + dx, y + dy) {
                thin[i] = m;
            }
        }
    }

    let lo = low * max;
    let hi = high * max;
    let mut edge = vec![false; w * h];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi && m > 0.0 {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= lo && thin[j] > 0.0 {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    BinaryMask::new(w, h, edge)
}

// ---------------------------------------------------------------------------
// Background subtraction

/// Masks pixels deviating from the per-pixel temporal median by more than `tau`.
pub fn background_subtract(seq: &VideoSequence, tau: f64) -> Result<Vec<BinaryMask>> {
    if seq.len() < 3 {
        return Err(Error::invalid(format!(
            "background subtraction needs at least 3 frames, got {}",
            seq.len()
        )));
    }
    let (w, h) = seq.dims();
    let n = seq.len();
    let mut background = vec![0.0f64; w * h];
    let mut column = vec![0u8; n];
    for (i, bg) in background.iter_mut().enumerate() {
        for (c, f) in column.iter_mut().zip(seq.frames()) {
            *c = f.pixels()[i];
        }
        column.sort_unstable();
        *bg = if n % 2 == 1 {
            column[n / 2] as f64
        } else {
            (column[n / 2 - 1] as f64 + column[n / 2] as f64) / 2.0
        };
    }
    Ok(seq
        .frames()
        .iter()
        .map(|f| {
            let bits = f
                .pixels()
                .iter()
                .zip(&background)
                .map(|(&p, &b)| (p as f64 - b).abs() > tau)
                .collect();
            BinaryMask::new(w, h, bits).expect("dimensions match")
        })
        .collect())
}

// ---------------------------------------------------------------------------
// k-means

const MAX_ITERS: usize = 100;

/// Result of 1-D k-means on pixel intensities; centroids ascending.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<f64>,
    pub labels: LabelMap,
    /// Sum of squared distances after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centroids.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Value at the `q`-quantile of the intensity histogram.
fn hist_quantile(hist: &[u64; 256], n: u64, q: f64) -> f64 {
    let target = (q * n as f64).floor() as u64;
    let mut running = 0u64;
    for (v, &c) in hist.iter().enumerate() {
        running += c;
        if running > target {
            return v as f64;
        }
    }
    255.0
}

pub fn kmeans_fit(frame: &GrayFrame, k: usize, seed: u64) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::invalid("k-means needs k >= 2"));
    }
    let hist = histogram(frame);
    let distinct: Vec<f64> = (0..256).filter(|&v| hist[v] > 0).map(|v| v as f64).collect();
    if distinct.len() < k {
        return Err(Error::Degenerate(format!(
            "{} distinct intensities for k = {k}",
            distinct.len()
        )));
    }
    let n = frame.pixels().len() as u64;
    let mut centroids: Vec<f64> = (0..k)
        .map(|j| hist_quantile(&hist, n, (j as f64 + 0.5) / k as f64))
        .collect();
    let mut dedup = centroids.clone();
    dedup.dedup();
    if dedup.len() < k {
        // heavy bins collapse quantiles; spread over the distinct values instead
        centroids = (0..k)
            .map(|j| distinct[(j * (distinct.len() - 1)) / (k - 1)])
            .collect();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = [usize::MAX; 256];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut cost = 0.0;
        for &v in &distinct {
            let j = nearest(v, &centroids);
            if assign[v as usize] != j {
                assign[v as usize] = j;
                changed = true;
            }
            cost += hist[v as usize] as f64 * (v - centroids[j]).powi(2);
        }
        inertia.push(cost);
        if !changed && iterations > 1 {
            break;
        }
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0u64; k];
        for &v in &distinct {
            let j = assign[v as usize];
            sums[j] += v * hist[v as usize] as f64;
            counts[j] += hist[v as usize];
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            } else {
                centroids[j] = distinct[rng.random_range(0..distinct.len())];
            }
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let mut rank = vec![0u32; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r as u32;
    }
    let labels = frame
        .pixels()
        .iter()
        .map(|&p| rank[assign[p as usize]])
        .collect();
    let sorted: Vec<f64> = order.iter().map(|&j| centroids[j]).collect();
    Ok(KMeansFit {
        centroids: sorted,
        labels: LabelMap::new(frame.width(), frame.height(), labels, k as u32)?,
        inertia,
        iterations,
    })
}

/// 1-D k-means on intensities; label 0 is the darkest cluster.
pub fn kmeans_intensity(frame: &GrayFrame, k: usize, seed: u64) -> Result<LabelMap> {
    Ok(kmeans_fit(frame, k, seed)?.labels)
}

// ---------------------------------------------------------------------------
// Gaussian mixture

const VARIANCE_FLOOR: f64 = 1e-4;
const LL_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Mean per-pixel log-likelihood, one entry per E-step.
    pub log_likelihood: Vec<f64>,
    /// Sum of the weights after every M-step.
    pub weight_sums: Vec<f64>,
    pub labels: LabelMap,
}

fn log_gauss(v: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (v - mean).powi(2) / var)
}

/// Log-sum-exp of the weighted component densities at `v`, plus the
/// normalized responsibilities written into `resp`.
fn responsibilities(v: f64, w: &[f64], mu: &[f64], var: &[f64], resp: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for j in 0..w.len() {
        resp[j] = w[j].ln() + log_gauss(v, mu[j], var[j]);
        max = max.max(resp[j]);
    }
    let mut s = 0.0;
    for r in resp.iter_mut() {
        *r = (*r - max).exp();
        s += *r;
    }
    for r in resp.iter_mut() {
        *r /= s;
    }
    max + s.ln()
}

pub fn gmm_fit(frame: &GrayFrame, k: usize, seed: u64) -> Result<GmmFit> {
    if k < 2 {
        return Err(Error::invalid("GMM needs k >= 2"));
    }
    let hist = histogram(frame);
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Degenerate("GMM on a constant frame".into()));
    }
    let init = kmeans_fit(frame, k, seed)?;
    let n = frame.pixels().len() as f64;
    let values: Vec<(f64, f64)> = (0..256)
        .filter(|&v| hist[v] > 0)
        .map(|v| (v as f64, hist[v] as f64))
        .collect();

    let mut means = init.centroids.clone();
    let mut weights = vec![0.0f64; k];
    let mut variances = vec![0.0f64; k];
    for (&p, &l) in frame.pixels().iter().zip(init.labels.labels()) {
        let j = l as usize;
        weights[j] += 1.0;
        variances[j] += (p as f64 - means[j]).powi(2);
    }
    for j in 0..k {
        variances[j] = (variances[j] / weights[j].max(1.0)).max(VARIANCE_FLOOR);
        weights[j] = (weights[j] / n).max(1e-12);
    }
    let ws: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= ws);

    let mut resp = vec![0.0f64; k];
    let mut log_likelihood = Vec::new();
    let mut weight_sums = Vec::new();
    for _ in 0..MAX_ITERS {
        let mut nk = vec![0.0f64; k];
        let mut sx = vec![0.0f64; k];
        let mut sxx = vec![0.0f64; k];
        let mut ll = 0.0;
        for &(v, c) in &values {
            ll += c * responsibilities(v, &weights, &means, &variances, &mut resp);
            for j in 0..k {
                let r = c * resp[j];
                nk[j] += r;
                sx[j] += r * v;
                sxx[j] += r * v * v;
            }
        }
        let ll = ll / n;
        let converged = log_likelihood.last().is_some_and(|&prev: &f64| ll - prev < LL_TOL);
        log_likelihood.push(ll);
        if converged {
            break;
        }
        for j in 0..k {
            if nk[j] <= 1e-12 {
                continue;
            }
            weights[j] = nk[j] / n;
            means[j] = sx[j] / nk[j];
            variances[j] = (sxx[j] / nk[j] - means[j] * means[j]).max(VARIANCE_FLOOR);
        }
        weight_sums.push(weights.iter().sum());
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let mut rank = vec![0u32; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r as u32;
    }
    let mut lut = [0u32; 256];
    for &(v, _) in &values {
        responsibilities(v, &weights, &means, &variances, &mut resp);
        let best = (0..k).fold(0, |b, j| if resp[j] > resp[b] { j } else { b });
        lut[v as usize] = rank[best];
    }
    let labels = frame.pixels().iter().map(|&p| lut[p as usize]).collect();
    Ok(GmmFit {
        weights: order.iter().map(|&j| weights[j]).collect(),
        means: order.iter().map(|&j| means[j]).collect(),
        variances: order.iter().map(|&j| variances[j]).collect(),
        log_likelihood,
        weight_sums,
        labels: LabelMap::new(frame.width(), frame.height(), labels, k as u32)?,
    })
}

/// GMM labels by maximum responsibility; label 0 is the darkest component.
pub fn gmm_segment(frame: &GrayFrame, k: usize, seed: u64) -> Result<LabelMap> {
    Ok(gmm_fit(frame, k, seed)?.labels)
}
