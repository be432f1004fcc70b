//! Frame preprocessing: region-of-interest crop, 3×3 sharpening and CLAHE,
//! applied in that fixed order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub roi: Option<Roi>,
    pub sharpen: bool,
    pub clahe: bool,
    pub clahe_tiles: usize,
    pub clahe_clip: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            roi: None,
            sharpen: false,
            clahe: false,
            clahe_tiles: 8,
            clahe_clip: 2.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clahe_tiles == 0 {
            return Err(Error::invalid("clahe_tiles must be at least 1"));
        }
        if !(self.clahe_clip >= 1.0) {
            return Err(Error::invalid(format!("clahe_clip must be >= 1, got {}", self.clahe_clip)));
        }
        Ok(())
    }

    /// Frame dimensions after this pipeline runs on a `width×height` input.
    pub fn output_dims(&self, width: usize, height: usize) -> (usize, usize) {
        match self.roi {
            Some(r) => (r.w, r.h),
            None => (width, height),
        }
    }
}

pub fn crop_roi(frame: &GrayFrame, roi: Roi) -> Result<GrayFrame> {
    if roi.w == 0 || roi.h == 0 {
        return Err(Error::invalid("roi has zero area"));
    }
    if roi.x + roi.w > frame.width() || roi.y + roi.h > frame.height() {
        return Err(Error::invalid(format!(
            "roi {roi:?} exceeds {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    GrayFrame::from_fn(roi.w, roi.h, |x, y| frame.get(roi.x + x, roi.y + y))
}

const SHARPEN_KERNEL: [[i32; 3]; 3] = [[0, -1, 0], [-1, 5, -1], [0, -1, 0]];

/// Convolves with the 5-center sharpening kernel, replicating edges.
///
/// The kernel has integer taps, so the integer sum equals the exact
/// floating-point result and needs no rounding before the clamp.
pub fn sharpen(frame: &GrayFrame) -> Result<GrayFrame> {
    if frame.width() < 3 || frame.height() < 3 {
        return Err(Error::invalid(format!(
            "sharpen needs at least 3x3, got {}x{}",
            frame.width(),
            frame.height()
        )));
    }
    GrayFrame::from_fn(frame.width(), frame.height(), |x, y| {
        let mut acc = 0i32;
        for (ky, row) in SHARPEN_KERNEL.iter().enumerate() {
            for (kx, &k) in row.iter().enumerate() {
                if k != 0 {
                    let v = frame.get_clamped(x as isize + kx as isize - 1, y as isize + ky as isize - 1);
                    acc += k * v as i32;
                }
            }
        }
        acc.clamp(0, 255) as u8
    })
}

/// Half-open `[start, end)` bounds of `tiles` near-equal slices of `len`.
fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles)
        .map(|i| (i * len / tiles, (i + 1) * len / tiles))
        .collect()
}

/// Grey-level lookup tables for each CLAHE tile, row-major over the grid.
#[derive(Debug, Clone)]
pub struct TileMappings {
    pub tiles: usize,
    pub luts: Vec<[u8; 256]>,
}

impl TileMappings {
    pub fn lut(&self, tx: usize, ty: usize) -> &[u8; 256] {
        &self.luts[ty * self.tiles + tx]
    }
}

fn tile_lut(hist: &[u32; 256], pixels: u32, clip: f64) -> [u8; 256] {
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        // a flat tile carries no contrast to redistribute
        let mut lut = [0u8; 256];
        for (v, out) in lut.iter_mut().enumerate() {
            *out = v as u8;
        }
        return lut;
    }

    let mut h = *hist;
    if clip.is_finite() {
        let limit = ((clip * pixels as f64 / 256.0).floor() as u32).max(1);
        let mut excess = 0u32;
        for c in h.iter_mut() {
            if *c > limit {
                excess += *c - limit;
                *c = limit;
            }
        }
        let batch = excess / 256;
        let residual = (excess % 256) as usize;
        for c in h.iter_mut() {
            *c += batch;
        }
        if residual > 0 {
            let step = (256 / residual).max(1);
            for i in (0..256).step_by(step).take(residual) {
                h[i] += 1;
            }
        }
    }

    let mut cdf = [0u32; 256];
    let mut running = 0u32;
    for (v, &c) in h.iter().enumerate() {
        running += c;
        cdf[v] = running;
    }
    let total = running;
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = (total - cdf_min).max(1) as f64;
    let mut lut = [0u8; 256];
    for v in 0..256 {
        let num = cdf[v].saturating_sub(cdf_min) as f64;
        lut[v] = (255.0 * num / denom + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Per-tile clipped-histogram equalization tables. `clip = f64::INFINITY`
/// disables clipping (plain adaptive histogram equalization).
pub fn clahe_tile_mappings(frame: &GrayFrame, tiles: usize, clip: f64) -> Result<TileMappings> {
    if tiles == 0 || frame.width() < tiles || frame.height() < tiles {
        return Err(Error::invalid(format!(
            "{tiles}x{tiles} CLAHE grid does not fit a {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    if !(clip >= 1.0) {
        return Err(Error::invalid(format!("clip must be >= 1, got {clip}")));
    }
    let xs = tile_bounds(frame.width(), tiles);
    let ys = tile_bounds(frame.height(), tiles);
    let mut luts = Vec::with_capacity(tiles * tiles);
    for &(y0, y1) in &ys {
        for &(x0, x1) in &xs {
            let mut hist = [0u32; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[frame.get(x, y) as usize] += 1;
                }
            }
            let pixels = ((x1 - x0) * (y1 - y0)) as u32;
            luts.push(tile_lut(&hist, pixels, clip));
        }
    }
    Ok(TileMappings { tiles, luts })
}

/// Index of the lower tile center and interpolation weight toward the upper one.
fn interp_coord(pos: f64, centers: &[f64]) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if pos <= centers[0] {
        return (0, 0, 0.0);
    }
    if pos >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.partition_point(|&c| c <= pos) - 1;
    let t = (pos - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, t)
}

fn tile_centers(bounds: &[(usize, usize)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(a, b)| (a + b) as f64 / 2.0 - 0.5)
        .collect()
}

/// Contrast-limited adaptive histogram equalization with bilinear blending
/// of the four surrounding tile mappings; pixels outside the outermost tile
/// centers use the nearest tiles only.
pub fn clahe(frame: &GrayFrame, tiles: usize, clip: f64) -> Result<GrayFrame> {
    let maps = clahe_tile_mappings(frame, tiles, clip)?;
    let cx = tile_centers(&tile_bounds(frame.width(), tiles));
    let cy = tile_centers(&tile_bounds(frame.height(), tiles));
    let col: Vec<_> = (0..frame.width()).map(|x| interp_coord(x as f64, &cx)).collect();
    GrayFrame::from_fn(frame.width(), frame.height(), |x, y| {
        let v = frame.get(x, y) as usize;
        let (y0, y1, ty) = interp_coord(y as f64, &cy);
        let (x0, x1, tx) = col[x];
        let top = (1.0 - tx) * maps.lut(x0, y0)[v] as f64 + tx * maps.lut(x1, y0)[v] as f64;
        let bottom = (1.0 - tx) * maps.lut(x0, y1)[v] as f64 + tx * maps.lut(x1, y1)[v] as f64;
        let out = (1.0 - ty) * top + ty * bottom;
        (out + 0.5).floor().clamp(0.0, 255.0) as u8
    })
}

pub fn apply_pipeline(frame: &GrayFrame, cfg: &PreprocessConfig) -> Result<GrayFrame> {
    cfg.validate()?;
    let mut out = match cfg.roi {
        Some(roi) => crop_roi(frame, roi)?,
        None => frame.clone(),
    };
    if cfg.sharpen {
        out = sharpen(&out)?;
    }
    if cfg.clahe {
        out = clahe(&out, cfg.clahe_tiles, cfg.clahe_clip)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(w: usize, h: usize, seed: u64) -> GrayFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayFrame::from_fn(w, h, |_, _| rng.random()).unwrap()
    }

    /// Direct double-loop convolution in f64.
    fn sharpen_oracle(frame: &GrayFrame) -> GrayFrame {
        let k = [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]];
        let (w, h) = frame.dims();
        let mut px = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                        let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                        acc += k[(dy + 1) as usize][(dx + 1) as usize] * frame.get(sx, sy) as f64;
                    }
                }
                px.push((acc + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
        GrayFrame::new(w, h, px).unwrap()
    }

    /// Unclipped per-tile equalization computed by counting pixels directly.
    fn ahe_tile_oracle(frame: &GrayFrame, x0: usize, x1: usize, y0: usize, y1: usize) -> [u8; 256] {
        let values: Vec<u8> = (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (x, y)))
            .map(|(x, y)| frame.get(x, y))
            .collect();
        let n = values.len();
        let lo = *values.iter().min().unwrap();
        let hi = *values.iter().max().unwrap();
        let mut lut = [0u8; 256];
        for v in 0..256usize {
            lut[v] = if lo == hi {
                v as u8
            } else {
                let at_or_below = values.iter().filter(|&&p| p as usize <= v).count();
                let at_min = values.iter().filter(|&&p| p == lo).count();
                let num = at_or_below.saturating_sub(at_min) as f64;
                (255.0 * num / (n - at_min) as f64 + 0.5).floor() as u8
            };
        }
        lut
    }

    #[test]
    fn crop_examples() {
        let f = GrayFrame::from_fn(4, 4, |x, y| (y * 4 + x) as u8).unwrap();
        let full = Roi { x: 0, y: 0, w: 4, h: 4 };
        assert_eq!(crop_roi(&f, full).unwrap(), f);
        let center = crop_roi(&f, Roi { x: 1, y: 1, w: 2, h: 2 }).unwrap();
        assert_eq!(center.pixels(), &[5, 6, 9, 10]);
        assert!(crop_roi(&f, Roi { x: 3, y: 0, w: 2, h: 1 }).is_err());
        assert!(crop_roi(&f, Roi { x: 0, y: 0, w: 0, h: 1 }).is_err());
    }

    #[test]
    fn crop_composes() {
        let f = random_frame(20, 16, 3);
        let outer = crop_roi(&f, Roi { x: 2, y: 3, w: 12, h: 10 }).unwrap();
        let inner = crop_roi(&outer, Roi { x: 4, y: 1, w: 5, h: 6 }).unwrap();
        let direct = crop_roi(&f, Roi { x: 6, y: 4, w: 5, h: 6 }).unwrap();
        assert_eq!(inner, direct);
    }

    #[test]
    fn sharpen_examples() {
        let flat = GrayFrame::filled(5, 5, 77).unwrap();
        assert_eq!(sharpen(&flat).unwrap(), flat);

        let mut px = vec![0u8; 25];
        px[12] = 40;
        let spike = sharpen(&GrayFrame::new(5, 5, px).unwrap()).unwrap();
        assert_eq!(spike.get(2, 2), 200);
        for (x, y) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(spike.get(x, y), 0);
        }
        assert!(sharpen(&GrayFrame::filled(2, 5, 0).unwrap()).is_err());
    }

    #[test]
    fn sharpen_matches_direct_convolution() {
        for seed in 0..5 {
            let f = random_frame(16, 16, seed);
            assert_eq!(sharpen(&f).unwrap(), sharpen_oracle(&f));
        }
    }

    #[test]
    fn clahe_constant_frame_is_identity() {
        for v in [0u8, 1, 60, 200, 255] {
            let f = GrayFrame::filled(32, 24, v).unwrap();
            assert_eq!(clahe(&f, 8, 2.0).unwrap(), f);
        }
    }

    #[test]
    fn clahe_two_region_matches_unclipped_oracle() {
        let f = GrayFrame::from_fn(64, 64, |x, _| if x < 32 { 60 } else { 200 }).unwrap();
        for tiles in [3, 8] {
            let maps = clahe_tile_mappings(&f, tiles, f64::INFINITY).unwrap();
            let xs = tile_bounds(64, tiles);
            let ys = tile_bounds(64, tiles);
            for (ty, &(y0, y1)) in ys.iter().enumerate() {
                for (tx, &(x0, x1)) in xs.iter().enumerate() {
                    let lut = maps.lut(tx, ty);
                    assert_eq!(lut, &ahe_tile_oracle(&f, x0, x1, y0, y1));
                    assert!(lut.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }
        // the middle column of a 3x3 grid straddles the edge and stretches it
        let maps = clahe_tile_mappings(&f, 3, f64::INFINITY).unwrap();
        assert_eq!(maps.lut(1, 1)[60], 0);
        assert_eq!(maps.lut(1, 1)[200], 255);
    }

    #[test]
    fn clahe_random_tiles_match_oracle() {
        for seed in 0..4 {
            let f = random_frame(40, 30, seed);
            let maps = clahe_tile_mappings(&f, 4, f64::INFINITY).unwrap();
            let xs = tile_bounds(40, 4);
            let ys = tile_bounds(30, 4);
            for (ty, &(y0, y1)) in ys.iter().enumerate() {
                for (tx, &(x0, x1)) in xs.iter().enumerate() {
                    assert_eq!(maps.lut(tx, ty), &ahe_tile_oracle(&f, x0, x1, y0, y1));
                }
            }
        }
    }

    #[test]
    fn clahe_rejects_degenerate_grid() {
        let f = GrayFrame::filled(4, 4, 0).unwrap();
        assert!(clahe(&f, 5, 2.0).is_err());
        assert!(clahe(&f, 0, 2.0).is_err());
        assert!(clahe(&f, 2, 0.5).is_err());
    }

    #[test]
    fn pipeline_stages() {
        let f = random_frame(24, 20, 9);
        assert_eq!(apply_pipeline(&f, &PreprocessConfig::default()).unwrap(), f);
        let roi = Roi { x: 2, y: 2, w: 10, h: 9 };
        let cfg = PreprocessConfig { roi: Some(roi), ..Default::default() };
        assert_eq!(apply_pipeline(&f, &cfg).unwrap(), crop_roi(&f, roi).unwrap());
        let full = PreprocessConfig { roi: Some(roi), sharpen: true, clahe: true, clahe_tiles: 3, ..Default::default() };
        let a = apply_pipeline(&f, &full).unwrap();
        let manual = clahe(&sharpen(&crop_roi(&f, roi).unwrap()).unwrap(), 3, 2.0).unwrap();
        assert_eq!(a, manual);
        assert_eq!(apply_pipeline(&f, &full).unwrap(), a);
    }

    proptest! {
        #[test]
        fn sharpen_preserves_constants(v in any::<u8>(), w in 3usize..12, h in 3usize..12) {
            let f = GrayFrame::filled(w, h, v).unwrap();
            prop_assert_eq!(sharpen(&f).unwrap(), f);
        }

        #[test]
        fn clahe_luts_monotone(seed in any::<u64>(), tiles in 1usize..6, clip in 1.0f64..6.0) {
            let f = random_frame(30, 26, seed);
            let maps = clahe_tile_mappings(&f, tiles, clip).unwrap();
            for lut in &maps.luts {
                prop_assert!(lut.windows(2).all(|w| w[0] <= w[1]));
            }
            let out = clahe(&f, tiles, clip).unwrap();
            prop_assert_eq!(out.dims(), f.dims());
        }
    }
}
