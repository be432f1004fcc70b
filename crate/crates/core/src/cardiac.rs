//! Cardiac indices from a per-frame ventricle series: ED/ES frames, ejection
//! fraction (area and spheroid-volume based), fractional shortening, stroke
//! volume and heart rate.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{largest_component, measure_geometry, AxisMethod, VentricleGeometry};
use crate::imaging::{fps_stride, VideoSequence};
use crate::preprocess::{apply_pipeline, PreprocessConfig};
use crate::segment::Segmenter;

/// Largest tolerated fraction of frames without a segmentation.
pub const MAX_MISSING_FRACTION: f64 = 0.20;

/// `(D_d − D_s) / D_d`.
pub fn compute_fs(d_d: f64, d_s: f64) -> Result<f64> {
    if !(d_d > 0.0) {
        return Err(Error::invalid(format!("diastolic diameter must be positive, got {d_d}")));
    }
    if !(d_s >= 0.0) {
        return Err(Error::invalid(format!("systolic diameter must be non-negative, got {d_s}")));
    }
    if d_s > d_d {
        return Err(Error::invalid(format!(
            "systolic diameter {d_s} exceeds diastolic {d_d}; ED/ES likely swapped"
        )));
    }
    Ok((d_d - d_s) / d_d)
}

/// Prolate spheroid volume `π/6 · D_L · D_S²`.
pub fn spheroid_volume(d_l: f64, d_s: f64) -> Result<f64> {
    if !(d_s >= 0.0 && d_l >= 0.0) {
        return Err(Error::invalid("axes must be non-negative"));
    }
    if d_s > d_l {
        return Err(Error::invalid(format!("short axis {d_s} exceeds long axis {d_l}")));
    }
    Ok(PI / 6.0 * d_l * d_s * d_s)
}

/// `(EDV − ESV) / EDV × 100`, for volumes or areas alike.
pub fn compute_ef(edv: f64, esv: f64) -> Result<f64> {
    if !(edv > 0.0) {
        return Err(Error::invalid(format!("end-diastolic value must be positive, got {edv}")));
    }
    if !(esv >= 0.0) {
        return Err(Error::invalid(format!("end-systolic value must be non-negative, got {esv}")));
    }
    if esv > edv {
        return Err(Error::invalid(format!("end-systolic value {esv} exceeds end-diastolic {edv}")));
    }
    Ok((edv - esv) / edv * 100.0)
}

/// Ventricle area per frame; `None` marks frames whose segmentation was empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaSeries {
    pub video_id: String,
    pub fps: f64,
    pub areas: Vec<Option<f64>>,
}

impl AreaSeries {
    pub fn new(video_id: impl Into<String>, fps: f64, areas: Vec<Option<f64>>) -> Self {
        AreaSeries {
            video_id: video_id.into(),
            fps,
            areas,
        }
    }

    pub fn from_values(video_id: impl Into<String>, fps: f64, areas: &[f64]) -> Self {
        Self::new(video_id, fps, areas.iter().map(|&a| Some(a)).collect())
    }

    pub fn frame_count(&self) -> usize {
        self.areas.len()
    }

    pub fn missing(&self) -> usize {
        self.areas.iter().filter(|a| a.is_none()).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.areas.is_empty() {
            return 0.0;
        }
        self.missing() as f64 / self.areas.len() as f64
    }

    /// Every `k`-th entry where `k = fps / target_fps`, starting at frame 0.
    pub fn subsample_fps(&self, target_fps: f64) -> Result<AreaSeries> {
        let stride = fps_stride(self.fps, target_fps)?;
        Ok(AreaSeries {
            video_id: self.video_id.clone(),
            fps: target_fps,
            areas: self.areas.iter().step_by(stride).copied().collect(),
        })
    }

    /// Missing entries filled by linear interpolation (nearest value at the ends).
    fn interpolated(&self) -> Option<Vec<f64>> {
        let known: Vec<(usize, f64)> = self
            .areas
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|v| (i, v)))
            .collect();
        if known.is_empty() {
            return None;
        }
        let mut out = Vec::with_capacity(self.areas.len());
        let mut k = 0;
        for i in 0..self.areas.len() {
            while k + 1 < known.len() && known[k + 1].0 <= i {
                k += 1;
            }
            let (i0, v0) = known[k];
            let v = if i <= i0 || k + 1 == known.len() {
                v0
            } else {
                let (i1, v1) = known[k + 1];
                v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64
            };
            out.push(v);
        }
        Some(out)
    }
}

/// `(ed_frame, es_frame)`: global maximum and minimum area over the
/// non-missing frames, earliest frame on ties.
pub fn detect_ed_es(series: &AreaSeries) -> Result<(usize, usize)> {
    let valid = series.frame_count() - series.missing();
    if valid < 2 {
        return Err(Error::invalid(format!("{valid} valid frames; at least 2 needed")));
    }
    if series.missing_fraction() > MAX_MISSING_FRACTION {
        return Err(Error::invalid(format!(
            "{} of {} frames have no segmentation (limit {:.0}%)",
            series.missing(),
            series.frame_count(),
            MAX_MISSING_FRACTION * 100.0
        )));
    }
    let mut ed: Option<(usize, f64)> = None;
    let mut es: Option<(usize, f64)> = None;
    for (i, a) in series.areas.iter().enumerate() {
        let Some(a) = *a else { continue };
        if ed.is_none_or(|(_, best)| a > best) {
            ed = Some((i, a));
        }
        if es.is_none_or(|(_, best)| a < best) {
            es = Some((i, a));
        }
    }
    Ok((ed.unwrap().0, es.unwrap().0))
}

/// Area-based EF of a series.
pub fn ef_from_series(series: &AreaSeries) -> Result<f64> {
    let (ed, es) = detect_ed_es(series)?;
    compute_ef(series.areas[ed].unwrap(), series.areas[es].unwrap())
}

fn smooth3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let a = x[i.saturating_sub(1)];
            let c = x[(i + 1).min(n - 1)];
            (a + x[i] + c) / 3.0
        })
        .collect()
}

/// Unbiased autocorrelation normalized by lag 0, for lags `0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let r = |k: usize| x[..n - k].iter().zip(&x[k..]).map(|(a, b)| a * b).sum::<f64>() / (n - k) as f64;
    let r0 = r(0);
    (0..=max_lag.min(n - 1)).map(|k| if r0 > 0.0 { r(k) / r0 } else { 0.0 }).collect()
}

/// Variance explained by a least-squares fit of `a + b·cos(wt) + c·sin(wt)`.
/// Unlike the raw periodogram this peaks exactly at a pure tone's frequency
/// even over a non-integer number of cycles.
fn sinusoid_fit_power(x: &[f64], freq: f64, fps: f64) -> f64 {
    let w = 2.0 * PI * freq / fps;
    let mut g = [[0.0f64; 3]; 3];
    let mut r = [0.0f64; 3];
    for (i, &v) in x.iter().enumerate() {
        let (s, c) = (w * i as f64).sin_cos();
        let basis = [1.0, c, s];
        for a in 0..3 {
            r[a] += basis[a] * v;
            for b in 0..3 {
                g[a][b] += basis[a] * basis[b];
            }
        }
    }
    match solve3(g, r) {
        Some(coef) => coef.iter().zip(&r).map(|(c, r)| c * r).sum(),
        None => 0.0,
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Dominant beat period of the series, in frames.
///
/// The first local maximum (lag ≥ 2) of the autocorrelation of the
/// mean-removed, 3-point-smoothed series gives an integer period `L`; the
/// period is then refined to the best-fitting sinusoid frequency between lags `L − 1` and
/// `L + 1`, which resolves periods that are not a whole number of frames.
pub fn dominant_period(series: &AreaSeries) -> Result<f64> {
    let raw = series
        .interpolated()
        .ok_or_else(|| Error::Aperiodic("no valid frames".into()))?;
    let n = raw.len();
    if n < 5 {
        return Err(Error::invalid(format!("{n} frames is too short for a heart rate")));
    }
    let mean = raw.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let smoothed = smooth3(&centered);
    let max_lag = n / 2;
    let ac = autocorrelation(&smoothed, max_lag + 1);
    if ac.is_empty() || ac[0] == 0.0 {
        return Err(Error::Aperiodic("series has no variation".into()));
    }
    let lag = (2..=max_lag.min(ac.len() - 2))
        .find(|&k| ac[k] > 0.0 && ac[k] > ac[k - 1] && ac[k] >= ac[k + 1])
        .ok_or_else(|| Error::Aperiodic("no autocorrelation peak within half the series".into()))?;

    let fps = series.fps;
    let f_lo = fps / (lag as f64 + 1.0);
    let f_hi = (fps / (lag as f64 - 1.0)).min(fps / 2.0);
    const STEPS: usize = 4000;
    let mut best = (f64::NEG_INFINITY, fps / lag as f64);
    for i in 0..=STEPS {
        let f = f_lo + (f_hi - f_lo) * i as f64 / STEPS as f64;
        let p = sinusoid_fit_power(&centered, f, fps);
        if p > best.0 {
            best = (p, f);
        }
    }
    Ok(fps / best.1)
}

/// Heart rate in beats per minute, `60 · fps / period`.
pub fn compute_hr(series: &AreaSeries) -> Result<f64> {
    Ok(60.0 * series.fps / dominant_period(series)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardiacReport {
    pub video_id: String,
    pub fps: f64,
    pub ed_frame: usize,
    pub es_frame: usize,
    pub ed_area: f64,
    pub es_area: f64,
    pub ef_area: f64,
    /// From prolate-spheroid volumes on moments axes; may fall outside [0, 100]
    /// when the ED/ES shapes disagree with the area ordering.
    pub ef_volume: f64,
    /// Computed without the ordering check of [`compute_fs`], so segmentation
    /// noise can make it negative. `NaN` when the ED short axis is zero.
    pub fs_moments: f64,
    pub fs_chord: f64,
    pub sv_area: f64,
    pub sv_volume: f64,
    /// `None` when the series is aperiodic or too short.
    pub hr: Option<f64>,
    pub method: AxisMethod,
    pub per_frame: Vec<VentricleGeometry>,
    pub series: AreaSeries,
}

fn raw_fraction(d: f64, s: f64) -> f64 {
    if d > 0.0 {
        (d - s) / d
    } else {
        f64::NAN
    }
}

/// Builds the report from per-frame geometries measured by both axis methods.
pub fn summarize(
    video_id: &str,
    fps: f64,
    moments: &[VentricleGeometry],
    chord: &[VentricleGeometry],
    method: AxisMethod,
) -> Result<CardiacReport> {
    if moments.len() != chord.len() {
        return Err(Error::invalid("geometry series lengths differ"));
    }
    let areas = moments
        .iter()
        .map(|g| if g.empty { None } else { Some(g.area as f64) })
        .collect();
    let series = AreaSeries::new(video_id, fps, areas);
    let (ed, es) = detect_ed_es(&series)?;
    let ed_area = moments[ed].area as f64;
    let es_area = moments[es].area as f64;
    let ef_area = compute_ef(ed_area, es_area)?;
    let edv = PI / 6.0 * moments[ed].long_axis * moments[ed].short_axis.powi(2);
    let esv = PI / 6.0 * moments[es].long_axis * moments[es].short_axis.powi(2);
    let per_frame = match method {
        AxisMethod::Moments => moments.to_vec(),
        AxisMethod::Chord => chord.to_vec(),
    };
    Ok(CardiacReport {
        video_id: video_id.to_string(),
        fps,
        ed_frame: ed,
        es_frame: es,
        ed_area,
        es_area,
        ef_area,
        ef_volume: if edv > 0.0 { (edv - esv) / edv * 100.0 } else { f64::NAN },
        fs_moments: raw_fraction(moments[ed].short_axis, moments[es].short_axis),
        fs_chord: raw_fraction(chord[ed].short_axis, chord[es].short_axis),
        sv_area: ed_area - es_area,
        sv_volume: edv - esv,
        hr: compute_hr(&series).ok(),
        method,
        per_frame,
        series,
    })
}

/// Full pipeline: preprocess, segment, keep the largest component, measure,
/// then reduce the series to cardiac indices.
pub fn quantify(
    seq: &VideoSequence,
    segmenter: &dyn Segmenter,
    preprocess: &PreprocessConfig,
    method: AxisMethod,
) -> Result<CardiacReport> {
    let processed = seq.map_frames(|f| apply_pipeline(f, preprocess))?;
    let masks = segmenter.segment(&processed)?;
    if masks.len() != processed.len() {
        return Err(Error::invalid(format!(
            "segmenter returned {} masks for {} frames",
            masks.len(),
            processed.len()
        )));
    }
    let dims = processed.dims();
    if let Some(bad) = masks.iter().find(|m| m.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            actual: bad.dims(),
        });
    }
    use rayon::prelude::*;
    let geoms: Vec<(VentricleGeometry, VentricleGeometry)> = masks
        .par_iter()
        .map(|m| {
            let kept = largest_component(m);
            (
                measure_geometry(&kept, AxisMethod::Moments),
                measure_geometry(&kept, AxisMethod::Chord),
            )
        })
        .collect();
    let (moments, chord): (Vec<_>, Vec<_>) = geoms.into_iter().unzip();
    summarize(seq.video_id(), seq.fps(), &moments, &chord, method)
}

fn real(v: f64) -> String {
    format!("{v:.6}")
}

impl CardiacReport {
    pub fn frames_csv(&self) -> String {
        let mut out = String::from("video_id,frame_index,area_px,long_axis_px,short_axis_px,missing_flag\n");
        for (i, g) in self.per_frame.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.video_id,
                i,
                g.area,
                real(g.long_axis),
                real(g.short_axis),
                g.empty as u8
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "video_id,ed_frame,es_frame,ed_area_px,es_area_px,ef_area_pct,ef_volume_pct,fs_moments,fs_chord,sv_area_px2,sv_volume_px3,hr_bpm,n_frames,n_missing\n",
        );
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.video_id,
            self.ed_frame,
            self.es_frame,
            self.ed_area as u64,
            self.es_area as u64,
            real(self.ef_area),
            real(self.ef_volume),
            real(self.fs_moments),
            real(self.fs_chord),
            self.sv_area as u64,
            real(self.sv_volume),
            real(self.hr.unwrap_or(f64::NAN)),
            self.series.frame_count(),
            self.series.missing()
        );
        out
    }
}

/// `frame_index,time_s,area_px` rows; missing frames leave `area_px` empty.
pub fn area_series_csv(series: &AreaSeries) -> String {
    let mut out = String::from("frame_index,time_s,area_px\n");
    for (i, a) in series.areas.iter().enumerate() {
        let area = a.map(|v| format!("{}", v as u64)).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", i, real(i as f64 / series.fps), area);
    }
    out
}
