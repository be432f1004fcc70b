//! Synthetic beating-ventricle videos with exact masks and closed-form
//! cardiac indices, used as ground truth in place of annotated recordings.
//!
//! Each frame shows a dark ellipse (the ventricle) on a bright field. Both
//! semi-axes scale by `s(t) = 1 + m·sin(2πft + φ)`, so the ventricle area is
//! `π·a0·b0·s(t)²` and the indices have closed forms:
//!
//! * EF = `100·(1 − ((1 − m)/(1 + m))²)`
//! * FS = `2m / (1 + m)`
//! * HR = `60·f`

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayFrame, VideoSequence};

pub const INTERIOR_MEAN: f64 = 60.0;
pub const BACKGROUND_MEAN: f64 = 200.0;
/// Wavelength of the sinusoidal texture grid, pixels.
pub const TEXTURE_PERIOD: f64 = 16.0;

/// Half-plane dimming: pixels with `x·cos θ + y·sin θ > offset` are scaled by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub angle: f64,
    pub offset: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    /// Seconds; the frame count is `round(duration·fps)`.
    pub duration: f64,
    pub center: (f64, f64),
    /// Semi-axes `(a0, b0)` at `s = 1`, pixels.
    pub base_axes: (f64, f64),
    pub modulation: f64,
    /// Hz.
    pub beat_freq: f64,
    /// Radians added to the beat phase at `t = 0`.
    pub phase: f64,
    /// Radians, rotation of the long axis from +x.
    pub orientation: f64,
    pub texture_contrast: f64,
    pub noise_sigma: f64,
    pub occlusion: Option<Occlusion>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            video_id: "synth".into(),
            width: 64,
            height: 64,
            fps: 20.0,
            duration: 3.0,
            center: (32.0, 32.0),
            base_axes: (20.0, 15.0),
            modulation: 0.15,
            beat_freq: 2.0,
            phase: 0.0,
            orientation: 0.3,
            texture_contrast: 20.0,
            noise_sigma: 8.0,
            occlusion: None,
            seed: 7,
        }
    }
}

/// Closed-form indices plus the exact per-frame areas `π·a(t)·b(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticIndices {
    pub ef_pct: f64,
    pub fs: f64,
    pub hr_bpm: f64,
    pub areas: Vec<f64>,
}

pub fn analytic_ef(m: f64) -> f64 {
    100.0 * (1.0 - ((1.0 - m) / (1.0 + m)).powi(2))
}

pub fn analytic_fs(m: f64) -> f64 {
    2.0 * m / (1.0 + m)
}

/// Half extents of a rotated ellipse's bounding box.
fn half_extents(a: f64, b: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    ((a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt())
}

fn fits(width: usize, height: usize, center: (f64, f64), a: f64, b: f64, theta: f64) -> bool {
    let (ex, ey) = half_extents(a, b, theta);
    center.0 - ex >= 0.0 && center.0 + ex <= (width - 1) as f64 && center.1 - ey >= 0.0 && center.1 + ey <= (height - 1) as f64
}

impl SynthConfig {
    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn scale_at(&self, t: f64) -> f64 {
        1.0 + self.modulation * (2.0 * PI * self.beat_freq * t + self.phase).sin()
    }

    pub fn validate(&self) -> Result<()> {
        let (a0, b0) = self.base_axes;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("synthetic frame must be at least 1x1"));
        }
        if !(self.fps > 0.0 && self.duration > 0.0) || self.frame_count() == 0 {
            return Err(Error::invalid("fps and duration must give at least one frame"));
        }
        if !(0.0..1.0).contains(&self.modulation) {
            return Err(Error::invalid(format!("modulation {} outside [0, 1)", self.modulation)));
        }
        if !(a0 > 0.0 && b0 > 0.0) {
            return Err(Error::invalid("semi-axes must be positive"));
        }
        if !(self.beat_freq >= 0.0) || self.beat_freq >= self.fps / 2.0 {
            return Err(Error::invalid(format!(
                "beat frequency {} Hz is not below Nyquist ({} Hz)",
                self.beat_freq,
                self.fps / 2.0
            )));
        }
        let s = 1.0 + self.modulation;
        if !fits(self.width, self.height, self.center, a0 * s, b0 * s, self.orientation) {
            return Err(Error::invalid("ellipse at peak size exceeds the frame"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Shape and appearance of one rendered frame.
#[derive(Debug, Clone, Copy)]
struct FrameSpec {
    width: usize,
    height: usize,
    center: (f64, f64),
    a: f64,
    b: f64,
    theta: f64,
    texture_contrast: f64,
    noise_sigma: f64,
    occlusion: Option<Occlusion>,
}

/// Pixel-center-inside-ellipse mask, no anti-aliasing.
pub fn ellipse_mask(width: usize, height: usize, center: (f64, f64), a: f64, b: f64, theta: f64) -> BinaryMask {
    let (s, c) = theta.sin_cos();
    BinaryMask::from_fn(width, height, |x, y| {
        let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

fn render(spec: &FrameSpec, rng: &mut ChaCha8Rng) -> (GrayFrame, BinaryMask) {
    let mask = ellipse_mask(spec.width, spec.height, spec.center, spec.a, spec.b, spec.theta);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let k = 2.0 * PI / TEXTURE_PERIOD;
    let mut pixels = Vec::with_capacity(spec.width * spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let base = if mask.get(x, y) { INTERIOR_MEAN } else { BACKGROUND_MEAN };
            let texture = spec.texture_contrast * (k * x as f64).sin() * (k * y as f64).sin();
            let mut v = base + texture;
            if let Some(o) = spec.occlusion {
                if x as f64 * o.angle.cos() + y as f64 * o.angle.sin() > o.offset {
                    v *= o.factor;
                }
            }
            if spec.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let frame = GrayFrame::new(spec.width, spec.height, pixels).expect("dimensions match");
    (frame, mask)
}

/// Independent RNG stream per frame index.
fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders the video, its exact masks, and the analytic indices.
pub fn generate(cfg: &SynthConfig) -> Result<(VideoSequence, Vec<BinaryMask>, AnalyticIndices)> {
    cfg.validate()?;
    let (a0, b0) = cfg.base_axes;
    let n = cfg.frame_count();
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut areas = Vec::with_capacity(n);
    for i in 0..n {
        let s = cfg.scale_at(i as f64 / cfg.fps);
        let spec = FrameSpec {
            width: cfg.width,
            height: cfg.height,
            center: cfg.center,
            a: a0 * s,
            b: b0 * s,
            theta: cfg.orientation,
            texture_contrast: cfg.texture_contrast,
            noise_sigma: cfg.noise_sigma,
            occlusion: cfg.occlusion,
        };
        let (frame, mask) = render(&spec, &mut frame_rng(cfg.seed, i));
        frames.push(frame);
        masks.push(mask);
        areas.push(PI * spec.a * spec.b);
    }
    let truth = AnalyticIndices {
        ef_pct: analytic_ef(cfg.modulation),
        fs: analytic_fs(cfg.modulation),
        hr_bpm: 60.0 * cfg.beat_freq,
        areas,
    };
    Ok((VideoSequence::new(cfg.video_id.clone(), cfg.fps, frames)?, masks, truth))
}

/// Parameter ranges for randomized single-frame training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingRanges {
    pub width: usize,
    pub height: usize,
    /// Semi-major axis at the sampled beat phase, pixels.
    pub semi_major: (f64, f64),
    /// Semi-minor / semi-major.
    pub aspect: (f64, f64),
    pub texture_contrast: (f64, f64),
    pub noise_sigma: (f64, f64),
    /// Probability that a sample gets a random half-plane dimming.
    pub occlusion_prob: f64,
}

impl Default for TrainingRanges {
    fn default() -> Self {
        TrainingRanges {
            width: 64,
            height: 64,
            semi_major: (10.0, 25.0),
            aspect: (0.55, 1.0),
            texture_contrast: (0.0, 30.0),
            noise_sigma: (2.0, 14.0),
            occlusion_prob: 0.0,
        }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl TrainingRanges {
    fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        if self.width < 4 || self.height < 4 {
            return Err(Error::invalid("training frames must be at least 4x4"));
        }
        if !(ordered(self.semi_major) && ordered(self.aspect) && ordered(self.texture_contrast) && ordered(self.noise_sigma)) {
            return Err(Error::invalid("training ranges must be finite with lo <= hi"));
        }
        if !(self.semi_major.0 >= 1.0 && self.aspect.0 > 0.0 && self.aspect.1 <= 1.0 && self.noise_sigma.0 >= 0.0) {
            return Err(Error::invalid("training ranges are empty or out of domain"));
        }
        let max_fit = (self.width.min(self.height) as f64 - 1.0) / 2.0;
        if self.semi_major.0 > max_fit {
            return Err(Error::invalid("smallest ellipse does not fit the frame"));
        }
        Ok(())
    }
}

/// `n` frame/mask pairs over randomized centers, sizes, orientations,
/// textures and noise. Deterministic in `seed`; sample `i` uses RNG stream `i`.
pub fn make_training_set(ranges: &TrainingRanges, n: usize, seed: u64) -> Result<Vec<(GrayFrame, BinaryMask)>> {
    if n == 0 {
        return Err(Error::invalid("training set size must be at least 1"));
    }
    ranges.validate()?;
    let (w, h) = (ranges.width, ranges.height);
    let max_fit = (w.min(h) as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = frame_rng(seed, i);
        let a = sample_range(&mut rng, ranges.semi_major).min(max_fit);
        let b = (a * sample_range(&mut rng, ranges.aspect)).max(1.0);
        let theta = rng.random_range(0.0..PI);
        let (ex, ey) = half_extents(a, b, theta);
        let cx = sample_range(&mut rng, (ex, (w - 1) as f64 - ex));
        let cy = sample_range(&mut rng, (ey, (h - 1) as f64 - ey));
        let occlusion = if rng.random_bool(ranges.occlusion_prob.clamp(0.0, 1.0)) {
            let angle = rng.random_range(0.0..2.0 * PI);
            let reach = w.max(h) as f64;
            Some(Occlusion {
                angle,
                offset: rng.random_range(-0.5 * reach..reach),
                factor: rng.random_range(0.6..0.9),
            })
        } else {
            None
        };
        let spec = FrameSpec {
            width: w,
            height: h,
            center: (cx, cy),
            a,
            b,
            theta,
            texture_contrast: sample_range(&mut rng, ranges.texture_contrast),
            noise_sigma: sample_range(&mut rng, ranges.noise_sigma),
            occlusion,
        };
        out.push(render(&spec, &mut rng));
    }
    Ok(out)
}
