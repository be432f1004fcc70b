//! Grayscale frames, binary masks and frame sequences, with their on-disk
//! form: binary PGM (`P5`) per frame plus a JSON manifest per sequence.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit single-channel raster, row-major, 0 = black.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("frame must be at least 1x1, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height
            )));
        }
        Ok(GrayFrame { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with coordinates clamped to the frame (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    /// `255 - v` for every pixel.
    pub fn inverted(&self) -> GrayFrame {
        GrayFrame {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| 255 - v).collect(),
        }
    }
}

/// Per-pixel ventricle membership: `true` is foreground (ventricle).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "mask buffer has {} values, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask { width, height, bits }
    }

    /// Foreground where the frame value is above 127.
    pub fn from_frame(frame: &GrayFrame) -> Self {
        BinaryMask {
            width: frame.width(),
            height: frame.height(),
            bits: frame.pixels().iter().map(|&v| v > 127).collect(),
        }
    }

    /// Foreground as 255, background as 0.
    pub fn to_frame(&self) -> GrayFrame {
        GrayFrame {
            width: self.width.max(1),
            height: self.height.max(1),
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub(crate) fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}

/// Ordered frames of one recording. All frames share dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    video_id: String,
    fps: f64,
    frames: Vec<GrayFrame>,
}

impl VideoSequence {
    pub fn new(video_id: impl Into<String>, fps: f64, frames: Vec<GrayFrame>) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("sequence must contain at least one frame"))?;
        let dims = first.dims();
        if let Some(bad) = frames.iter().find(|f| f.dims() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: bad.dims(),
            });
        }
        Ok(VideoSequence {
            video_id: video_id.into(),
            fps,
            frames,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &[GrayFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` shared by every frame.
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn map_frames(&self, f: impl Fn(&GrayFrame) -> Result<GrayFrame> + Sync + Send) -> Result<VideoSequence> {
        let frames = self.frames.par_iter().map(f).collect::<Result<Vec<_>>>()?;
        VideoSequence::new(self.video_id.clone(), self.fps, frames)
    }
}

/// Integer stride that takes `source_fps` down to `target_fps`, if one exists.
pub fn fps_stride(source_fps: f64, target_fps: f64) -> Result<usize> {
    if !(target_fps.is_finite() && target_fps > 0.0) {
        return Err(Error::invalid(format!("target fps must be positive, got {target_fps}")));
    }
    let ratio = source_fps / target_fps;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::invalid(format!(
            "target fps {target_fps} does not divide source fps {source_fps}"
        )));
    }
    Ok(k as usize)
}

/// Keeps frames `0, k, 2k, ...` where `k = seq.fps / target_fps`.
pub fn subsample_fps(seq: &VideoSequence, target_fps: f64) -> Result<VideoSequence> {
    let stride = fps_stride(seq.fps, target_fps)?;
    let frames = seq.frames.iter().step_by(stride).cloned().collect();
    VideoSequence::new(seq.video_id.clone(), target_fps, frames)
}

// ---------------------------------------------------------------------------
// PGM

fn pgm_err(msg: impl Into<String>) -> Error {
    Error::Pgm(msg.into())
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(pgm_err("unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_int(token: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| pgm_err(format!("invalid {what}: {:?}", String::from_utf8_lossy(token))))
}

/// Decodes a binary (`P5`) PGM with maxval at most 255.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayFrame> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P5" {
        return Err(pgm_err("magic is not P5"));
    }
    let width = parse_header_int(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_header_int(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_header_int(next_token(bytes, &mut pos)?, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(pgm_err(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(pgm_err(format!("zero dimension {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(pgm_err("missing separator after maxval"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| pgm_err("dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(pgm_err(format!(
            "truncated raster: {} of {n} bytes",
            payload.len()
        )));
    }
    GrayFrame::new(width, height, payload[..n].to_vec())
}

/// Canonical `P5\n<w> <h>\n255\n` header followed by the raw raster.
pub fn write_pgm(frame: &GrayFrame) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", frame.width, frame.height);
    let mut out = Vec::with_capacity(header.len() + frame.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&frame.pixels);
    out
}

pub fn read_pgm_file(path: &Path) -> Result<GrayFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes)
}

pub fn write_pgm_file(path: &Path, frame: &GrayFrame) -> Result<()> {
    fs::write(path, write_pgm(frame)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Manifest

/// Sidecar JSON describing a frame directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub video_id: String,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub frame_pattern: String,
    /// Optional ground-truth mask files, same numbering as the frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_pattern: Option<String>,
}

/// Expands a printf-style `%0Nd` / `%d` placeholder with `index`.
pub fn expand_pattern(pattern: &str, index: usize) -> Result<String> {
    let start = pattern
        .find('%')
        .ok_or_else(|| Error::Manifest(format!("pattern {pattern:?} has no %d placeholder")))?;
    let rest = &pattern[start + 1..];
    let d_pos = rest
        .find('d')
        .ok_or_else(|| Error::Manifest(format!("pattern {pattern:?} has no %d placeholder")))?;
    let spec = &rest[..d_pos];
    let width = if spec.is_empty() {
        0
    } else if let Some(w) = spec.strip_prefix('0') {
        w.parse::<usize>()
            .map_err(|_| Error::Manifest(format!("bad width in pattern {pattern:?}")))?
    } else {
        return Err(Error::Manifest(format!("unsupported placeholder in {pattern:?}")));
    };
    Ok(format!(
        "{}{:0width$}{}",
        &pattern[..start],
        index,
        &rest[d_pos + 1..],
        width = width
    ))
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Manifest(format!("non-positive fps {}", self.fps)));
        }
        if self.frame_count == 0 {
            return Err(Error::Manifest("frame_count is 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Manifest("zero frame dimension".into()));
        }
        expand_pattern(&self.frame_pattern, 0)?;
        if let Some(p) = &self.mask_pattern {
            expand_pattern(p, 0)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    fn paths(dir: &Path, pattern: &str, count: usize) -> Result<Vec<PathBuf>> {
        (0..count)
            .map(|i| Ok(dir.join(expand_pattern(pattern, i)?)))
            .collect()
    }

    fn load_frames(&self, dir: &Path, pattern: &str) -> Result<Vec<GrayFrame>> {
        let paths = Self::paths(dir, pattern, self.frame_count)?;
        let frames = paths
            .par_iter()
            .map(|p| read_pgm_file(p))
            .collect::<Result<Vec<_>>>()?;
        let expected = (self.width, self.height);
        if let Some(bad) = frames.iter().find(|f| f.dims() != expected) {
            return Err(Error::DimensionMismatch {
                expected,
                actual: bad.dims(),
            });
        }
        Ok(frames)
    }
}

fn manifest_dir(manifest_path: &Path) -> &Path {
    manifest_path.parent().unwrap_or_else(|| Path::new("."))
}

/// Loads every frame listed by the manifest, in index order.
pub fn load_sequence(manifest_path: &Path) -> Result<VideoSequence> {
    let manifest = Manifest::read(manifest_path)?;
    let frames = manifest.load_frames(manifest_dir(manifest_path), &manifest.frame_pattern)?;
    VideoSequence::new(manifest.video_id, manifest.fps, frames)
}

/// Loads the ground-truth masks referenced by the manifest's `mask_pattern`.
pub fn load_masks(manifest_path: &Path) -> Result<Vec<BinaryMask>> {
    let manifest = Manifest::read(manifest_path)?;
    let pattern = manifest
        .mask_pattern
        .clone()
        .ok_or_else(|| Error::Manifest(format!("{} has no mask_pattern", manifest_path.display())))?;
    let frames = manifest.load_frames(manifest_dir(manifest_path), &pattern)?;
    Ok(frames.iter().map(BinaryMask::from_frame).collect())
}

/// Writes the frames (and optional masks) as PGM files next to a new
/// `manifest.json` in `dir`; returns the manifest path.
pub fn save_sequence(seq: &VideoSequence, masks: Option<&[BinaryMask]>, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (width, height) = seq.dims();
    let frame_pattern = "frame_%04d.pgm".to_string();
    for (i, frame) in seq.frames().iter().enumerate() {
        write_pgm_file(&dir.join(expand_pattern(&frame_pattern, i)?), frame)?;
    }
    let mask_pattern = match masks {
        Some(masks) => {
            if masks.len() != seq.len() {
                return Err(Error::invalid(format!(
                    "{} masks for {} frames",
                    masks.len(),
                    seq.len()
                )));
            }
            let pattern = "mask_%04d.pgm".to_string();
            for (i, mask) in masks.iter().enumerate() {
                write_pgm_file(&dir.join(expand_pattern(&pattern, i)?), &mask.to_frame())?;
            }
            Some(pattern)
        }
        None => None,
    };
    let manifest = Manifest {
        video_id: seq.video_id().to_string(),
        fps: seq.fps(),
        width,
        height,
        frame_count: seq.len(),
        frame_pattern,
        mask_pattern,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
