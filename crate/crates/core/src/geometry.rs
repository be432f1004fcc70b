//! Ventricle geometry from a binary mask: connected components, pixel area,
//! and long/short axes by either the equivalent-ellipse (second moments) or
//! the longest-chord construction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::classical::LabelMap;
use crate::imaging::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0), (1, 0), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AxisMethod {
    /// Axes of the ellipse with the same second central moments.
    #[default]
    Moments,
    /// Longest contour chord, then the extent perpendicular to it.
    Chord,
}

impl std::str::FromStr for AxisMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moments" => Ok(AxisMethod::Moments),
            "chord" => Ok(AxisMethod::Chord),
            other => Err(format!("unknown geometry method {other:?} (expected moments or chord)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VentricleGeometry {
    pub area: usize,
    pub centroid: (f64, f64),
    pub long_axis: f64,
    pub short_axis: f64,
    pub orientation: f64,
    pub method: AxisMethod,
    pub empty: bool,
}

impl VentricleGeometry {
    fn empty(method: AxisMethod) -> Self {
        VentricleGeometry {
            area: 0,
            centroid: (0.0, 0.0),
            long_axis: 0.0,
            short_axis: 0.0,
            orientation: 0.0,
            method,
            empty: true,
        }
    }
}

/// Labels foreground components `1..` in order of first encounter in a
/// row-major scan; background is 0. The map's `k` is the component count + 1.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> LabelMap {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut next = 1u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.bits()[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    LabelMap::new(w, h, labels, next).expect("labels in range")
}

/// Keeps only the largest 8-connected component; ties go to the component
/// met first in scan order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let cc = connected_components(mask, Connectivity::Eight);
    if cc.k() <= 1 {
        return mask.clone();
    }
    let mut areas = vec![0usize; cc.k() as usize];
    for &l in cc.labels() {
        areas[l as usize] += 1;
    }
    let mut best = 1;
    for l in 2..areas.len() {
        if areas[l] > areas[best] {
            best = l;
        }
    }
    cc.mask_of(best as u32)
}

fn foreground_points(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let (w, h) = mask.dims();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                pts.push((x as f64, y as f64));
            }
        }
    }
    pts
}

/// Foreground pixels with a 4-neighbour outside the mask or the frame.
pub fn contour_points(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let (w, h) = mask.dims();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                pts.push((x as f64, y as f64));
            }
        }
    }
    pts
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; collinear points dropped.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn moments(pts: &[(f64, f64)]) -> ((f64, f64), f64, f64, f64) {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        let (dx, dy) = (x - cx, y - cy);
        m20 += dx * dx;
        m02 += dy * dy;
        m11 += dx * dy;
    }
    ((cx, cy), m20, m02, m11)
}

/// Area, centroid and axes of a single-component mask (run
/// [`largest_component`] first). Pixel centers sit at integer coordinates.
pub fn measure_geometry(mask: &BinaryMask, method: AxisMethod) -> VentricleGeometry {
    let pts = foreground_points(mask);
    if pts.is_empty() {
        return VentricleGeometry::empty(method);
    }
    let n = pts.len() as f64;
    let (centroid, m20, m02, m11) = moments(&pts);

    let (long_axis, short_axis, orientation) = match method {
        AxisMethod::Moments => {
            let (a, b, c) = (m20 / n, m02 / n, m11 / n);
            let half_trace = (a + b) / 2.0;
            let disc = (((a - b) / 2.0).powi(2) + c * c).sqrt();
            let l1 = (half_trace + disc).max(0.0);
            let l2 = (half_trace - disc).max(0.0);
            // semi-axis = 2·sqrt(λ); full axis twice that
            (4.0 * l1.sqrt(), 4.0 * l2.sqrt(), 0.5 * (2.0 * m11).atan2(m20 - m02))
        }
        AxisMethod::Chord => {
            let hull = convex_hull(contour_points(mask));
            let mut best = (0.0f64, hull[0], hull[0]);
            for i in 0..hull.len() {
                for j in i + 1..hull.len() {
                    let d = (hull[i].0 - hull[j].0).hypot(hull[i].1 - hull[j].1);
                    if d > best.0 {
                        best = (d, hull[i], hull[j]);
                    }
                }
            }
            let (long, p, q) = best;
            if long == 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                let (ux, uy) = ((q.0 - p.0) / long, (q.1 - p.1) / long);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &(x, y) in &pts {
                    let s = -uy * x + ux * y;
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
                let mut angle = uy.atan2(ux);
                if angle > std::f64::consts::FRAC_PI_2 {
                    angle -= std::f64::consts::PI;
                } else if angle <= -std::f64::consts::FRAC_PI_2 {
                    angle += std::f64::consts::PI;
                }
                let short = (hi - lo).min(long);
                (long, short, angle)
            }
        }
    };

    VentricleGeometry {
        area: pts.len(),
        centroid,
        long_axis,
        short_axis,
        orientation,
        method,
        empty: false,
    }
}
