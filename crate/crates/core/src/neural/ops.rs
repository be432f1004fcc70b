//! Layer kernels on single-sample `(C, H, W)` activations.

use super::Scalar;

/// A single sample's activations, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Act { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub(crate) fn debug_check_finite(&self, what: &str) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite activation after {what}"
        );
    }
}

/// Row-major `C = A·B` via the scalar's GEMM, with explicit strides so
/// transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
) {
    debug_assert!(c.len() >= m * n);
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Layout of one convolution: `k×k` kernel, same padding, weights
/// `[cout][cin][k][k]` at `w_off`, biases `[cout]` at `b_off`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Zero-padded patch matrix `[cin·k·k, h·w]`.
fn im2col<T: Scalar>(x: &Act<T>, k: usize) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let r = (k / 2) as isize;
    let mut col = vec![T::zero(); x.c * k * k * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        drow[xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the input grid.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Act<T> {
    let hw = h * w;
    let r = (k / 2) as isize;
    let mut out = Act::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for xx in x0..x1 {
                        drow[(xx as isize + dx) as usize] += srow[xx];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_forward<T: Scalar>(spec: &ConvSpec, params: &[T], x: &Act<T>) -> Act<T> {
    debug_assert_eq!(x.c, spec.cin);
    let hw = x.plane();
    let weights = &params[spec.w_off..spec.w_off + spec.weight_len()];
    let bias = &params[spec.b_off..spec.b_off + spec.cout];
    let mut out = Act::zeros(spec.cout, x.h, x.w);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b);
    }
    let patch = spec.patch();
    if spec.k == 1 {
        gemm(spec.cout, patch, hw, weights, (patch as isize, 1), &x.data, (hw as isize, 1), T::one(), &mut out.data);
    } else {
        let col = im2col(x, spec.k);
        gemm(spec.cout, patch, hw, weights, (patch as isize, 1), &col, (hw as isize, 1), T::one(), &mut out.data);
    }
    out
}

/// Accumulates weight and bias gradients into `grad`; returns the input
/// gradient when `need_dx`.
pub fn conv_backward<T: Scalar>(
    spec: &ConvSpec,
    params: &[T],
    x: &Act<T>,
    dy: &Act<T>,
    grad: &mut [T],
    need_dx: bool,
) -> Option<Act<T>> {
    let hw = x.plane();
    let patch = spec.patch();
    let col_storage;
    let col: &[T] = if spec.k == 1 {
        &x.data
    } else {
        col_storage = im2col(x, spec.k);
        &col_storage
    };
    {
        let gw = &mut grad[spec.w_off..spec.w_off + spec.weight_len()];
        // dW += dY · colᵀ
        gemm(spec.cout, hw, patch, &dy.data, (hw as isize, 1), col, (1, hw as isize), T::one(), gw);
    }
    {
        let gb = &mut grad[spec.b_off..spec.b_off + spec.cout];
        for (co, g) in gb.iter_mut().enumerate() {
            let mut s = T::zero();
            for &v in &dy.data[co * hw..(co + 1) * hw] {
                s += v;
            }
            *g += s;
        }
    }
    if !need_dx {
        return None;
    }
    let weights = &params[spec.w_off..spec.w_off + spec.weight_len()];
    let mut dcol = vec![T::zero(); patch * hw];
    // dcol = Wᵀ · dY
    gemm(patch, spec.cout, hw, weights, (1, patch as isize), &dy.data, (hw as isize, 1), T::zero(), &mut dcol);
    if spec.k == 1 {
        Some(Act { c: spec.cin, h: x.h, w: x.w, data: dcol })
    } else {
        Some(col2im(&dcol, spec.cin, x.h, x.w, spec.k))
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Act<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward<T: Scalar>(y: &Act<T>, dy: &mut Act<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max-pool; the arg-max index (0..4, row-major in the window) is kept
/// for the backward pass. Ties go to the first position.
pub fn maxpool2<T: Scalar>(x: &Act<T>) -> (Act<T>, Vec<u8>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, h2, w2);
    let mut arg = vec![0u8; x.c * h2 * w2];
    for c in 0..x.c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let base = c * x.plane();
                let mut best = x.data[base + 2 * y * x.w + 2 * xx];
                let mut bi = 0u8;
                for (i, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x.data[base + (2 * y + dy) * x.w + 2 * xx + dx];
                    if v > best {
                        best = v;
                        bi = i as u8 + 1;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Act<T>, arg: &[u8], h: usize, w: usize) -> Act<T> {
    let mut dx = Act::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let o = (c * dy.h + y) * dy.w + xx;
                let (oy, ox) = match arg[o] {
                    0 => (0, 0),
                    1 => (0, 1),
                    2 => (1, 0),
                    _ => (1, 1),
                };
                dx.data[c * h * w + (2 * y + oy) * w + 2 * xx + ox] += dy.data[o];
            }
        }
    }
    dx
}

pub fn upsample2<T: Scalar>(x: &Act<T>) -> Act<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[(c * h + y / 2) * w + xx / 2] += dy.data[(c * dy.h + y) * dy.w + xx];
            }
        }
    }
    dx
}

/// Stacks `a` above `b` along the channel axis.
pub fn concat<T: Scalar>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act { c: a.c + b.c, h: a.h, w: a.w, data }
}

pub fn split<T: Scalar>(d: &Act<T>, first: usize) -> (Act<T>, Act<T>) {
    let cut = first * d.plane();
    (
        Act { c: first, h: d.h, w: d.w, data: d.data[..cut].to_vec() },
        Act { c: d.c - first, h: d.h, w: d.w, data: d.data[cut..].to_vec() },
    )
}
