//! A small from-scratch U-net: same-padding 3×3 convolutions, max-pool
//! encoder, nearest-upsample decoder with skip concatenation, sigmoid head.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod io;
mod ops;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayFrame};
use crate::metrics::{ProbMap, BCE_EPS};

pub use io::{load_model, load_model_file, save_model, save_model_file, HEADER_LEN, MAGIC, VERSION};
pub use ops::ConvSpec;
use ops::{Act, conv_backward, conv_forward, relu_backward, relu_inplace};
pub use train::{split_counts, train, train_with, EpochRecord, LossKind, TrainConfig, TrainHistory};

/// Floating-point element type of a network.
pub trait Scalar: Float + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = A·B + beta·C` with row/column strides for each operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// Smallest slice length that a strided `rows × cols` view can touch.
fn strided_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= strided_extent(m, k, rsa, csa));
                assert!(b.len() >= strided_extent(k, n, rsb, csb));
                assert!(c.len() >= strided_extent(m, n, rsc, csc));
                // SAFETY: the asserts above keep every strided access in bounds,
                // and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A dense `(batch, channels, height, width)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 { dims, data: vec![T::zero(); dims.iter().product()] }
    }

    /// Stacks frames as single-channel samples scaled to `[0, 1]`.
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a GrayFrame>) -> Result<Self> {
        let mut data = Vec::new();
        let mut shape: Option<(usize, usize)> = None;
        let mut n = 0;
        for f in frames {
            match shape {
                None => shape = Some(f.dims()),
                Some(s) if s != f.dims() => {
                    return Err(Error::DimensionMismatch { expected: s, actual: f.dims() })
                }
                _ => {}
            }
            let inv = T::lit(1.0 / 255.0);
            data.extend(f.pixels().iter().map(|&p| T::lit(p as f64) * inv));
            n += 1;
        }
        let (w, h) = shape.unwrap_or((0, 0));
        Ok(Tensor4 { dims: [n, 1, h, w], data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_p: f64,
    /// `(height, width)` of accepted inputs.
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 8, dropout_p: 0.1, input_size: (64, 64), seed: 0 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::invalid(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout_p must be in [0,1), got {}", self.dropout_p)));
        }
        let div = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "input size {h}x{w} is not a positive multiple of 2^{} = {div}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `i`; level `depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Where each convolution lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Two convs per encoder level.
    pub encoder: Vec<[ConvSpec; 2]>,
    pub bottleneck: [ConvSpec; 2],
    /// Per level: up-conv, then two convs after the skip concat.
    pub decoder: Vec<[ConvSpec; 3]>,
    pub head: ConvSpec,
    pub param_count: usize,
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Self {
        let mut off = 0;
        let mut conv = |cin, cout, k| {
            let w_off = off;
            let b_off = w_off + cout * cin * k * k;
            off = b_off + cout;
            ConvSpec { cin, cout, k, w_off, b_off }
        };
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for i in 0..cfg.depth {
            let c = cfg.channels(i);
            encoder.push([conv(cin, c, 3), conv(c, c, 3)]);
            cin = c;
        }
        let cb = cfg.channels(cfg.depth);
        let bottleneck = [conv(cin, cb, 3), conv(cb, cb, 3)];
        // Decoder specs are laid out deepest first, matching execution order,
        // but stored by level index.
        let mut decoder = vec![None; cfg.depth];
        for i in (0..cfg.depth).rev() {
            let c = cfg.channels(i);
            let up = conv(cfg.channels(i + 1), c, 3);
            let a = conv(2 * c, c, 3);
            let b = conv(c, c, 3);
            decoder[i] = Some([up, a, b]);
        }
        let head = conv(cfg.channels(0), 1, 1);
        Layout {
            encoder,
            bottleneck,
            decoder: decoder.into_iter().map(|d| d.expect("every level filled")).collect(),
            head,
            param_count: off,
        }
    }

    /// All convolutions in parameter order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut v: Vec<ConvSpec> = self.encoder.iter().flatten().copied().collect();
        v.extend(self.bottleneck);
        for d in self.decoder.iter().rev() {
            v.extend(d);
        }
        v.push(self.head);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    layout: Layout,
    params: Vec<T>,
    adam: AdamState<T>,
    /// Bumped on every parameter change so stale caches are detectable.
    generation: u64,
}

impl<T: PartialEq> PartialEq for UNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.adam == other.adam
    }
}

#[derive(Debug, Clone)]
struct EncCache<T> {
    x: Act<T>,
    a1: Act<T>,
    a2: Act<T>,
    arg: Vec<u8>,
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    up: Act<T>,
    u: Act<T>,
    cat: Act<T>,
    a1: Act<T>,
    a2: Act<T>,
}

#[derive(Debug, Clone)]
struct SampleCache<T> {
    enc: Vec<EncCache<T>>,
    bott_in: Act<T>,
    bott_a1: Act<T>,
    bott_a2: Act<T>,
    drop_mask: Option<Vec<T>>,
    dec: Vec<DecCache<T>>,
    probs: Vec<T>,
}

/// Activations retained by [`UNet::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    samples: Vec<SampleCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn batch_len(&self) -> usize {
        self.samples.len()
    }
}

/// Gradient of `scale · Σ_samples loss` with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<T>,
    /// Mean per-sample loss of the batch (unscaled).
    pub loss: f64,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Inverted dropout: zeroes each value with probability `p` and scales the
/// survivors by `1/(1-p)`. Returns the multiplier applied to each element.
pub(crate) fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn dropout_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

/// Loss of one sample from its probabilities; BCE is a pixel mean, Dice is
/// the smoothed soft Dice loss.
pub fn sample_loss<T: Scalar>(probs: &[T], truth: &[bool], kind: LossKind) -> f64 {
    match kind {
        LossKind::Bce => {
            let n = probs.len().max(1) as f64;
            let s: f64 = probs
                .iter()
                .zip(truth)
                .map(|(&p, &y)| {
                    let p = p.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
                    if y {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum();
            s / n
        }
        LossKind::Dice => {
            let (inter, s) = dice_sums(probs, truth);
            1.0 - (2.0 * inter + 1.0) / (s + 1.0)
        }
    }
}

fn dice_sums<T: Scalar>(probs: &[T], truth: &[bool]) -> (f64, f64) {
    let (mut inter, mut s) = (0.0, 0.0);
    for (&p, &y) in probs.iter().zip(truth) {
        let p = p.as_f64();
        if y {
            inter += p;
            s += 1.0;
        }
        s += p;
    }
    (inter, s)
}

/// `scale · ∂loss/∂z` for the pre-sigmoid logits `z`.
fn logit_grad<T: Scalar>(probs: &[T], truth: &[bool], kind: LossKind, scale: f64) -> Vec<T> {
    match kind {
        LossKind::Bce => {
            let n = probs.len().max(1) as f64;
            probs
                .iter()
                .zip(truth)
                .map(|(&p, &y)| {
                    let p = p.as_f64();
                    // Inside the clamp d/dz of the BCE term is p - y; outside it
                    // the clamped loss is flat.
                    if p > BCE_EPS && p < 1.0 - BCE_EPS {
                        T::lit(scale * (p - if y { 1.0 } else { 0.0 }) / n)
                    } else {
                        T::zero()
                    }
                })
                .collect()
        }
        LossKind::Dice => {
            let (inter, s) = dice_sums(probs, truth);
            let num = 2.0 * inter + 1.0;
            let den = s + 1.0;
            probs
                .iter()
                .zip(truth)
                .map(|(&p, &y)| {
                    let p = p.as_f64();
                    let y = if y { 1.0 } else { 0.0 };
                    let dl_dp = -(2.0 * y * den - num) / (den * den);
                    T::lit(scale * dl_dp * p * (1.0 - p))
                })
                .collect()
        }
    }
}

impl<T: Scalar> UNet<T> {
    /// He-uniform weights from the config seed, zero biases, fresh Adam state.
    pub fn init(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.param_count];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for spec in layout.convs() {
            let fan_in = (spec.cin * spec.k * spec.k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for w in &mut params[spec.w_off..spec.w_off + spec.weight_len()] {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Self::from_parts(config, params, None)
    }

    /// Builds a model from explicit parameters (and optionally Adam state).
    pub fn from_parts(config: UNetConfig, params: Vec<T>, adam: Option<AdamState<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let n = layout.param_count;
        if params.len() != n {
            return Err(Error::invalid(format!("config needs {n} parameters, got {}", params.len())));
        }
        let adam = adam.unwrap_or_else(|| AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 });
        if adam.m.len() != n || adam.v.len() != n {
            return Err(Error::invalid("Adam state length does not match parameter count"));
        }
        Ok(UNet { config, layout, params, adam, generation: 0 })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.params
    }

    pub fn adam_state(&self) -> &AdamState<T> {
        &self.adam
    }

    fn check_input(&self, batch: &Tensor4<T>) -> Result<()> {
        let [_, c, h, w] = batch.dims();
        let (eh, ew) = self.config.input_size;
        if c != 1 {
            return Err(Error::invalid(format!("expected 1 input channel, got {c}")));
        }
        if (h, w) != (eh, ew) {
            return Err(Error::DimensionMismatch { expected: (ew, eh), actual: (w, h) });
        }
        Ok(())
    }

    /// Runs the batch; dropout is applied only when `train_mode`, with masks
    /// drawn from `seed` (one stream per sample index).
    pub fn forward(&self, batch: &Tensor4<T>, train_mode: bool, seed: u64) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        self.check_input(batch)?;
        let [n, _, h, w] = batch.dims();
        let samples: Vec<SampleCache<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = Act { c: 1, h, w, data: batch.sample(i).to_vec() };
                let mut rng = train_mode.then(|| dropout_rng(seed, i));
                self.forward_sample(x, rng.as_mut())
            })
            .collect();
        let mut out = Vec::with_capacity(n * h * w);
        for s in &samples {
            out.extend_from_slice(&s.probs);
        }
        let probs = Tensor4 { dims: [n, 1, h, w], data: out };
        Ok((probs, ForwardCache { generation: self.generation, samples }))
    }

    fn forward_sample(&self, x: Act<T>, rng: Option<&mut ChaCha8Rng>) -> SampleCache<T> {
        let p = &self.params;
        let conv_relu = |spec: &ConvSpec, input: &Act<T>, what: &str| {
            let mut y = conv_forward(spec, p, input);
            relu_inplace(&mut y);
            y.debug_check_finite(what);
            y
        };
        let mut enc = Vec::with_capacity(self.config.depth);
        let mut cur = x;
        for specs in &self.layout.encoder {
            let a1 = conv_relu(&specs[0], &cur, "encoder conv");
            let a2 = conv_relu(&specs[1], &a1, "encoder conv");
            let (pooled, arg) = ops::maxpool2(&a2);
            enc.push(EncCache { x: cur, a1, a2, arg });
            cur = pooled;
        }
        let bott_a1 = conv_relu(&self.layout.bottleneck[0], &cur, "bottleneck conv");
        let bott_a2 = conv_relu(&self.layout.bottleneck[1], &bott_a1, "bottleneck conv");
        let (drop_mask, bott_out) = match rng {
            Some(rng) if self.config.dropout_p > 0.0 => {
                let mask = dropout_mask::<T>(bott_a2.data.len(), self.config.dropout_p, rng);
                let mut out = bott_a2.clone();
                out.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                (Some(mask), out)
            }
            _ => (None, bott_a2.clone()),
        };
        let mut dec: Vec<Option<DecCache<T>>> = vec![None; self.config.depth];
        let mut prev = bott_out;
        for i in (0..self.config.depth).rev() {
            let specs = &self.layout.decoder[i];
            let up = ops::upsample2(&prev);
            let u = conv_relu(&specs[0], &up, "up conv");
            let cat = ops::concat(&u, &enc[i].a2);
            let a1 = conv_relu(&specs[1], &cat, "decoder conv");
            let a2 = conv_relu(&specs[2], &a1, "decoder conv");
            prev = a2.clone();
            dec[i] = Some(DecCache { up, u, cat, a1, a2 });
        }
        let logits = conv_forward(&self.layout.head, p, &prev);
        let probs: Vec<T> = logits.data.iter().map(|&z| sigmoid(z)).collect();
        debug_assert!(probs.iter().all(|v| v.is_finite()), "non-finite probability");
        SampleCache {
            enc,
            bott_in: cur,
            bott_a1,
            bott_a2,
            drop_mask,
            dec: dec.into_iter().map(|d| d.expect("every level run")).collect(),
            probs,
        }
    }

    /// Gradients of `scale · Σ_i loss_i` over the cached batch.
    pub fn backward(&self, cache: &ForwardCache<T>, truths: &[BinaryMask], loss: LossKind, scale: f64) -> Result<Gradients<T>> {
        if cache.generation != self.generation {
            return Err(Error::invalid("forward cache is stale: parameters changed since forward"));
        }
        if truths.len() != cache.samples.len() {
            return Err(Error::invalid(format!(
                "{} truth masks for a batch of {}",
                truths.len(),
                cache.samples.len()
            )));
        }
        let (h, w) = self.config.input_size;
        for t in truths {
            if t.dims() != (w, h) {
                return Err(Error::DimensionMismatch { expected: (w, h), actual: t.dims() });
            }
        }
        let per_sample: Vec<(Vec<T>, f64)> = cache
            .samples
            .par_iter()
            .zip(truths.par_iter())
            .map(|(s, t)| {
                let l = sample_loss(&s.probs, t.bits(), loss);
                let dz = logit_grad(&s.probs, t.bits(), loss, scale);
                (self.backward_sample(s, dz), l)
            })
            .collect();
        // Fixed sample-order reduction keeps results independent of scheduling.
        let mut values = vec![T::zero(); self.param_count()];
        let mut total = 0.0;
        for (g, l) in &per_sample {
            values.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            total += l;
        }
        let n = per_sample.len().max(1) as f64;
        Ok(Gradients { values, loss: total / n })
    }

    fn backward_sample(&self, s: &SampleCache<T>, dz: Vec<T>) -> Vec<T> {
        let p = &self.params;
        let mut g = vec![T::zero(); self.param_count()];
        let (h, w) = self.config.input_size;
        let dz = Act { c: 1, h, w, data: dz };
        let mut d = conv_backward(&self.layout.head, p, &s.dec[0].a2, &dz, &mut g, true).expect("dx requested");
        let mut skips: Vec<Option<Act<T>>> = vec![None; self.config.depth];
        for (i, dc) in s.dec.iter().enumerate() {
            let specs = &self.layout.decoder[i];
            relu_backward(&dc.a2, &mut d);
            let mut d1 = conv_backward(&specs[2], p, &dc.a1, &d, &mut g, true).expect("dx");
            relu_backward(&dc.a1, &mut d1);
            let dcat = conv_backward(&specs[1], p, &dc.cat, &d1, &mut g, true).expect("dx");
            let (mut du, dskip) = ops::split(&dcat, dc.u.c);
            skips[i] = Some(dskip);
            relu_backward(&dc.u, &mut du);
            let dup = conv_backward(&specs[0], p, &dc.up, &du, &mut g, true).expect("dx");
            d = ops::upsample2_backward(&dup);
        }
        if let Some(mask) = &s.drop_mask {
            d.data.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
        }
        relu_backward(&s.bott_a2, &mut d);
        let mut d1 = conv_backward(&self.layout.bottleneck[1], p, &s.bott_a1, &d, &mut g, true).expect("dx");
        relu_backward(&s.bott_a1, &mut d1);
        d = conv_backward(&self.layout.bottleneck[0], p, &s.bott_in, &d1, &mut g, true).expect("dx");
        for i in (0..self.config.depth).rev() {
            let ec = &s.enc[i];
            let mut da2 = ops::maxpool2_backward(&d, &ec.arg, ec.a2.h, ec.a2.w);
            let skip = skips[i].take().expect("decoder filled every skip");
            da2.data.iter_mut().zip(&skip.data).for_each(|(a, &b)| *a += b);
            relu_backward(&ec.a2, &mut da2);
            let specs = &self.layout.encoder[i];
            let mut d1 = conv_backward(&specs[1], p, &ec.a1, &da2, &mut g, true).expect("dx");
            relu_backward(&ec.a1, &mut d1);
            match conv_backward(&specs[0], p, &ec.x, &d1, &mut g, i > 0) {
                Some(dx) => d = dx,
                None => debug_assert_eq!(i, 0),
            }
        }
        g
    }

    /// One bias-corrected Adam update. With fresh state and zero gradients
    /// the weights stay put.
    pub fn adam_step(&mut self, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.values.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} gradient values for {} parameters",
                grads.values.len(),
                self.params.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let (one, eps) = (T::one(), T::lit(ADAM_EPS));
        let (lr, c1, c2) = (T::lit(lr), T::lit(c1), T::lit(c2));
        for (((w, m), v), &g) in self
            .params
            .iter_mut()
            .zip(&mut self.adam.m)
            .zip(&mut self.adam.v)
            .zip(&grads.values)
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        self.generation += 1;
        Ok(())
    }

    /// Foreground probabilities for one frame, eval mode.
    pub fn predict_probs(&self, frame: &GrayFrame) -> Result<ProbMap> {
        let batch = Tensor4::from_frames([frame])?;
        let (probs, _) = self.forward(&batch, false, 0)?;
        let (w, h) = frame.dims();
        ProbMap::new(w, h, probs.data.iter().map(|v| v.as_f64()).collect())
    }

    /// Foreground iff `p > 0.5`.
    pub fn predict_mask(&self, frame: &GrayFrame) -> Result<BinaryMask> {
        Ok(self.predict_probs(frame)?.threshold(0.5))
    }
}

impl UNet<f32> {
    /// Widens every parameter and the Adam state to `f64`.
    pub fn to_f64(&self) -> UNet<f64> {
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        UNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: widen(&self.params),
            adam: AdamState { m: widen(&self.adam.m), v: widen(&self.adam.v), step: self.adam.step },
            generation: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dropout_p: f64) -> UNetConfig {
        UNetConfig { depth: 1, base_channels: 2, dropout_p, input_size: (8, 8), seed: 3 }
    }

    fn random_batch<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Tensor4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::new([n, 1, h, w], (0..n * h * w).map(|_| T::lit(rng.random::<f64>())).collect()).unwrap()
    }

    fn random_masks(n: usize, h: usize, w: usize, seed: u64) -> Vec<BinaryMask> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| BinaryMask::from_fn(w, h, |_, _| rng.random_bool(0.4))).collect()
    }

    #[test]
    fn default_channel_schedule() {
        let cfg = UNetConfig::default();
        let net = UNet::<f32>::init(cfg.clone()).unwrap();
        let enc: Vec<usize> = net.layout().encoder.iter().map(|s| s[1].cout).collect();
        assert_eq!(enc, vec![8, 16, 32]);
        assert_eq!(net.layout().bottleneck[1].cout, 64);
        // Decoder level i consumes the skip from encoder level i.
        for (i, d) in net.layout().decoder.iter().enumerate() {
            assert_eq!(d[1].cin, 2 * cfg.channels(i));
            assert_eq!(d[0].cin, cfg.channels(i + 1));
        }
        let total: usize = net.layout().convs().iter().map(|c| c.param_len()).sum();
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = UNetConfig::default();
        cfg.input_size = (60, 64);
        assert!(UNet::<f32>::init(cfg).is_err());
        let cfg = UNetConfig { dropout_p: 1.0, ..UNetConfig::default() };
        assert!(UNet::<f32>::init(cfg).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = UNet::<f32>::init(UNetConfig::default()).unwrap();
        let b = UNet::<f32>::init(UNetConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = UNet::<f32>::init(UNetConfig { seed: 1, ..UNetConfig::default() }).unwrap();
        assert_ne!(a.params(), c.params());
        assert!(a.params().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_padding_shape_law() {
        let net = UNet::<f32>::init(UNetConfig::default()).unwrap();
        let batch = random_batch::<f32>(2, 64, 64, 1);
        let (probs, _) = net.forward(&batch, false, 0).unwrap();
        assert_eq!(probs.dims(), [2, 1, 64, 64]);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));

        let cfg = UNetConfig { depth: 2, input_size: (16, 24), ..UNetConfig::default() };
        let net = UNet::<f32>::init(cfg).unwrap();
        let (probs, _) = net.forward(&random_batch::<f32>(1, 16, 24, 2), true, 5).unwrap();
        assert_eq!(probs.dims(), [1, 1, 16, 24]);
    }

    #[test]
    fn zero_weights_give_one_half_and_background() {
        let cfg = UNetConfig::default();
        let n = UNet::<f32>::init(cfg.clone()).unwrap().param_count();
        let net = UNet::from_parts(cfg, vec![0.0f32; n], None).unwrap();
        let (probs, _) = net.forward(&random_batch::<f32>(1, 64, 64, 3), false, 0).unwrap();
        assert!(probs.data().iter().all(|&p| p == 0.5));
        let frame = GrayFrame::from_fn(64, 64, |x, y| (x * 4 + y) as u8).unwrap();
        assert!(net.predict_mask(&frame).unwrap().is_empty());
    }

    #[test]
    fn eval_deterministic_and_zero_dropout_matches_eval() {
        let net = UNet::<f32>::init(UNetConfig { dropout_p: 0.0, ..UNetConfig::default() }).unwrap();
        let batch = random_batch::<f32>(2, 64, 64, 4);
        let (a, _) = net.forward(&batch, false, 0).unwrap();
        let (b, _) = net.forward(&batch, false, 99).unwrap();
        let (c, _) = net.forward(&batch, true, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let net = UNet::<f32>::init(UNetConfig { dropout_p: 0.5, ..UNetConfig::default() }).unwrap();
        let batch = random_batch::<f32>(1, 64, 64, 4);
        let (a, _) = net.forward(&batch, true, 1).unwrap();
        let (b, _) = net.forward(&batch, true, 1).unwrap();
        let (c, _) = net.forward(&batch, true, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        let p = 0.3;
        let value = 2.5f64;
        let trials = 1000;
        let sigma = value * (p / (1.0 - p)).sqrt() / (trials as f64).sqrt();
        for pos in 0..4 {
            let mean: f64 = (0..trials)
                .map(|s| {
                    let mut rng = dropout_rng(s as u64, 0);
                    dropout_mask::<f64>(4, p, &mut rng)[pos] * value
                })
                .sum::<f64>()
                / trials as f64;
            assert!((mean - value).abs() < 3.0 * sigma, "mean {mean} vs {value}");
        }
    }

    #[test]
    fn network_loss_matches_metric_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probs: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let truth = random_masks(1, 8, 8, 9).remove(0);
        let pm = ProbMap::new(8, 8, probs.clone()).unwrap();
        let bce = crate::metrics::bce_loss(&truth, &pm).unwrap();
        let dice = crate::metrics::dice_loss(&truth, &pm).unwrap();
        assert!((sample_loss(&probs, truth.bits(), LossKind::Bce) - bce).abs() < 1e-15);
        assert!((sample_loss(&probs, truth.bits(), LossKind::Dice) - dice).abs() < 1e-15);
    }

    fn mean_loss(net: &UNet<f64>, batch: &Tensor4<f64>, truths: &[BinaryMask], kind: LossKind, seed: u64) -> f64 {
        let (probs, _) = net.forward(batch, true, seed).unwrap();
        let n = truths.len();
        let hw = probs.sample_len();
        (0..n).map(|i| sample_loss(&probs.data()[i * hw..(i + 1) * hw], truths[i].bits(), kind)).sum::<f64>() / n as f64
    }

    /// Central differences against the analytic gradient, relative error with
    /// a small absolute floor for gradients that are numerically zero.
    fn grad_check(kind: LossKind) {
        let mut net = UNet::<f64>::init(tiny(0.25)).unwrap();
        // Small non-zero biases keep ReLUs off their kinks.
        for spec in net.layout().convs() {
            for (j, b) in net.params_mut()[spec.b_off..spec.b_off + spec.cout].iter_mut().enumerate() {
                *b = 0.05 + 0.01 * j as f64;
            }
        }
        let batch = random_batch::<f64>(2, 8, 8, 11);
        let truths = random_masks(2, 8, 8, 12);
        let seed = 21;
        let (_, cache) = net.forward(&batch, true, seed).unwrap();
        let grads = net.backward(&cache, &truths, kind, 0.5).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for j in 0..net.param_count() {
            let orig = net.params()[j];
            net.params_mut()[j] = orig + h;
            let up = mean_loss(&net, &batch, &truths, kind, seed);
            net.params_mut()[j] = orig - h;
            let down = mean_loss(&net, &batch, &truths, kind, seed);
            net.params_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.values[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{kind:?} param {j}: analytic {analytic} numeric {numeric}");
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_bce() {
        grad_check(LossKind::Bce);
    }

    #[test]
    fn gradients_match_finite_differences_dice() {
        grad_check(LossKind::Dice);
    }

    #[test]
    fn gradient_is_linear_in_scale() {
        let net = UNet::<f64>::init(tiny(0.1)).unwrap();
        let batch = random_batch::<f64>(2, 8, 8, 1);
        let truths = random_masks(2, 8, 8, 2);
        let (_, cache) = net.forward(&batch, true, 4).unwrap();
        let g1 = net.backward(&cache, &truths, LossKind::Dice, 1.0).unwrap();
        let g2 = net.backward(&cache, &truths, LossKind::Dice, 2.0).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn saturated_optimum_has_zero_gradient() {
        // One foreground pixel problem; a large head bias drives every
        // probability to exactly 1.0, the Dice optimum.
        let mut net = UNet::<f64>::init(tiny(0.0)).unwrap();
        let head_b = net.layout().head.b_off;
        net.params_mut()[head_b] = 1e3;
        let batch = random_batch::<f64>(1, 8, 8, 5);
        let truth = vec![BinaryMask::from_fn(8, 8, |_, _| true)];
        let (probs, cache) = net.forward(&batch, false, 0).unwrap();
        assert!(probs.data().iter().all(|&p| p == 1.0));
        let g = net.backward(&cache, &truth, LossKind::Dice, 1.0).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = UNet::<f64>::init(tiny(0.0)).unwrap();
        let batch = random_batch::<f64>(1, 8, 8, 5);
        let truths = random_masks(1, 8, 8, 6);
        let (_, cache) = net.forward(&batch, false, 0).unwrap();
        let g = net.backward(&cache, &truths, LossKind::Bce, 1.0).unwrap();
        net.adam_step(&g, 1e-3).unwrap();
        assert!(net.backward(&cache, &truths, LossKind::Bce, 1.0).is_err());
        assert!(net.backward(&cache, &random_masks(2, 8, 8, 1), LossKind::Bce, 1.0).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_weights() {
        let mut net = UNet::<f32>::init(tiny(0.0)).unwrap();
        let before = net.params().to_vec();
        let zero = Gradients { values: vec![0.0; net.param_count()], loss: 0.0 };
        net.adam_step(&zero, 1e-3).unwrap();
        assert_eq!(net.params(), &before[..]);
        assert_eq!(net.adam_state().step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut net = UNet::<f64>::init(tiny(0.0)).unwrap();
        let before = net.params().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..net.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = Gradients { values: values.clone(), loss: 0.0 };
        let mut twin = net.clone();
        net.adam_step(&grads, 1e-3).unwrap();
        twin.adam_step(&grads, 1e-3).unwrap();
        assert_eq!(net, twin);
        for ((a, b), g) in net.params().iter().zip(&before).zip(&values) {
            let step = a - b;
            let expected = -1e-3 * g.signum();
            assert!((step - expected).abs() < 1e-3 * 1e-4 / g.abs().min(1.0), "{step} vs {expected}");
        }
    }

    #[test]
    fn adam_rejects_wrong_shape() {
        let mut net = UNet::<f32>::init(tiny(0.0)).unwrap();
        let bad = Gradients { values: vec![0.0; 3], loss: 0.0 };
        assert!(net.adam_step(&bad, 1e-3).is_err());
    }
}
