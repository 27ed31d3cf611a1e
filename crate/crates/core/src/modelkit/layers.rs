//! Trainable layer implementations over `(n, h, w, c)` tensors.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{self, ConvGeom, Padding2};
use super::winograd;
use super::spec::{Activation, LayerSpec, Padding, Shape};

/// Batch-major NHWC activations. Flat activations are `(n, 1, 1, len)`.
pub type Tensor = Array4<f32>;

/// Weight gradients are accumulated over at most this many image chunks,
/// then reduced in chunk order, so results do not depend on thread count.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn zeros(len: usize) -> Self {
        Param {
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    fn uniform(len: usize, fan_in: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let scale = if activation == Activation::Relu { 6.0 } else { 3.0 };
        let limit = (scale / fan_in.max(1) as f64).sqrt() as f32;
        Param {
            value: (0..len).map(|_| rng.random_range(-limit..=limit)).collect(),
            grad: vec![0.0; len],
        }
    }
}

pub(crate) trait Layer: Send + Sync {
    /// Inference without caching.
    fn infer(&self, x: &Tensor) -> Tensor;

    /// Training forward pass; keeps whatever `backward` needs.
    fn forward(&mut self, x: Tensor) -> Tensor;

    /// Accumulates parameter gradients and returns the input gradient when
    /// `input_grad` is set.
    fn backward(&mut self, grad: Tensor, input_grad: bool) -> Option<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn clear_cache(&mut self) {}

    /// Moves out whatever `forward` kept for `backward`.
    fn take_cache(&mut self) -> Cache {
        Box::new(())
    }

    /// Restores a cache produced by [`Layer::take_cache`] on this layer.
    fn put_cache(&mut self, _cache: Cache) {}
}

/// Opaque per-layer training state, see [`Layer::take_cache`].
pub(crate) type Cache = Box<dyn std::any::Any + Send>;

fn activate(x: &mut [f32], act: Activation) {
    match act {
        Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => x.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::None => {}
    }
}

/// Multiplies `grad` by the activation derivative expressed through the output.
fn activate_backward(grad: &mut [f32], out: &[f32], act: Activation) {
    match act {
        Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        }),
        Activation::Sigmoid => grad.iter_mut().zip(out).for_each(|(g, &o)| *g *= o * (1.0 - o)),
        Activation::None => {}
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zeros(n: usize, s: Shape) -> Tensor {
    let (h, w, c) = s.hwc();
    Tensor::zeros((n, h, w, c))
}

fn slice(x: &Tensor) -> &[f32] {
    x.as_slice().expect("tensors are kept in standard layout")
}

fn slice_mut(x: &mut Tensor) -> &mut [f32] {
    x.as_slice_mut().expect("tensors are kept in standard layout")
}

#[derive(Default)]
struct Scratch {
    a: Vec<f32>,
    b: Vec<f32>,
    c: Vec<f32>,
    d: Vec<f32>,
    wino: winograd::Workspace,
}

/// Runs `f(image, dw, dx_image, scratch)` over the batch in a fixed number
/// of chunks and returns the summed weight gradient.
fn accumulate<F>(n: usize, wlen: usize, dx: Option<&mut [f32]>, f: F) -> Vec<f32>
where
    F: Fn(usize, &mut [f32], Option<&mut [f32]>, &mut Scratch) + Sync,
{
    let chunk = n.div_ceil(GRAD_CHUNKS).max(1);
    let partials: Vec<Vec<f32>> = match dx {
        Some(dx) => {
            let img_len = dx.len() / n;
            dx.par_chunks_mut(chunk * img_len)
                .enumerate()
                .map(|(ci, dxc)| {
                    let mut dw = vec![0.0; wlen];
                    let mut s = Scratch::default();
                    for (j, dxi) in dxc.chunks_mut(img_len).enumerate() {
                        f(ci * chunk + j, &mut dw, Some(dxi), &mut s);
                    }
                    dw
                })
                .collect()
        }
        None => (0..n.div_ceil(chunk))
            .into_par_iter()
            .map(|ci| {
                let mut dw = vec![0.0; wlen];
                let mut s = Scratch::default();
                for i in ci * chunk..n.min((ci + 1) * chunk) {
                    f(i, &mut dw, None, &mut s);
                }
                dw
            })
            .collect(),
    };
    let mut total = vec![0.0; wlen];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    total
}

fn add_bias_grad(bias: &mut Param, grad: &[f32]) {
    let f = bias.grad.len();
    for row in grad.chunks(f) {
        bias.grad.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
}

/// What backward needs to differentiate an activation.
enum ActCache {
    Identity,
    /// `output > 0` for relu.
    Mask(Vec<bool>),
    Output(Vec<f32>),
}

impl ActCache {
    fn new(out: &[f32], act: Activation) -> Self {
        match act {
            Activation::None => ActCache::Identity,
            Activation::Relu => ActCache::Mask(out.iter().map(|&v| v > 0.0).collect()),
            Activation::Sigmoid => ActCache::Output(out.to_vec()),
        }
    }

    fn apply(&self, grad: &mut [f32]) {
        match self {
            ActCache::Identity => {}
            ActCache::Mask(m) => grad.iter_mut().zip(m).for_each(|(g, &on)| {
                if !on {
                    *g = 0.0
                }
            }),
            ActCache::Output(o) => grad.iter_mut().zip(o).for_each(|(g, &o)| *g *= o * (1.0 - o)),
        }
    }
}

/// Adds the per-channel bias and applies the activation in one pass.
fn bias_activate(o: &mut [f32], bias: &[f32], act: Activation) {
    let rows = o.chunks_exact_mut(bias.len());
    match act {
        Activation::None => rows.for_each(|r| r.iter_mut().zip(bias).for_each(|(v, b)| *v += b)),
        Activation::Relu => rows.for_each(|r| r.iter_mut().zip(bias).for_each(|(v, b)| *v = (*v + b).max(0.0))),
        Activation::Sigmoid => rows.for_each(|r| r.iter_mut().zip(bias).for_each(|(v, b)| *v = sigmoid(*v + b))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvPath {
    /// 3×3 stride 1 over enough channels.
    Winograd,
    /// Stride 1, strided views of the input.
    Direct,
    /// Strided or few-channel convolutions.
    Im2col,
}

pub(crate) struct Conv2d {
    geom: ConvGeom,
    pad: Padding2,
    activation: Activation,
    weight: Param,
    bias: Param,
    out_shape: Shape,
    cache: Option<(Tensor, ActCache)>,
}

impl Conv2d {
    fn padded_geom(&self) -> ConvGeom {
        ConvGeom {
            h: self.geom.h + self.pad.top + self.pad.bottom,
            w: self.geom.w + self.pad.left + self.pad.right,
            ..self.geom
        }
    }

    fn path(&self) -> ConvPath {
        let g = self.geom;
        match (g.stride, g.kh, g.kw) {
            ((1, 1), 3, 3) if g.c >= 8 => ConvPath::Winograd,
            ((1, 1), _, _) if g.c >= 8 => ConvPath::Direct,
            _ => ConvPath::Im2col,
        }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let n = x.dim().0;
        let mut out = zeros(n, self.out_shape);
        let in_len = self.geom.h * self.geom.w * self.geom.c;
        let out_len = self.out_shape.len();
        let pg = self.padded_geom();
        let xs = slice(x);
        let path = self.path();
        let u = (path == ConvPath::Winograd).then(|| winograd::transform_kernel(&self.weight.value, pg.c, pg.f));
        slice_mut(&mut out)
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each_init(Scratch::default, |s, (i, o)| {
                let img = &xs[i * in_len..(i + 1) * in_len];
                let src: &[f32] = if self.pad.is_zero() {
                    img
                } else {
                    ops::pad_hwc(img, self.geom.h, self.geom.w, self.geom.c, self.pad, &mut s.a);
                    &s.a
                };
                match &u {
                    Some(u) => winograd::forward(src, pg.h, pg.w, pg.c, pg.f, u, o, &mut s.wino),
                    None if path == ConvPath::Direct => ops::conv_s1(src, pg, &self.weight.value, o, &mut s.b),
                    None => ops::conv_general(src, pg, &self.weight.value, o, &mut s.b),
                }
                bias_activate(o, &self.bias.value, self.activation);
            });
        out
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let out = self.run(&x);
        self.cache = Some((x, ActCache::new(slice(&out), self.activation)));
        out
    }

    fn backward(&mut self, mut grad: Tensor, input_grad: bool) -> Option<Tensor> {
        let (x, act) = self.cache.take().expect("backward without forward");
        act.apply(slice_mut(&mut grad));
        drop(act);
        add_bias_grad(&mut self.bias, slice(&grad));

        let n = x.dim().0;
        let g = self.geom;
        let pad = self.pad;
        let pg = self.padded_geom();
        let in_len = g.h * g.w * g.c;
        let out_len = self.out_shape.len();
        let padded_len = pg.h * pg.w * pg.c;
        let xs = slice(&x);
        let gs = slice(&grad);
        let weights = &self.weight.value;
        let path = self.path();
        let mut dx = input_grad.then(|| Tensor::zeros(x.dim()));

        // Per-path kernel views, built once for the batch.
        let ut = (path == ConvPath::Winograd && input_grad)
            .then(|| winograd::transpose_kernel(&winograd::transform_kernel(weights, g.c, g.f), g.c, g.f));
        let flipped = (path == ConvPath::Direct && input_grad).then(|| ops::flip_kernel(weights, g.kh, g.kw, g.c, g.f));
        let wlen = match path {
            ConvPath::Winograd => winograd::kernel_len(g.c, g.f),
            _ => weights.len(),
        };

        let dw = accumulate(n, wlen, dx.as_mut().map(slice_mut), |i, dw, dxi, s| {
            let img = &xs[i * in_len..(i + 1) * in_len];
            let gi = &gs[i * out_len..(i + 1) * out_len];
            let src: &[f32] = if pad.is_zero() {
                img
            } else {
                ops::pad_hwc(img, g.h, g.w, g.c, pad, &mut s.a);
                &s.a
            };
            // Input gradient at padded size, cropped afterwards when padded.
            let mut dxi = dxi;
            let mut full = (dxi.is_some() && !pad.is_zero()).then(|| {
                let mut buf = std::mem::take(&mut s.c);
                buf.clear();
                buf.resize(padded_len, 0.0);
                buf
            });
            let target = match full.as_mut() {
                Some(buf) => Some(buf.as_mut_slice()),
                None => dxi.as_deref_mut(),
            };
            match path {
                ConvPath::Winograd => {
                    let ut = ut.as_deref().unwrap_or(&[]);
                    winograd::backward(src, pg.h, pg.w, g.c, g.f, ut, gi, dw, target, &mut s.wino);
                }
                ConvPath::Direct => {
                    ops::conv_s1_weight_grad(src, pg, gi, dw, &mut s.b);
                    if let Some(t) = target {
                        let flipped = flipped.as_deref().expect("flipped kernel");
                        let mut pad_buf = std::mem::take(&mut s.d);
                        ops::conv_s1_input_grad(gi, pg, flipped, t, &mut pad_buf, &mut s.b);
                        s.d = pad_buf;
                    }
                }
                ConvPath::Im2col => ops::conv_general_backward(src, pg, weights, gi, dw, target, &mut s.b),
            }
            if let (Some(buf), Some(d)) = (full, dxi) {
                ops::crop_hwc(&buf, g.h, g.w, g.c, pad, d);
                s.c = buf;
            }
        });
        let dw = match path {
            ConvPath::Winograd => winograd::kernel_grad(&dw, g.c, g.f),
            _ => dw,
        };
        self.weight.grad.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn take_cache(&mut self) -> Cache {
        Box::new(self.cache.take())
    }

    fn put_cache(&mut self, cache: Cache) {
        self.cache = *cache.downcast().expect("cache from the same layer");
    }
}

pub(crate) struct DepthwiseConv2d {
    geom: ConvGeom,
    pad: Padding2,
    activation: Activation,
    weight: Param,
    bias: Param,
    out_shape: Shape,
    cache: Option<(Tensor, Tensor)>,
}

impl DepthwiseConv2d {
    fn padded_geom(&self) -> ConvGeom {
        ConvGeom {
            h: self.geom.h + self.pad.top + self.pad.bottom,
            w: self.geom.w + self.pad.left + self.pad.right,
            ..self.geom
        }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let n = x.dim().0;
        let mut out = zeros(n, self.out_shape);
        let g = self.geom;
        let pg = self.padded_geom();
        let (oh, ow) = pg.out_hw();
        let in_len = g.h * g.w * g.c;
        let xs = slice(x);
        slice_mut(&mut out)
            .par_chunks_mut(self.out_shape.len())
            .enumerate()
            .for_each_init(Vec::new, |buf, (i, o)| {
                ops::pad_hwc(&xs[i * in_len..(i + 1) * in_len], g.h, g.w, g.c, self.pad, buf);
                for r in 0..oh {
                    for q in 0..ow {
                        let dst = &mut o[(r * ow + q) * g.c..][..g.c];
                        dst.copy_from_slice(&self.bias.value);
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let src = ((r * pg.stride.0 + ki) * pg.w + q * pg.stride.1 + kj) * g.c;
                                let w = &self.weight.value[(ki * g.kw + kj) * g.c..][..g.c];
                                for ((d, &xv), &wv) in dst.iter_mut().zip(&buf[src..src + g.c]).zip(w) {
                                    *d += xv * wv;
                                }
                            }
                        }
                    }
                }
                activate(o, self.activation);
            });
        out
    }
}

impl Layer for DepthwiseConv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let out = self.run(&x);
        self.cache = Some((x, out.clone()));
        out
    }

    fn backward(&mut self, mut grad: Tensor, input_grad: bool) -> Option<Tensor> {
        let (x, out) = self.cache.take().expect("backward without forward");
        activate_backward(slice_mut(&mut grad), slice(&out), self.activation);
        drop(out);
        add_bias_grad(&mut self.bias, slice(&grad));
        let n = x.dim().0;
        let g = self.geom;
        let pad = self.pad;
        let pg = self.padded_geom();
        let (oh, ow) = pg.out_hw();
        let in_len = g.h * g.w * g.c;
        let out_len = self.out_shape.len();
        let xs = slice(&x);
        let gs = slice(&grad);
        let weights = &self.weight.value;
        let mut dx = input_grad.then(|| Tensor::zeros(x.dim()));
        let dw = accumulate(n, weights.len(), dx.as_mut().map(slice_mut), |i, dw, dxi, s| {
            ops::pad_hwc(&xs[i * in_len..(i + 1) * in_len], g.h, g.w, g.c, pad, &mut s.a);
            let want_dx = dxi.is_some();
            if want_dx {
                s.b.clear();
                s.b.resize(pg.h * pg.w * g.c, 0.0);
            }
            let gi = &gs[i * out_len..(i + 1) * out_len];
            for r in 0..oh {
                for q in 0..ow {
                    let go = &gi[(r * ow + q) * g.c..][..g.c];
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let src = ((r * pg.stride.0 + ki) * pg.w + q * pg.stride.1 + kj) * g.c;
                            let widx = (ki * g.kw + kj) * g.c;
                            for ch in 0..g.c {
                                dw[widx + ch] += go[ch] * s.a[src + ch];
                                if want_dx {
                                    s.b[src + ch] += go[ch] * weights[widx + ch];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dxi) = dxi {
                ops::crop_hwc(&s.b, g.h, g.w, g.c, pad, dxi);
            }
        });
        self.weight.grad.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn take_cache(&mut self) -> Cache {
        Box::new(self.cache.take())
    }

    fn put_cache(&mut self, cache: Cache) {
        self.cache = *cache.downcast().expect("cache from the same layer");
    }
}

pub(crate) struct MaxPool2d {
    input: Shape,
    out_shape: Shape,
    pool: (usize, usize),
    stride: (usize, usize),
    /// Per output element, the winning offset inside its window.
    cache: Option<Vec<u16>>,
}

impl MaxPool2d {
    fn run(&self, x: &Tensor, track: bool) -> (Tensor, Vec<u16>) {
        let n = x.dim().0;
        let (h, w, c) = self.input.hwc();
        let (oh, ow, _) = self.out_shape.hwc();
        let mut out = zeros(n, self.out_shape);
        let out_len = self.out_shape.len();
        let mut arg = if track { vec![0u16; n * out_len] } else { Vec::new() };
        let xs = slice(x);
        let (ph, pw) = self.pool;
        let (sh, sw) = self.stride;
        // Channel runs are innermost so every comparison is over a contiguous slice.
        let work = |i: usize, o: &mut [f32], mut a: Option<&mut [u16]>| {
            let img = &xs[i * h * w * c..(i + 1) * h * w * c];
            for r in 0..oh {
                for q in 0..ow {
                    let idx = (r * ow + q) * c;
                    let dst = &mut o[idx..idx + c];
                    let first = (r * sh * w + q * sw) * c;
                    dst.copy_from_slice(&img[first..first + c]);
                    let mut arg = a.as_deref_mut().map(|a| &mut a[idx..idx + c]);
                    for ki in 0..ph {
                        for kj in 0..pw {
                            if ki == 0 && kj == 0 {
                                continue;
                            }
                            let src = &img[((r * sh + ki) * w + q * sw + kj) * c..][..c];
                            match arg.as_deref_mut() {
                                Some(arg) => {
                                    let code = (ki * pw + kj) as u16;
                                    for ((d, at), &v) in dst.iter_mut().zip(arg.iter_mut()).zip(src) {
                                        if v > *d {
                                            *d = v;
                                            *at = code;
                                        }
                                    }
                                }
                                None => dst.iter_mut().zip(src).for_each(|(d, &v)| {
                                    if v > *d {
                                        *d = v
                                    }
                                }),
                            }
                        }
                    }
                }
            }
        };
        let os = slice_mut(&mut out);
        if track {
            os.par_chunks_mut(out_len)
                .zip(arg.par_chunks_mut(out_len))
                .enumerate()
                .for_each(|(i, (o, a))| work(i, o, Some(a)));
        } else {
            os.par_chunks_mut(out_len).enumerate().for_each(|(i, o)| work(i, o, None));
        }
        (out, arg)
    }
}

impl Layer for MaxPool2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x, false).0
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let (out, arg) = self.run(&x, true);
        self.cache = Some(arg);
        out
    }

    fn backward(&mut self, grad: Tensor, input_grad: bool) -> Option<Tensor> {
        let arg = self.cache.take().expect("backward without forward");
        if !input_grad {
            return None;
        }
        let n = grad.dim().0;
        let (_, w, c) = self.input.hwc();
        let (oh, ow, _) = self.out_shape.hwc();
        let out_len = self.out_shape.len();
        let in_len = self.input.len();
        let mut dx = zeros(n, self.input);
        let gs = slice(&grad);
        let pw = self.pool.1;
        let (sh, sw) = self.stride;
        slice_mut(&mut dx).par_chunks_mut(in_len).enumerate().for_each(|(i, d)| {
            let g = &gs[i * out_len..(i + 1) * out_len];
            let a = &arg[i * out_len..(i + 1) * out_len];
            let ph = self.pool.0;
            for r in 0..oh {
                for q in 0..ow {
                    let idx = (r * ow + q) * c;
                    let (gr, ar) = (&g[idx..idx + c], &a[idx..idx + c]);
                    for ki in 0..ph {
                        for kj in 0..pw {
                            let code = (ki * pw + kj) as u16;
                            let dst = &mut d[((r * sh + ki) * w + q * sw + kj) * c..][..c];
                            for ((d, &gv), &at) in dst.iter_mut().zip(gr).zip(ar) {
                                *d += if at == code { gv } else { 0.0 };
                            }
                        }
                    }
                }
            }
        });
        Some(dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn take_cache(&mut self) -> Cache {
        Box::new(self.cache.take())
    }

    fn put_cache(&mut self, cache: Cache) {
        self.cache = *cache.downcast().expect("cache from the same layer");
    }
}

pub(crate) struct GlobalAvgPool {
    input: Shape,
}

impl Layer for GlobalAvgPool {
    fn infer(&self, x: &Tensor) -> Tensor {
        let n = x.dim().0;
        let (h, w, c) = self.input.hwc();
        let mut out = Tensor::zeros((n, 1, 1, c));
        let xs = slice(x);
        let scale = 1.0 / (h * w) as f32;
        for (i, o) in slice_mut(&mut out).chunks_mut(c).enumerate() {
            for px in xs[i * h * w * c..(i + 1) * h * w * c].chunks(c) {
                o.iter_mut().zip(px).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|v| *v *= scale);
        }
        out
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        self.infer(&x)
    }

    fn backward(&mut self, grad: Tensor, input_grad: bool) -> Option<Tensor> {
        if !input_grad {
            return None;
        }
        let n = grad.dim().0;
        let (h, w, c) = self.input.hwc();
        let scale = 1.0 / (h * w) as f32;
        let mut dx = zeros(n, self.input);
        let gs = slice(&grad);
        for (i, d) in slice_mut(&mut dx).chunks_mut(h * w * c).enumerate() {
            let g = &gs[i * c..(i + 1) * c];
            for px in d.chunks_mut(c) {
                px.iter_mut().zip(g).for_each(|(a, b)| *a = b * scale);
            }
        }
        Some(dx)
    }
}

pub(crate) struct Flatten {
    input: Shape,
}

impl Layer for Flatten {
    fn infer(&self, x: &Tensor) -> Tensor {
        let n = x.dim().0;
        x.to_shape((n, 1, 1, self.input.len()))
            .expect("standard layout")
            .to_owned()
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let n = x.dim().0;
        x.into_shape_with_order((n, 1, 1, self.input.len())).expect("standard layout")
    }

    fn backward(&mut self, grad: Tensor, input_grad: bool) -> Option<Tensor> {
        let n = grad.dim().0;
        let (h, w, c) = self.input.hwc();
        input_grad.then(|| grad.into_shape_with_order((n, h, w, c)).expect("standard layout"))
    }
}

pub(crate) struct Dense {
    inputs: usize,
    units: usize,
    activation: Activation,
    weight: Param,
    bias: Param,
    cache: Option<(Tensor, Tensor)>,
}

impl Dense {
    fn run(&self, x: &Tensor) -> Tensor {
        let n = x.dim().0;
        let mut out = Tensor::zeros((n, 1, 1, self.units));
        let o = slice_mut(&mut out);
        for row in o.chunks_mut(self.units) {
            row.copy_from_slice(&self.bias.value);
        }
        ops::gemm(
            n,
            self.inputs,
            self.units,
            slice(x),
            self.inputs,
            1,
            &self.weight.value,
            self.units,
            1,
            1.0,
            o,
            self.units,
            1,
        );
        activate(o, self.activation);
        out
    }
}

impl Layer for Dense {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let out = self.run(&x);
        self.cache = Some((x, out.clone()));
        out
    }

    fn backward(&mut self, mut grad: Tensor, input_grad: bool) -> Option<Tensor> {
        let (x, out) = self.cache.take().expect("backward without forward");
        activate_backward(slice_mut(&mut grad), slice(&out), self.activation);
        let n = x.dim().0;
        let (k, u) = (self.inputs, self.units);
        let gs = slice(&grad);
        add_bias_grad(&mut self.bias, gs);
        // dW += Xᵀ · G
        ops::gemm(k, n, u, slice(&x), 1, k, gs, u, 1, 1.0, &mut self.weight.grad, u, 1);
        input_grad.then(|| {
            let mut dx = Tensor::zeros((n, 1, 1, k));
            // dX = G · Wᵀ
            ops::gemm(n, u, k, gs, u, 1, &self.weight.value, 1, u, 0.0, slice_mut(&mut dx), k, 1);
            dx.into_shape_with_order(x.dim()).expect("standard layout")
        })
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn take_cache(&mut self) -> Cache {
        Box::new(self.cache.take())
    }

    fn put_cache(&mut self, cache: Cache) {
        self.cache = *cache.downcast().expect("cache from the same layer");
    }
}

pub(crate) struct ReplicateChannels {
    channels: usize,
}

impl Layer for ReplicateChannels {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, h, w, _) = x.dim();
        let mut out = Tensor::zeros((n, h, w, self.channels));
        for (o, &v) in slice_mut(&mut out).chunks_mut(self.channels).zip(slice(x)) {
            o.fill(v);
        }
        out
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        self.infer(&x)
    }

    fn backward(&mut self, grad: Tensor, input_grad: bool) -> Option<Tensor> {
        let (n, h, w, _) = grad.dim();
        input_grad.then(|| {
            let mut dx = Tensor::zeros((n, h, w, 1));
            for (d, g) in slice_mut(&mut dx).iter_mut().zip(slice(&grad).chunks(self.channels)) {
                *d = g.iter().sum();
            }
            dx
        })
    }
}

pub(crate) struct Residual {
    body: Vec<Box<dyn Layer>>,
    shortcut: Vec<Box<dyn Layer>>,
    activation: Activation,
    cache: Option<Tensor>,
}

fn chain_infer(layers: &[Box<dyn Layer>], x: &Tensor) -> Tensor {
    match layers.split_first() {
        None => x.clone(),
        Some((first, rest)) => rest.iter().fold(first.infer(x), |t, l| l.infer(&t)),
    }
}

fn chain_forward(layers: &mut [Box<dyn Layer>], x: Tensor) -> Tensor {
    layers.iter_mut().fold(x, |t, l| l.forward(t))
}

fn chain_backward(layers: &mut [Box<dyn Layer>], grad: Tensor) -> Tensor {
    layers
        .iter_mut()
        .rev()
        .fold(grad, |g, l| l.backward(g, true).expect("input grad requested"))
}

impl Layer for Residual {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = chain_infer(&self.body, x);
        out += &chain_infer(&self.shortcut, x);
        activate(slice_mut(&mut out), self.activation);
        out
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let side = chain_forward(&mut self.shortcut, x.clone());
        let mut out = chain_forward(&mut self.body, x);
        out += &side;
        activate(slice_mut(&mut out), self.activation);
        self.cache = Some(out.clone());
        out
    }

    fn backward(&mut self, mut grad: Tensor, input_grad: bool) -> Option<Tensor> {
        let out = self.cache.take().expect("backward without forward");
        activate_backward(slice_mut(&mut grad), slice(&out), self.activation);
        drop(out);
        let mut dx = chain_backward(&mut self.body, grad.clone());
        dx += &chain_backward(&mut self.shortcut, grad);
        input_grad.then_some(dx)
    }

    fn params(&self) -> Vec<&Param> {
        self.body.iter().chain(&self.shortcut).flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.body
            .iter_mut()
            .chain(self.shortcut.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        self.body.iter_mut().chain(self.shortcut.iter_mut()).for_each(|l| l.clear_cache());
    }

    fn take_cache(&mut self) -> Cache {
        let inner: Vec<Cache> = self.body.iter_mut().chain(self.shortcut.iter_mut()).map(|l| l.take_cache()).collect();
        Box::new((self.cache.take(), inner))
    }

    fn put_cache(&mut self, cache: Cache) {
        let (own, inner): (Option<Tensor>, Vec<Cache>) = *cache.downcast().expect("cache from the same layer");
        self.cache = own;
        for (l, c) in self.body.iter_mut().chain(self.shortcut.iter_mut()).zip(inner) {
            l.put_cache(c);
        }
    }
}

/// Instantiates one layer for a known input shape. The spec must already
/// have passed shape inference.
pub(crate) fn build(spec: &LayerSpec, input: Shape, rng: &mut ChaCha8Rng) -> Box<dyn Layer> {
    let (out_shape, _) = spec.infer(input).expect("spec validated before build");
    let (h, w, c) = input.hwc();
    let padding = |kernel, stride, padding| match padding {
        Padding::Valid => Padding2::default(),
        Padding::Same => Padding2::same(h, w, kernel, stride),
    };
    match spec {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            padding: p,
            activation,
        } => {
            let geom = ConvGeom {
                h,
                w,
                c,
                kh: kernel.0,
                kw: kernel.1,
                f: *filters,
                stride: *stride,
            };
            let fan_in = geom.patch_len();
            Box::new(Conv2d {
                geom,
                pad: padding(*kernel, *stride, *p),
                activation: *activation,
                weight: Param::uniform(fan_in * filters, fan_in, *activation, rng),
                bias: Param::zeros(*filters),
                out_shape,
                cache: None,
            })
        }
        LayerSpec::DepthwiseConv2d {
            kernel,
            stride,
            padding: p,
            activation,
        } => {
            let geom = ConvGeom {
                h,
                w,
                c,
                kh: kernel.0,
                kw: kernel.1,
                f: c,
                stride: *stride,
            };
            let fan_in = kernel.0 * kernel.1;
            Box::new(DepthwiseConv2d {
                geom,
                pad: padding(*kernel, *stride, *p),
                activation: *activation,
                weight: Param::uniform(fan_in * c, fan_in, *activation, rng),
                bias: Param::zeros(c),
                out_shape,
                cache: None,
            })
        }
        LayerSpec::Maxpool2d { pool, stride } => Box::new(MaxPool2d {
            input,
            out_shape,
            pool: *pool,
            stride: *stride,
            cache: None,
        }),
        LayerSpec::GlobalAvgPool => Box::new(GlobalAvgPool { input }),
        LayerSpec::Flatten => Box::new(Flatten { input }),
        LayerSpec::Dense { units, activation } => {
            let inputs = input.len();
            Box::new(Dense {
                inputs,
                units: *units,
                activation: *activation,
                weight: Param::uniform(inputs * units, inputs, *activation, rng),
                bias: Param::zeros(*units),
                cache: None,
            })
        }
        LayerSpec::ReplicateChannels { channels } => Box::new(ReplicateChannels { channels: *channels }),
        LayerSpec::Residual {
            body,
            shortcut,
            activation,
        } => Box::new(Residual {
            body: build_chain(body, input, rng),
            shortcut: build_chain(shortcut, input, rng),
            activation: *activation,
            cache: None,
        }),
    }
}

pub(crate) fn build_chain(specs: &[LayerSpec], mut input: Shape, rng: &mut ChaCha8Rng) -> Vec<Box<dyn Layer>> {
    specs
        .iter()
        .map(|s| {
            let layer = build(s, input, rng);
            input = s.infer(input).expect("spec validated before build").0;
            layer
        })
        .collect()
}

/// Replaces the output activation of a dense layer, used to fuse the final
/// sigmoid into the loss.
pub(crate) fn build_logit_dense(spec: &LayerSpec, input: Shape, rng: &mut ChaCha8Rng) -> Box<dyn Layer> {
    match spec {
        LayerSpec::Dense { units, activation } => {
            let inputs = input.len();
            Box::new(Dense {
                inputs,
                units: *units,
                activation: Activation::None,
                weight: Param::uniform(inputs * units, inputs, *activation, rng),
                bias: Param::zeros(*units),
                cache: None,
            })
        }
        _ => build(spec, input, rng),
    }
}
