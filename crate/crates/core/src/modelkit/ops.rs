//! Single-image kernels on HWC-contiguous `f32` buffers.
//!
//! Convolution weights are laid out `(kh, kw, in_channels, filters)`, so
//! the weight matrix is `(kh·kw·c) × f` and output rows are pixel positions.
//! Stride-1 convolutions avoid im2col: for a fixed kernel row `ki`, the
//! patch rows of all output positions form a strided view of the input
//! itself (row stride `c`, unit column stride), so each kernel row is one
//! GEMM straight over the input buffer. Output positions are computed at
//! full input width and the `kw - 1` wrap-around columns are discarded.

/// Inner-dimension block for the register-tiled kernel, so the B panel
/// stays in cache; longer products run as several accumulating passes.
const SIMD_MAX_K: usize = 2048;

/// `c = a · b + beta · c` for row/column-strided matrices.
///
/// Panics if any operand would be read or written out of bounds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    #[cfg(target_arch = "x86_64")]
    if csb == 1 && csc == 1 && n >= 16 && super::simd::available() {
        let n16 = n / 16 * 16;
        let mut k0 = 0;
        while k0 < k {
            let kb = SIMD_MAX_K.min(k - k0);
            let beta = if k0 == 0 { beta } else { 1.0 };
            // SAFETY: feature checked; bounds asserted above for the full width.
            unsafe {
                super::simd::gemm(
                    m,
                    kb,
                    n16,
                    a.as_ptr().add(k0 * csa),
                    rsa,
                    csa,
                    b.as_ptr().add(k0 * rsb),
                    rsb,
                    beta,
                    c.as_mut_ptr(),
                    rsc,
                );
            }
            k0 += kb;
        }
        if n16 < n {
            gemm(m, k, n - n16, a, rsa, csa, &b[n16..], rsb, 1, beta, &mut c[n16..], rsc, 1);
        }
        return;
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of one convolution on an unpadded `h × w × c` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub stride: (usize, usize),
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h - self.kh) / self.stride.0 + 1, (self.w - self.kw) / self.stride.1 + 1)
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

/// Stride-1 valid convolution, no bias. `out` is `oh × ow × f`.
pub(crate) fn conv_s1(x: &[f32], g: ConvGeom, weights: &[f32], out: &mut [f32], scratch: &mut Vec<f32>) {
    debug_assert_eq!(g.stride, (1, 1));
    let (oh, ow) = g.out_hw();
    let rows = oh * g.w - (g.kw - 1);
    let row_len = g.kw * g.c;
    scratch.clear();
    scratch.resize(rows * g.f, 0.0);
    for ki in 0..g.kh {
        gemm(
            rows,
            row_len,
            g.f,
            &x[ki * g.w * g.c..],
            g.c,
            1,
            &weights[ki * row_len * g.f..(ki + 1) * row_len * g.f],
            g.f,
            1,
            if ki == 0 { 0.0 } else { 1.0 },
            scratch,
            g.f,
            1,
        );
    }
    for r in 0..oh {
        let src = &scratch[r * g.w * g.f..][..ow * g.f];
        out[r * ow * g.f..][..ow * g.f].copy_from_slice(src);
    }
}

/// Accumulates the stride-1 weight gradient: `dw += patchesᵀ · grad`.
/// `grad` is `oh × ow × f`.
pub(crate) fn conv_s1_weight_grad(x: &[f32], g: ConvGeom, grad: &[f32], dw: &mut [f32], scratch: &mut Vec<f32>) {
    let (oh, ow) = g.out_hw();
    let rows = oh * g.w - (g.kw - 1);
    let row_len = g.kw * g.c;
    // Gradient at full input width, zero in the wrap-around columns.
    scratch.clear();
    scratch.resize(oh * g.w * g.f, 0.0);
    for r in 0..oh {
        scratch[r * g.w * g.f..][..ow * g.f].copy_from_slice(&grad[r * ow * g.f..][..ow * g.f]);
    }
    for ki in 0..g.kh {
        gemm(
            row_len,
            rows,
            g.f,
            &x[ki * g.w * g.c..],
            1,
            g.c,
            &scratch[..rows * g.f],
            g.f,
            1,
            1.0,
            &mut dw[ki * row_len * g.f..(ki + 1) * row_len * g.f],
            g.f,
            1,
        );
    }
}

/// Kernel for the input gradient of a stride-1 convolution: spatially
/// flipped, channels swapped, `(kh, kw, f, c)`.
pub(crate) fn flip_kernel(weights: &[f32], kh: usize, kw: usize, c: usize, f: usize) -> Vec<f32> {
    let mut out = vec![0.0; weights.len()];
    for a in 0..kh {
        for b in 0..kw {
            for ci in 0..c {
                for fi in 0..f {
                    let src = ((a * kw + b) * c + ci) * f + fi;
                    let dst = (((kh - 1 - a) * kw + (kw - 1 - b)) * f + fi) * c + ci;
                    out[dst] = weights[src];
                }
            }
        }
    }
    out
}

/// Input gradient of a stride-1 valid convolution: a valid convolution of
/// the zero-padded output gradient with the flipped kernel. `dx` is `h × w × c`.
pub(crate) fn conv_s1_input_grad(
    grad: &[f32],
    g: ConvGeom,
    flipped: &[f32],
    dx: &mut [f32],
    pad_buf: &mut Vec<f32>,
    scratch: &mut Vec<f32>,
) {
    let (oh, ow) = g.out_hw();
    let ph = oh + 2 * (g.kh - 1);
    let pw = ow + 2 * (g.kw - 1);
    pad_buf.clear();
    pad_buf.resize(ph * pw * g.f, 0.0);
    for r in 0..oh {
        let dst = ((r + g.kh - 1) * pw + (g.kw - 1)) * g.f;
        pad_buf[dst..dst + ow * g.f].copy_from_slice(&grad[r * ow * g.f..][..ow * g.f]);
    }
    let back = ConvGeom {
        h: ph,
        w: pw,
        c: g.f,
        kh: g.kh,
        kw: g.kw,
        f: g.c,
        stride: (1, 1),
    };
    conv_s1(pad_buf, back, flipped, dx, scratch);
}

/// Unfolds patches into rows: `(oh·ow) × (kh·kw·c)`.
pub(crate) fn im2col(x: &[f32], g: ConvGeom, cols: &mut Vec<f32>) {
    let (oh, ow) = g.out_hw();
    let k = g.patch_len();
    cols.clear();
    cols.resize(oh * ow * k, 0.0);
    let run = g.kw * g.c;
    for r in 0..oh {
        for q in 0..ow {
            let row = &mut cols[(r * ow + q) * k..][..k];
            for ki in 0..g.kh {
                let src = ((r * g.stride.0 + ki) * g.w + q * g.stride.1) * g.c;
                row[ki * run..(ki + 1) * run].copy_from_slice(&x[src..src + run]);
            }
        }
    }
}

/// Scatter-adds patch rows back into an `h × w × c` gradient.
pub(crate) fn col2im(cols: &[f32], g: ConvGeom, dx: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let k = g.patch_len();
    let run = g.kw * g.c;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..oh {
        for q in 0..ow {
            let row = &cols[(r * ow + q) * k..][..k];
            for ki in 0..g.kh {
                let dst = ((r * g.stride.0 + ki) * g.w + q * g.stride.1) * g.c;
                for (d, s) in dx[dst..dst + run].iter_mut().zip(&row[ki * run..(ki + 1) * run]) {
                    *d += s;
                }
            }
        }
    }
}

/// Strided valid convolution through im2col.
pub(crate) fn conv_general(x: &[f32], g: ConvGeom, weights: &[f32], out: &mut [f32], cols: &mut Vec<f32>) {
    let (oh, ow) = g.out_hw();
    im2col(x, g, cols);
    let k = g.patch_len();
    gemm(oh * ow, k, g.f, cols, k, 1, weights, g.f, 1, 0.0, out, g.f, 1);
}

/// Weight and (optionally) input gradients for [`conv_general`].
pub(crate) fn conv_general_backward(
    x: &[f32],
    g: ConvGeom,
    weights: &[f32],
    grad: &[f32],
    dw: &mut [f32],
    dx: Option<&mut [f32]>,
    cols: &mut Vec<f32>,
) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.patch_len();
    im2col(x, g, cols);
    gemm(k, p, g.f, cols, 1, k, grad, g.f, 1, 1.0, dw, g.f, 1);
    if let Some(dx) = dx {
        // cols ← grad · Wᵀ
        gemm(p, g.f, k, grad, g.f, 1, weights, 1, g.f, 0.0, cols, k, 1);
        col2im(cols, g, dx);
    }
}

/// Copies `h × w × c` into the centre of a zeroed padded buffer.
pub(crate) fn pad_hwc(x: &[f32], h: usize, w: usize, c: usize, pad: Padding2, out: &mut Vec<f32>) {
    let (hp, wp) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    out.clear();
    out.resize(hp * wp * c, 0.0);
    for r in 0..h {
        let dst = ((r + pad.top) * wp + pad.left) * c;
        out[dst..dst + w * c].copy_from_slice(&x[r * w * c..(r + 1) * w * c]);
    }
}

/// Inverse of [`pad_hwc`]: extracts the centre region.
pub(crate) fn crop_hwc(xp: &[f32], h: usize, w: usize, c: usize, pad: Padding2, out: &mut [f32]) {
    let wp = w + pad.left + pad.right;
    for r in 0..h {
        let src = ((r + pad.top) * wp + pad.left) * c;
        out[r * w * c..(r + 1) * w * c].copy_from_slice(&xp[src..src + w * c]);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Padding2 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2 {
    pub fn is_zero(&self) -> bool {
        *self == Padding2::default()
    }

    /// Zero padding so that the output is `ceil(len / stride)` per axis.
    pub fn same(h: usize, w: usize, k: (usize, usize), stride: (usize, usize)) -> Self {
        let total = |len: usize, k: usize, s: usize| {
            let out = len.div_ceil(s);
            ((out - 1) * s + k).saturating_sub(len)
        };
        let th = total(h, k.0, stride.0);
        let tw = total(w, k.1, stride.1);
        Padding2 {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    fn geom_strategy() -> impl Strategy<Value = ConvGeom> {
        (1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..5, 1usize..3, 1usize..3, 0usize..5, 0usize..5).prop_map(
            |(kh, kw, c, f, extra, sh, sw, eh, ew)| ConvGeom {
                h: kh + extra + eh,
                w: kw + extra + ew,
                c,
                kh,
                kw,
                f,
                stride: (sh, sw),
            },
        )
    }

    proptest! {
        #[test]
        fn stride_one_matches_direct(g in geom_strategy(), seed in any::<u64>()) {
            let g = ConvGeom { stride: (1, 1), ..g };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(g.h * g.w * g.c, &mut rng);
            let w = random(g.patch_len() * g.f, &mut rng);
            let (oh, ow) = g.out_hw();
            let mut out = vec![0.0; oh * ow * g.f];
            conv_s1(&x, g, &w, &mut out, &mut Vec::new());
            prop_assert!(close(&out, &reference::conv(&x, g, &w), 1e-5));

            let grad = random(oh * ow * g.f, &mut rng);
            let (rdw, rdx) = reference::conv_grads(&x, g, &w, &grad);
            let mut dw = vec![0.0; w.len()];
            conv_s1_weight_grad(&x, g, &grad, &mut dw, &mut Vec::new());
            prop_assert!(close(&dw, &rdw, 1e-4));
            let flipped = flip_kernel(&w, g.kh, g.kw, g.c, g.f);
            let mut dx = vec![0.0; x.len()];
            conv_s1_input_grad(&grad, g, &flipped, &mut dx, &mut Vec::new(), &mut Vec::new());
            prop_assert!(close(&dx, &rdx, 1e-4));
        }

        #[test]
        fn general_matches_direct(g in geom_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(g.h * g.w * g.c, &mut rng);
            let w = random(g.patch_len() * g.f, &mut rng);
            let (oh, ow) = g.out_hw();
            let mut out = vec![0.0; oh * ow * g.f];
            let mut cols = Vec::new();
            conv_general(&x, g, &w, &mut out, &mut cols);
            prop_assert!(close(&out, &reference::conv(&x, g, &w), 1e-5));

            let grad = random(oh * ow * g.f, &mut rng);
            let (rdw, rdx) = reference::conv_grads(&x, g, &w, &grad);
            let mut dw = vec![0.0; w.len()];
            let mut dx = vec![0.0; x.len()];
            conv_general_backward(&x, g, &w, &grad, &mut dw, Some(&mut dx), &mut cols);
            prop_assert!(close(&dw, &rdw, 1e-4));
            prop_assert!(close(&dx, &rdx, 1e-4));
        }
    }

    #[test]
    fn same_padding_sizes() {
        let p = Padding2::same(256, 256, (3, 3), (1, 1));
        assert_eq!((p.top, p.bottom, p.left, p.right), (1, 1, 1, 1));
        let p = Padding2::same(256, 256, (3, 3), (2, 2));
        // out 128: (127·2 + 3) − 256 = 1
        assert_eq!((p.top, p.bottom), (0, 1));
        let p = Padding2::same(8, 8, (1, 1), (1, 1));
        assert!(p.is_zero());
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let x: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32).collect();
        let pad = Padding2 { top: 1, bottom: 2, left: 0, right: 1 };
        let mut padded = Vec::new();
        pad_hwc(&x, 2, 3, 2, pad, &mut padded);
        assert_eq!(padded.len(), 5 * 4 * 2);
        let mut back = vec![0.0; x.len()];
        crop_hwc(&padded, 2, 3, 2, pad, &mut back);
        assert_eq!(back, x);
    }
}
