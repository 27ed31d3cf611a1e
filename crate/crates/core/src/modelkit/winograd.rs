//! Winograd F(4×4, 3×3) for stride-1 valid 3×3 convolutions on HWC data.
//!
//! Each 4×4 output tile is `Aᵀ [Σ_c (G w Gᵀ) ⊙ (Bᵀ d B)] A` over the 6×6
//! input tile `d`, which turns the convolution into 36 channel GEMMs with
//! a quarter of the direct multiply count. Both gradients use the exact
//! adjoint of the same factorization:
//!
//! * `Ŷ = A dY Aᵀ` per output-gradient tile,
//! * `dU[ξ] = Σ_tiles V[ξ]ᵀ Ŷ[ξ]`, then `dw = Gᵀ dU G`,
//! * `dV[ξ] = Ŷ[ξ] U[ξ]ᵀ`, then `dx += B dV Bᵀ` scattered onto overlapping tiles.

use super::ops::gemm;

const M: usize = 4;
const ALPHA: usize = 6;
const XI: usize = ALPHA * ALPHA;
/// Tiles transformed and multiplied together; sized so one block of
/// transformed data stays in L2.
const BLOCK: usize = 64;

/// Input transform; the unrolled `bt_1d`/`b_1d` apply it.
#[cfg(test)]
const BT: [[f32; 6]; 6] = [
    [4.0, 0.0, -5.0, 0.0, 1.0, 0.0],
    [0.0, -4.0, -4.0, 1.0, 1.0, 0.0],
    [0.0, 4.0, -4.0, -1.0, 1.0, 0.0],
    [0.0, -2.0, -1.0, 2.0, 1.0, 0.0],
    [0.0, 2.0, -1.0, -2.0, 1.0, 0.0],
    [0.0, 4.0, 0.0, -5.0, 0.0, 1.0],
];

const G: [[f32; 3]; 6] = [
    [1.0 / 4.0, 0.0, 0.0],
    [-1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 1.0 / 6.0, -1.0 / 6.0],
    [1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0],
    [1.0 / 24.0, -1.0 / 12.0, 1.0 / 6.0],
    [0.0, 0.0, 1.0],
];

/// Output transform, unrolled in `at_1d`/`a_1d`.
#[cfg(test)]
const AT: [[f32; 6]; 4] = [
    [1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
    [0.0, 1.0, -1.0, 2.0, -2.0, 0.0],
    [0.0, 1.0, 1.0, 4.0, 4.0, 0.0],
    [0.0, 1.0, -1.0, 8.0, -8.0, 1.0],
];

const fn transpose<const R: usize, const C: usize>(m: [[f32; C]; R]) -> [[f32; R]; C] {
    let mut out = [[0.0; R]; C];
    let mut i = 0;
    while i < R {
        let mut j = 0;
        while j < C {
            out[j][i] = m[i][j];
            j += 1;
        }
        i += 1;
    }
    out
}

const GT: [[f32; 6]; 3] = transpose(G);

/// `out[r] = Σ_k m[r][k] · src[k]` where each row is a run of `l` floats.
fn left_mul<const R: usize, const K: usize>(m: &[[f32; K]; R], src: &[f32], l: usize, out: &mut [f32]) {
    for (r, coefs) in m.iter().enumerate() {
        let o = &mut out[r * l..(r + 1) * l];
        o.fill(0.0);
        for (k, &coef) in coefs.iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            for (a, b) in o.iter_mut().zip(&src[k * l..(k + 1) * l]) {
                *a += coef * b;
            }
        }
    }
}

/// `m · X · nᵀ` for `X` of shape `[K1][K2][l]`, giving `[R1][R2][l]`.
fn sandwich<const R1: usize, const K1: usize, const R2: usize, const K2: usize>(
    m: &[[f32; K1]; R1],
    n: &[[f32; K2]; R2],
    src: &[f32],
    l: usize,
    out: &mut [f32],
) {
    let mut tmp = vec![0.0; R1 * K2 * l];
    left_mul(m, src, K2 * l, &mut tmp);
    for r in 0..R1 {
        left_mul(n, &tmp[r * K2 * l..(r + 1) * K2 * l], l, &mut out[r * R2 * l..(r + 1) * R2 * l]);
    }
}

/// Transformed kernel `U`, laid out `[36][c][f]`, from `(3, 3, c, f)` weights.
pub(crate) fn transform_kernel(w: &[f32], c: usize, f: usize) -> Vec<f32> {
    let mut out = vec![0.0; XI * c * f];
    sandwich(&G, &G, w, c * f, &mut out);
    out
}

/// `[36][f][c]` copy of a transformed kernel, used for input gradients.
pub(crate) fn transpose_kernel(u: &[f32], c: usize, f: usize) -> Vec<f32> {
    let mut out = vec![0.0; u.len()];
    for xi in 0..XI {
        for ci in 0..c {
            for fi in 0..f {
                out[(xi * f + fi) * c + ci] = u[(xi * c + ci) * f + fi];
            }
        }
    }
    out
}

/// Weight gradient `(3, 3, c, f)` from the accumulated `dU`.
pub(crate) fn kernel_grad(du: &[f32], c: usize, f: usize) -> Vec<f32> {
    let mut out = vec![0.0; 9 * c * f];
    sandwich(&GT, &GT, du, c * f, &mut out);
    out
}

pub(crate) fn kernel_len(c: usize, f: usize) -> usize {
    XI * c * f
}

// One-dimensional transforms, applied elementwise along runs of channels.

fn split<const K: usize>(buf: &mut [f32], n: usize) -> [&mut [f32]; K] {
    let mut it = buf[..K * n].chunks_exact_mut(n);
    std::array::from_fn(|_| it.next().expect("row"))
}

/// `Bᵀ d`
#[inline(always)]
fn bt_1d(s: [&[f32]; 6], d: [&mut [f32]; 6]) {
    let n = d[0].len();
    let [s0, s1, s2, s3, s4, s5] = s.map(|v| &v[..n]);
    let [d0, d1, d2, d3, d4, d5] = d.map(|v| &mut v[..n]);
    for i in 0..n {
        let (a0, a1, a2, a3, a4, a5) = (s0[i], s1[i], s2[i], s3[i], s4[i], s5[i]);
        d0[i] = 4.0 * a0 - 5.0 * a2 + a4;
        d1[i] = -4.0 * (a1 + a2) + a3 + a4;
        d2[i] = 4.0 * (a1 - a2) - a3 + a4;
        d3[i] = 2.0 * (a3 - a1) - a2 + a4;
        d4[i] = 2.0 * (a1 - a3) - a2 + a4;
        d5[i] = 4.0 * a1 - 5.0 * a3 + a5;
    }
}

/// `B v`, the adjoint of [`bt_1d`]; adds into `d` when `ACC`.
#[inline(always)]
fn b_1d<const ACC: bool>(s: [&[f32]; 6], d: [&mut [f32]; 6]) {
    let n = d[0].len();
    let [s0, s1, s2, s3, s4, s5] = s.map(|v| &v[..n]);
    let [d0, d1, d2, d3, d4, d5] = d.map(|v| &mut v[..n]);
    for i in 0..n {
        let (a0, a1, a2, a3, a4, a5) = (s0[i], s1[i], s2[i], s3[i], s4[i], s5[i]);
        let r = [
            4.0 * a0,
            4.0 * (a2 - a1 + a5) + 2.0 * (a4 - a3),
            -5.0 * a0 - 4.0 * (a1 + a2) - a3 - a4,
            a1 - a2 + 2.0 * (a3 - a4) - 5.0 * a5,
            a0 + a1 + a2 + a3 + a4,
            a5,
        ];
        if ACC {
            d0[i] += r[0];
            d1[i] += r[1];
            d2[i] += r[2];
            d3[i] += r[3];
            d4[i] += r[4];
            d5[i] += r[5];
        } else {
            d0[i] = r[0];
            d1[i] = r[1];
            d2[i] = r[2];
            d3[i] = r[3];
            d4[i] = r[4];
            d5[i] = r[5];
        }
    }
}

/// `Aᵀ m`
#[inline(always)]
fn at_1d(s: [&[f32]; 6], d: [&mut [f32]; 4]) {
    let n = d[0].len();
    let [s0, s1, s2, s3, s4, s5] = s.map(|v| &v[..n]);
    let [d0, d1, d2, d3] = d.map(|v| &mut v[..n]);
    for i in 0..n {
        let (p, q) = (s1[i] + s2[i], s1[i] - s2[i]);
        let (r, t) = (s3[i] + s4[i], s3[i] - s4[i]);
        d0[i] = s0[i] + p + r;
        d1[i] = q + 2.0 * t;
        d2[i] = p + 4.0 * r;
        d3[i] = q + 8.0 * t + s5[i];
    }
}

/// `A y`, the adjoint of [`at_1d`].
#[inline(always)]
fn a_1d(s: [&[f32]; 4], d: [&mut [f32]; 6]) {
    let n = d[0].len();
    let [s0, s1, s2, s3] = s.map(|v| &v[..n]);
    let [d0, d1, d2, d3, d4, d5] = d.map(|v| &mut v[..n]);
    for i in 0..n {
        let (y0, y1, y2, y3) = (s0[i], s1[i], s2[i], s3[i]);
        let (e, o) = (y0 + y2, y1 + y3);
        let (e4, o2) = (y0 + 4.0 * y2, 2.0 * y1 + 8.0 * y3);
        d0[i] = y0;
        d1[i] = e + o;
        d2[i] = e - o;
        d3[i] = e4 + o2;
        d4[i] = e4 - o2;
        d5[i] = y3;
    }
}

#[derive(Debug, Clone, Copy)]
struct Grid {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    tw: usize,
    tiles: usize,
}

impl Grid {
    fn new(h: usize, w: usize) -> Self {
        let (oh, ow) = (h - 2, w - 2);
        let (th, tw) = (oh.div_ceil(M), ow.div_ceil(M));
        Grid {
            h,
            w,
            oh,
            ow,
            tw,
            tiles: th * tw,
        }
    }

    fn origin(&self, t: usize) -> (usize, usize) {
        (t / self.tw * M, t % self.tw * M)
    }
}

/// Per-thread buffers. Transformed blocks are tile-major, `[tile][36][ch]`,
/// so each of the 36 products is a GEMM over rows strided by `36·ch`.
#[derive(Default)]
pub(crate) struct Workspace {
    edge: Vec<f32>,
    tmp: Vec<f32>,
    small: Vec<f32>,
    v: Vec<f32>,
    mm: Vec<f32>,
    yhat: Vec<f32>,
}

/// `Bᵀ d B` for the 6×6 input tile at `(r0, c0)`, written to `dst` (`[36][c]`).
#[inline(always)]
fn input_tile(x: &[f32], g: &Grid, c: usize, (r0, c0): (usize, usize), edge: &mut Vec<f32>, tmp: &mut [f32], dst: &mut [f32]) {
    let row = ALPHA * c;
    let (src, base, stride): (&[f32], usize, usize) = if r0 + ALPHA <= g.h && c0 + ALPHA <= g.w {
        (x, (r0 * g.w + c0) * c, g.w * c)
    } else {
        edge.clear();
        edge.resize(ALPHA * row, 0.0);
        let cols = ALPHA.min(g.w - c0);
        for i in 0..ALPHA.min(g.h - r0) {
            let s = ((r0 + i) * g.w + c0) * c;
            edge[i * row..][..cols * c].copy_from_slice(&x[s..s + cols * c]);
        }
        (edge.as_slice(), 0, row)
    };
    bt_1d(std::array::from_fn(|b| &src[base + b * stride..][..row]), split(tmp, row));
    for a in 0..ALPHA {
        let t = &tmp[a * row..(a + 1) * row];
        bt_1d(std::array::from_fn(|j| &t[j * c..(j + 1) * c]), split(&mut dst[a * row..], c));
    }
}

/// `V` for tiles `t0..t0 + nt`.
fn input_block(x: &[f32], g: &Grid, c: usize, t0: usize, nt: usize, ws: &mut Workspace) {
    ws.v.resize(nt * XI * c, 0.0);
    ws.tmp.resize(XI * c, 0.0);
    for (j, dst) in ws.v.chunks_exact_mut(XI * c).enumerate() {
        input_tile(x, g, c, g.origin(t0 + j), &mut ws.edge, &mut ws.tmp, dst);
    }
}

/// The 36 products `M[ξ] = X[ξ] · K[ξ]` over a tile-major block, with `K`
/// laid out `[36][k][n]`.
fn products(nt: usize, k: usize, n: usize, x: &[f32], kernel: &[f32], out: &mut Vec<f32>) {
    out.resize(nt * XI * n, 0.0);
    for xi in 0..XI {
        gemm(
            nt,
            k,
            n,
            &x[xi * k..],
            XI * k,
            1,
            &kernel[xi * k * n..(xi + 1) * k * n],
            n,
            1,
            0.0,
            &mut out[xi * n..],
            XI * n,
            1,
        );
    }
}

/// Stride-1 valid 3×3 convolution without bias. `x` is `h × w × c`,
/// `out` is `(h − 2) × (w − 2) × f`, `u` from [`transform_kernel`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(x: &[f32], h: usize, w: usize, c: usize, f: usize, u: &[f32], out: &mut [f32], ws: &mut Workspace) {
    let g = Grid::new(h, w);
    let row = ALPHA * f;
    let mut t0 = 0;
    while t0 < g.tiles {
        let nt = BLOCK.min(g.tiles - t0);
        input_block(x, &g, c, t0, nt, ws);
        products(nt, c, f, &ws.v, u, &mut ws.mm);
        ws.tmp.resize(M * row, 0.0);
        ws.small.resize(M * f, 0.0);
        for (j, m) in ws.mm.chunks_exact(XI * f).enumerate() {
            at_1d(std::array::from_fn(|b| &m[b * row..(b + 1) * row]), split(&mut ws.tmp, row));
            let (r0, c0) = g.origin(t0 + j);
            let inside = c0 + M <= g.ow;
            for i in 0..M.min(g.oh - r0) {
                let t = &ws.tmp[i * row..(i + 1) * row];
                let s = std::array::from_fn(|q| &t[q * f..(q + 1) * f]);
                let dst = ((r0 + i) * g.ow + c0) * f;
                if inside {
                    at_1d(s, split(&mut out[dst..], f));
                } else {
                    at_1d(s, split(&mut ws.small, f));
                    let cols = g.ow - c0;
                    out[dst..dst + cols * f].copy_from_slice(&ws.small[..cols * f]);
                }
            }
        }
        t0 += nt;
    }
}

/// Gradients of a [`forward`] call. Adds `dU` (layout of `u`) into `du`
/// and, when `dx` is given, writes the input gradient there. `ut` comes
/// from [`transpose_kernel`] and may be empty without `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &[f32],
    h: usize,
    w: usize,
    c: usize,
    f: usize,
    ut: &[f32],
    dy: &[f32],
    du: &mut [f32],
    mut dx: Option<&mut [f32]>,
    ws: &mut Workspace,
) {
    let g = Grid::new(h, w);
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    let mut t0 = 0;
    while t0 < g.tiles {
        let nt = BLOCK.min(g.tiles - t0);

        // Ŷ = A dY Aᵀ
        ws.yhat.resize(nt * XI * f, 0.0);
        ws.tmp.resize(ALPHA * M * f, 0.0);
        for (j, yh) in ws.yhat.chunks_exact_mut(XI * f).enumerate() {
            let (r0, c0) = g.origin(t0 + j);
            let row = M * f;
            let (src, base, stride): (&[f32], usize, usize) = if r0 + M <= g.oh && c0 + M <= g.ow {
                (dy, (r0 * g.ow + c0) * f, g.ow * f)
            } else {
                ws.edge.clear();
                ws.edge.resize(M * row, 0.0);
                let cols = M.min(g.ow - c0);
                for i in 0..M.min(g.oh - r0) {
                    let s = ((r0 + i) * g.ow + c0) * f;
                    ws.edge[i * row..][..cols * f].copy_from_slice(&dy[s..s + cols * f]);
                }
                (ws.edge.as_slice(), 0, row)
            };
            a_1d(std::array::from_fn(|i| &src[base + i * stride..][..row]), split(&mut ws.tmp, row));
            for a in 0..ALPHA {
                let t = &ws.tmp[a * row..(a + 1) * row];
                a_1d(std::array::from_fn(|i| &t[i * f..(i + 1) * f]), split(&mut yh[a * ALPHA * f..], f));
            }
        }

        // dU[ξ] += V[ξ]ᵀ Ŷ[ξ]
        input_block(x, &g, c, t0, nt, ws);
        for xi in 0..XI {
            gemm(
                c,
                nt,
                f,
                &ws.v[xi * c..],
                1,
                XI * c,
                &ws.yhat[xi * f..],
                XI * f,
                1,
                1.0,
                &mut du[xi * c * f..(xi + 1) * c * f],
                f,
                1,
            );
        }

        // dV[ξ] = Ŷ[ξ] U[ξ]ᵀ, then dx += B dV Bᵀ
        if let Some(dx) = dx.as_deref_mut() {
            products(nt, f, c, &ws.yhat, ut, &mut ws.mm);
            let row = ALPHA * c;
            ws.tmp.resize(ALPHA * row, 0.0);
            ws.small.resize(row, 0.0);
            for (j, dv) in ws.mm.chunks_exact(XI * c).enumerate() {
                b_1d::<false>(std::array::from_fn(|b| &dv[b * row..(b + 1) * row]), split(&mut ws.tmp, row));
                let (r0, c0) = g.origin(t0 + j);
                let cols = ALPHA.min(g.w - c0);
                for a in 0..ALPHA.min(g.h - r0) {
                    let t = &ws.tmp[a * row..(a + 1) * row];
                    let s = std::array::from_fn(|q| &t[q * c..(q + 1) * c]);
                    let dst = ((r0 + a) * g.w + c0) * c;
                    if cols == ALPHA {
                        b_1d::<true>(s, split(&mut dx[dst..], c));
                    } else {
                        b_1d::<false>(s, split(&mut ws.small, c));
                        for (d, s) in dx[dst..dst + cols * c].iter_mut().zip(&ws.small) {
                            *d += s;
                        }
                    }
                }
            }
        }
        t0 += nt;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::ops::{reference, ConvGeom};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "[{i}] {x} vs {y}");
        }
    }

    #[test]
    fn one_dimensional_identity() {
        // Aᵀ[(G g) ⊙ (Bᵀ d)] is the 4-output correlation of d with g.
        let d = [0.3f32, -1.2, 2.0, 0.7, -0.4, 1.1];
        let g = [0.5f32, -0.25, 2.0];
        let gd: Vec<f32> = G.iter().map(|r| r.iter().zip(&g).map(|(a, b)| a * b).sum()).collect();
        let bd: Vec<f32> = BT.iter().map(|r| r.iter().zip(&d).map(|(a, b)| a * b).sum()).collect();
        for (i, row) in AT.iter().enumerate() {
            let y: f32 = row.iter().zip(gd.iter().zip(&bd)).map(|(a, (p, q))| a * p * q).sum();
            let direct: f32 = (0..3).map(|k| d[i + k] * g[k]).sum();
            assert!((y - direct).abs() < 1e-5);
        }
    }

    #[test]
    fn unrolled_transforms_match_matrices() {
        let v: Vec<f32> = (0..6).map(|i| (i as f32 * 1.7 - 2.3).sin()).collect();
        let apply = |m: &[&[f32]], v: &[f32]| -> Vec<f32> { m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
        let run6 = |t: fn([&[f32]; 6], [&mut [f32]; 6]), v: &[f32]| {
            let mut out = vec![0.0; 6];
            t(std::array::from_fn(|i| &v[i..i + 1]), split(&mut out, 1));
            out
        };
        let bt: Vec<&[f32]> = BT.iter().map(|r| &r[..]).collect();
        let b_rows: Vec<[f32; 6]> = (0..6).map(|k| std::array::from_fn(|i| BT[i][k])).collect();
        let b: Vec<&[f32]> = b_rows.iter().map(|r| &r[..]).collect();
        close(&run6(bt_1d, &v), &apply(&bt, &v), 1e-6);
        close(&run6(b_1d::<false>, &v), &apply(&b, &v), 1e-6);

        let mut out4 = vec![0.0; 4];
        at_1d(std::array::from_fn(|i| &v[i..i + 1]), split(&mut out4, 1));
        let at: Vec<&[f32]> = AT.iter().map(|r| &r[..]).collect();
        close(&out4, &apply(&at, &v), 1e-6);

        let a_rows: Vec<[f32; 4]> = (0..6).map(|k| std::array::from_fn(|i| AT[i][k])).collect();
        let a: Vec<&[f32]> = a_rows.iter().map(|r| &r[..]).collect();
        let mut out6 = vec![0.0; 6];
        a_1d(std::array::from_fn(|i| &v[i..i + 1]), split(&mut out6, 1));
        close(&out6, &apply(&a, &v[..4]), 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn matches_direct_convolution(h in 3usize..15, w in 3usize..15, c in 1usize..5, f in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConvGeom { h, w, c, kh: 3, kw: 3, f, stride: (1, 1) };
            let x = random(h * w * c, &mut rng);
            let wt = random(9 * c * f, &mut rng);
            let u = transform_kernel(&wt, c, f);
            let mut ws = Workspace::default();
            let mut out = vec![0.0; (h - 2) * (w - 2) * f];
            forward(&x, h, w, c, f, &u, &mut out, &mut ws);
            close(&out, &reference::conv(&x, g, &wt), 1e-4);

            let dy = random(out.len(), &mut rng);
            let (rdw, rdx) = reference::conv_grads(&x, g, &wt, &dy);
            let mut du = vec![0.0; kernel_len(c, f)];
            let mut dx = vec![0.0; x.len()];
            backward(&x, h, w, c, f, &transpose_kernel(&u, c, f), &dy, &mut du, Some(&mut dx), &mut ws);
            close(&kernel_grad(&du, c, f), &rdw, 1e-3);
            close(&dx, &rdx, 1e-3);
        }
    }

    #[test]
    fn wide_channels_use_blocked_tiles() {
        // More tiles than one block, channel counts on the SIMD path.
        let (h, w, c, f) = (40, 38, 32, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeom { h, w, c, kh: 3, kw: 3, f, stride: (1, 1) };
        let x = random(h * w * c, &mut rng);
        let wt: Vec<f32> = random(9 * c * f, &mut rng).iter().map(|v| v * 0.1).collect();
        let u = transform_kernel(&wt, c, f);
        let mut ws = Workspace::default();
        let mut out = vec![0.0; (h - 2) * (w - 2) * f];
        forward(&x, h, w, c, f, &u, &mut out, &mut ws);
        close(&out, &reference::conv(&x, g, &wt), 1e-4);
        let dy = random(out.len(), &mut rng);
        let (rdw, rdx) = reference::conv_grads(&x, g, &wt, &dy);
        let mut du = vec![0.0; kernel_len(c, f)];
        let mut dx = vec![0.0; x.len()];
        backward(&x, h, w, c, f, &transpose_kernel(&u, c, f), &dy, &mut du, Some(&mut dx), &mut ws);
        close(&kernel_grad(&du, c, f), &rdw, 1e-3);
        close(&dx, &rdx, 1e-3);
    }
}
