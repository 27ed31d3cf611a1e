//! Register-tiled AVX-512 GEMM for the shapes the engine produces most:
//! short inner dimension, output width a multiple of 16, contiguous rows
//! in B and C. A may have arbitrary strides, which covers both the
//! overlapping conv view and transposed operands.

#[cfg(target_arch = "x86_64")]
pub(crate) fn available() -> bool {
    std::is_x86_feature_detected!("avx512f")
}

#[cfg(not(target_arch = "x86_64"))]
pub(crate) fn available() -> bool {
    false
}

/// `c[i, j] = Σ_k a[i·rsa + k·csa] · b[k·ldb + j] + beta · c[i·ldc + j]`
/// for `j < n16`, where `n16` is a multiple of 16.
///
/// # Safety
/// AVX-512F must be available and every index above must be in bounds.
#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
pub(crate) unsafe fn gemm(
    m: usize,
    k: usize,
    n16: usize,
    a: *const f32,
    rsa: usize,
    csa: usize,
    b: *const f32,
    ldb: usize,
    beta: f32,
    c: *mut f32,
    ldc: usize,
) {
    debug_assert_eq!(n16 % 16, 0);
    let mut j = 0;
    while j < n16 {
        let nv = ((n16 - j) / 16).min(4);
        let (bj, cj) = (b.add(j), c.add(j));
        match nv {
            4 => panel::<6, 4>(m, k, a, rsa, csa, bj, ldb, beta, cj, ldc),
            3 => panel::<8, 3>(m, k, a, rsa, csa, bj, ldb, beta, cj, ldc),
            2 => panel::<12, 2>(m, k, a, rsa, csa, bj, ldb, beta, cj, ldc),
            _ => panel::<14, 1>(m, k, a, rsa, csa, bj, ldb, beta, cj, ldc),
        }
        j += nv * 16;
    }
}

/// One `16·NV`-wide column panel, `R` rows at a time.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn panel<const R: usize, const NV: usize>(
    m: usize,
    k: usize,
    a: *const f32,
    rsa: usize,
    csa: usize,
    b: *const f32,
    ldb: usize,
    beta: f32,
    c: *mut f32,
    ldc: usize,
) {
    let mut i = 0;
    while i + R <= m {
        tile::<R, NV>(k, a.add(i * rsa), rsa, csa, b, ldb, beta, c.add(i * ldc), ldc);
        i += R;
    }
    let (a, c) = (a.add(i * rsa), c.add(i * ldc));
    // Remainder rows as one shorter tile.
    match m - i {
        0 => {}
        1 => tile::<1, NV>(k, a, rsa, csa, b, ldb, beta, c, ldc),
        2 => tile::<2, NV>(k, a, rsa, csa, b, ldb, beta, c, ldc),
        3 => tile::<3, NV>(k, a, rsa, csa, b, ldb, beta, c, ldc),
        4 => tile::<4, NV>(k, a, rsa, csa, b, ldb, beta, c, ldc),
        5 => tile::<5, NV>(k, a, rsa, csa, b, ldb, beta, c, ldc),
        6 => tile::<6, NV>(k, a, rsa, csa, b, ldb, beta, c, ldc),
        7 => tile::<7, NV>(k, a, rsa, csa, b, ldb, beta, c, ldc),
        rest => {
            for r in 0..rest {
                tile::<1, NV>(k, a.add(r * rsa), rsa, csa, b, ldb, beta, c.add(r * ldc), ldc);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
#[allow(clippy::too_many_arguments)]
unsafe fn tile<const R: usize, const NV: usize>(
    k: usize,
    a: *const f32,
    rsa: usize,
    csa: usize,
    b: *const f32,
    ldb: usize,
    beta: f32,
    c: *mut f32,
    ldc: usize,
) {
    use std::arch::x86_64::*;
    let mut acc = [[_mm512_setzero_ps(); NV]; R];
    for kk in 0..k {
        let brow = b.add(kk * ldb);
        let mut bv = [_mm512_setzero_ps(); NV];
        for (v, slot) in bv.iter_mut().enumerate() {
            *slot = _mm512_loadu_ps(brow.add(v * 16));
        }
        let acol = a.add(kk * csa);
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_ps(*acol.add(r * rsa));
            for (v, slot) in row.iter_mut().enumerate() {
                *slot = _mm512_fmadd_ps(av, bv[v], *slot);
            }
        }
    }
    if beta == 0.0 {
        for (r, row) in acc.iter().enumerate() {
            for (v, slot) in row.iter().enumerate() {
                _mm512_storeu_ps(c.add(r * ldc + v * 16), *slot);
            }
        }
    } else {
        let bb = _mm512_set1_ps(beta);
        for (r, row) in acc.iter().enumerate() {
            for (v, slot) in row.iter().enumerate() {
                let p = c.add(r * ldc + v * 16);
                _mm512_storeu_ps(p, _mm512_fmadd_ps(bb, _mm512_loadu_ps(p), *slot));
            }
        }
    }
}
