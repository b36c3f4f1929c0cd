//! Plain loops over contiguous buffers. Every output element accumulates
//! over the contraction axis in increasing index order with fused
//! multiply-adds, so results do not depend on tiling or on how the compiler
//! vectorizes the non-contracted axis.

const MR: usize = 4;
const NR: usize = 16;
/// Contraction block length, sized so a block of `b` stays in cache.
const KC: usize = 256;

/// `c[m, n] += a[m, k] · b[k, n]`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm::<false>(a, b, c, m, k, n);
}

/// `c[m, n] += aᵀ · b` for `a` stored as `[k, m]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm::<true>(a, b, c, m, k, n);
}

/// Element `(i, p)` of the left operand.
#[inline(always)]
fn at<const TA: bool>(a: &[f64], i: usize, p: usize, m: usize, k: usize) -> f64 {
    if TA {
        a[p * m + i]
    } else {
        a[i * k + p]
    }
}

fn gemm<const TA: bool>(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let dims = Dims { m, k, n };
    for p0 in (0..k).step_by(KC) {
        let ps = p0..(p0 + KC).min(k);
        let mut i = 0;
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                tile::<TA>(a, b, c, i, j, ps.clone(), dims);
                j += NR;
            }
            edge::<TA>(a, b, c, i..i + MR, j..n, ps.clone(), dims);
            i += MR;
        }
        edge::<TA>(a, b, c, i..m, 0..n, ps, dims);
    }
}

#[derive(Clone, Copy)]
struct Dims {
    m: usize,
    k: usize,
    n: usize,
}

/// One `MR x NR` block of `c`, held in registers across the contraction.
#[inline(always)]
fn tile<const TA: bool>(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    i: usize,
    j: usize,
    ps: std::ops::Range<usize>,
    Dims { m, k, n }: Dims,
) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    for p in ps {
        let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let x = at::<TA>(a, i + r, p, m, k);
            for (y, bj) in row.iter_mut().zip(bv) {
                *y = x.mul_add(*bj, *y);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

fn edge<const TA: bool>(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    ps: std::ops::Range<usize>,
    Dims { m, k, n }: Dims,
) {
    for i in rows {
        for j in cols.clone() {
            let mut s = c[i * n + j];
            for p in ps.clone() {
                s = at::<TA>(a, i, p, m, k).mul_add(b[p * n + j], s);
            }
            c[i * n + j] = s;
        }
    }
}

/// Transposes a row-major `[rows, cols]` block.
pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Tanh approximation of GELU and its derivative.
pub(crate) fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    // libm tanh is several times slower than exp.
    let t = 1.0 - 2.0 / ((2.0 * inner).exp() + 1.0);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}
