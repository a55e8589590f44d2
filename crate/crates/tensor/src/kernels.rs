//! Matrix-multiply kernels.
//!
//! Output rows are always split into fixed blocks of [`ROW_BLOCK`] rows and
//! each block is handed to `matrixmultiply::sgemm` on its own. The parallel
//! path distributes the same blocks over the rayon pool, so both paths
//! produce bit-identical results regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const ROW_BLOCK: usize = 64;

/// Below this many multiply-adds the parallel path stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 16;

/// Operand layout: row-major `rows x cols`, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub struct Operand<'a> {
    pub data: &'a [f32],
    pub transposed: bool,
}

impl<'a> Operand<'a> {
    pub fn plain(data: &'a [f32]) -> Self {
        Self {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [f32]) -> Self {
        Self {
            data,
            transposed: true,
        }
    }
}

/// `c[m,n] (+)= op(a)[m,k] * op(b)[k,n]`, all row-major.
///
/// With `a.transposed`, `a.data` holds a `[k,m]` matrix; likewise `b` holds
/// `[n,k]` when transposed.
#[allow(clippy::too_many_arguments)]
fn gemm_block(
    m0: usize,
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), rows * n);
    let (a_ptr, rsa, csa) = if a.transposed {
        // element (i, p) lives at p*m + i
        (unsafe { a.data.as_ptr().add(m0) }, 1isize, m as isize)
    } else {
        (unsafe { a.data.as_ptr().add(m0 * k) }, k as isize, 1isize)
    };
    let (rsb, csb) = if b.transposed {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: pointer offsets and strides stay within the slices checked by
    // `check_dims`; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            k,
            n,
            1.0,
            a_ptr,
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_dims(m: usize, k: usize, n: usize, a: &Operand<'_>, b: &Operand<'_>, c: &[f32]) {
    assert_eq!(a.data.len(), m * k, "gemm: lhs length");
    assert_eq!(b.data.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
}

/// Sequential matrix multiply.
pub fn gemm_seq(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f32],
    accumulate: bool,
) {
    check_dims(m, k, n, &a, &b, c);
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    for (blk, cb) in c.chunks_mut(ROW_BLOCK * n).enumerate() {
        let m0 = blk * ROW_BLOCK;
        gemm_block(m0, cb.len() / n, m, k, n, a, b, cb, accumulate);
    }
}

/// Parallel matrix multiply over row blocks.
#[cfg(feature = "parallel")]
pub fn gemm_par(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f32],
    accumulate: bool,
) {
    check_dims(m, k, n, &a, &b, c);
    if k == 0 || m * n * k < PAR_THRESHOLD || m <= ROW_BLOCK {
        return gemm_seq(m, k, n, a, b, c, accumulate);
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, cb)| {
            let m0 = blk * ROW_BLOCK;
            gemm_block(m0, cb.len() / n, m, k, n, a, b, cb, accumulate);
        });
}

/// Dispatches to the parallel kernel when the `parallel` feature is on.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f32],
    accumulate: bool,
) {
    #[cfg(feature = "parallel")]
    gemm_par(m, k, n, a, b, c, accumulate);
    #[cfg(not(feature = "parallel"))]
    gemm_seq(m, k, n, a, b, c, accumulate);
}

/// Batched multiply: `batch` independent products of equal shape.
#[allow(clippy::too_many_arguments)]
pub fn batched_gemm(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let (sa, sb, sc) = (m * k, k * n, m * n);
    assert_eq!(a.len(), batch * sa);
    assert_eq!(b.len(), batch * sb);
    assert_eq!(c.len(), batch * sc);
    let one = |i: usize, cb: &mut [f32]| {
        gemm_seq(
            m,
            k,
            n,
            Operand {
                data: &a[i * sa..(i + 1) * sa],
                transposed: a_t,
            },
            Operand {
                data: &b[i * sb..(i + 1) * sb],
                transposed: b_t,
            },
            cb,
            accumulate,
        )
    };
    #[cfg(feature = "parallel")]
    {
        if batch > 1 && batch * sc * k >= PAR_THRESHOLD {
            c.par_chunks_mut(sc)
                .enumerate()
                .for_each(|(i, cb)| one(i, cb));
            return;
        }
    }
    for (i, cb) in c.chunks_mut(sc).enumerate() {
        one(i, cb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matches_naive_with_transposes() {
        let (m, k, n) = (130, 17, 9);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 % 13) as f32 - 6.0) / 5.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 5 % 11) as f32 - 5.0) / 3.0).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ao, bo) in [
            (Operand::plain(&a), Operand::plain(&b)),
            (Operand::t(&at), Operand::plain(&b)),
            (Operand::plain(&a), Operand::t(&bt)),
            (Operand::t(&at), Operand::t(&bt)),
        ] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, ao, bo, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bit_identical_to_sequential() {
        let (m, k, n) = (300, 64, 70);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm_seq(m, k, n, Operand::plain(&a), Operand::plain(&b), &mut c1, false);
        gemm_par(m, k, n, Operand::plain(&a), Operand::plain(&b), &mut c2, false);
        assert!(c1.iter().zip(&c2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
