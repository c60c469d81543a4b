//! Dense row-major kernels used by the tape. Loops are arranged so the inner
//! loop walks contiguous memory and the compiler can vectorize it.

use super::Element;

/// `out[n×m] = a[n×k] · b[k×m]`
pub fn matmul<T: Element>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(m)) {
            if a_ip == T::zero() {
                continue;
            }
            axpy(a_ip, b_row, out_row);
        }
    }
    out
}

/// `out[n×k] = a[n×m] · b[k×m]ᵀ`
pub fn matmul_bt<T: Element>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * k);
    for a_row in a.chunks_exact(m) {
        for b_row in b.chunks_exact(m) {
            out.push(dot(a_row, b_row));
        }
    }
    debug_assert_eq!(out.len(), n * k);
    out
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
pub fn matmul_at_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize) {
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(m)) {
        for (&a_ip, out_row) in a_row.iter().zip(out.chunks_exact_mut(m)) {
            if a_ip == T::zero() {
                continue;
            }
            axpy(a_ip, b_row, out_row);
        }
    }
}

#[inline]
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let a_chunks = a.chunks_exact(LANES);
    let b_chunks = b.chunks_exact(LANES);
    let tail: T = a_chunks
        .remainder()
        .iter()
        .zip(b_chunks.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (ca, cb) in a_chunks.zip(b_chunks) {
        for lane in 0..LANES {
            acc[lane] += ca[lane] * cb[lane];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) strides.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        let (n, k, m) = (5, 11, 7);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, n, k, m);
        let got = matmul(&a, &b, n, k, m);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a·(bᵀ)ᵀ through matmul_bt
        let mut bt = vec![0.0; k * m];
        for p in 0..k {
            for j in 0..m {
                bt[j * k + p] = b[p * m + j];
            }
        }
        let got_bt = matmul_bt(&a, &bt, n, k, m);
        for (x, y) in got_bt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·c accumulates into a k×m buffer
        let c: Vec<f64> = (0..n * m).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut at_c = vec![0.0; k * m];
        matmul_at_acc(&a, &c, &mut at_c, k, m);
        for p in 0..k {
            for j in 0..m {
                let want: f64 = (0..n).map(|i| a[i * k + p] * c[i * m + j]).sum();
                assert!((at_c[p * m + j] - want).abs() < 1e-12);
            }
        }
    }
}
