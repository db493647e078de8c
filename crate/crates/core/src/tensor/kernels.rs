//! Plain loop kernels. Matrix products accumulate into `out`.

use super::Scalar;

const TILE: usize = 64;

/// `out[n×m] += a[n×k] · b[k×m]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for p0 in (0..k).step_by(TILE) {
        let p1 = (p0 + TILE).min(k);
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for p in p0..p1 {
                let av = arow[p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for j0 in (0..m).step_by(TILE) {
        let j1 = (j0 + TILE).min(m);
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            for j in j0..j1 {
                let brow = &b[j * k..(j + 1) * k];
                out[i * m + j] = out[i * m + j] + dot(arow, brow);
            }
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four accumulators let the compiler vectorize the reduction
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Input offset of kernel tap `k` for a width-`w` kernel at dilation `r`.
/// Causal taps look back `(w-1-k)·r` steps; centered taps straddle `t`.
#[inline]
pub fn tap_offset(k: usize, w: usize, r: usize, causal: bool) -> isize {
    if causal {
        -(((w - 1 - k) * r) as isize)
    } else {
        (k as isize - ((w - 1) / 2) as isize) * r as isize
    }
}

/// Depthwise dilated 1-D convolution over `x[t×d]` with `kernel[w×d]`.
pub fn depthwise_conv<T: Scalar>(
    x: &[T],
    kernel: &[T],
    t_len: usize,
    d: usize,
    w: usize,
    r: usize,
    causal: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); t_len * d];
    for k in 0..w {
        let off = tap_offset(k, w, r, causal);
        let krow = &kernel[k * d..(k + 1) * d];
        for t in 0..t_len {
            let src = t as isize + off;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            let xrow = &x[src * d..(src + 1) * d];
            let orow = &mut out[t * d..(t + 1) * d];
            for c in 0..d {
                orow[c] = orow[c] + krow[c] * xrow[c];
            }
        }
    }
    out
}

/// Gradients of [`depthwise_conv`] given `dout`; accumulates into `dx`, `dk`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    t_len: usize,
    d: usize,
    w: usize,
    r: usize,
    causal: bool,
) {
    if let Some(dx) = dx {
        for k in 0..w {
            let off = tap_offset(k, w, r, causal);
            let krow = &kernel[k * d..(k + 1) * d];
            for t in 0..t_len {
                let src = t as isize + off;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    dx[src * d + c] = dx[src * d + c] + krow[c] * dout[t * d + c];
                }
            }
        }
    }
    if let Some(dk) = dk {
        for k in 0..w {
            let off = tap_offset(k, w, r, causal);
            for t in 0..t_len {
                let src = t as isize + off;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    dk[k * d + c] = dk[k * d + c] + x[src * d + c] * dout[t * d + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (n, k, m) = (5, 70, 67);
        let a: Vec<f64> = (0..n * k).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let b: Vec<f64> = (0..k * m).map(|i| ((i * 5 % 11) as f64) * 0.5 - 2.0).collect();
        let want = naive(&a, &b, n, k, m);

        let mut c = vec![0.0; n * m];
        matmul_nn(&a, &b, &mut c, n, k, m);
        assert_eq!(c, want);

        let bt = transpose(&b, k, m);
        let mut c = vec![0.0; n * m];
        matmul_nt(&a, &bt, &mut c, n, k, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }

        let at = transpose(&a, n, k);
        let mut c = vec![0.0; n * m];
        matmul_tn(&at, &b, &mut c, k, n, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_hand_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(depthwise_conv(&x, &[1.0, 1.0], 4, 1, 2, 1, true), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(depthwise_conv(&x, &[1.0, 1.0], 4, 1, 2, 2, true), vec![1.0, 2.0, 4.0, 6.0]);
        // identity tap is the last (current-position) weight
        assert_eq!(depthwise_conv(&x, &[0.0, 0.0, 1.0], 4, 1, 3, 3, true), x.to_vec());
        // centered taps read both sides
        assert_eq!(depthwise_conv(&x, &[1.0, 0.0, 1.0], 4, 1, 3, 1, false), vec![2.0, 4.0, 6.0, 3.0]);
    }
}
