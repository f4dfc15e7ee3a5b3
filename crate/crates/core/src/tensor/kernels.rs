//! Flat-buffer numeric kernels.
//!
//! Every matrix product accumulates each output element over the inner
//! index in ascending order, starting from zero, so results agree exactly
//! with a naive triple loop.

use crate::scalar::Scalar;

/// `out[m, q] = a[m, p] · b[p, q]`. `out` is overwritten.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * q);
    for i in 0..m {
        let row = &mut out[i * q..(i + 1) * q];
        row.iter_mut().for_each(|x| *x = T::zero());
        let a_row = &a[i * p..(i + 1) * p];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * q..(kk + 1) * q];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m, q] = a[m, p] · b[q, p]ᵀ`. `out` is overwritten.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let b_row = &b[j * p..(j + 1) * p];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * q + j] = acc;
        }
    }
}

/// `out[p, q] += a[m, p]ᵀ · g[m, q]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let g_row = &g[i * q..(i + 1) * q];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let o = &mut out[kk * q..(kk + 1) * q];
            for (ov, &gv) in o.iter_mut().zip(g_row) {
                *ov += aik * gv;
            }
        }
    }
}

/// `out[m, p] += g[m, q] · b[p, q]ᵀ`.
pub fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, q: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * q..(i + 1) * q];
        for kk in 0..p {
            let b_row = &b[kk * q..(kk + 1) * q];
            let mut acc = T::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * p + kk] += acc;
        }
    }
}

/// `out[m, p] += g[m, q] · b[q, p]`.
pub fn matmul_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, q: usize, p: usize) {
    for i in 0..m {
        let o = &mut out[i * p..(i + 1) * p];
        let g_row = &g[i * q..(i + 1) * q];
        for (j, &gv) in g_row.iter().enumerate() {
            if gv == T::zero() {
                continue;
            }
            let b_row = &b[j * p..(j + 1) * p];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += gv * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], out: &mut [T], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let inner = c * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_C);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

pub const LN_EPS: f64 = 1e-5;

/// Normalizes one slice in place into `out`, returning `(mean, rstd)`.
/// Moments are accumulated in f64.
pub fn layer_norm_row<T: Scalar>(x: &[T], gain: &[T], bias: &[T], out: &mut [T]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / d;
    let var = x
        .iter()
        .map(|v| {
            let c = v.as_f64() - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        let xhat = T::of((v.as_f64() - mean) * rstd);
        *o = xhat * g + b;
    }
    (mean, rstd)
}

/// Max-subtracted softmax of one slice; masked entries (`allowed[j] == false`)
/// come out exactly zero. The denominator is accumulated in f64.
/// Returns `false` when every entry is masked.
pub fn softmax_row<T: Scalar>(x: &[T], allowed: impl Fn(usize) -> bool, out: &mut [T]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in x.iter().enumerate() {
        if allowed(j) {
            max = max.max(v.as_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut denom = 0.0f64;
    for (j, (o, v)) in out.iter_mut().zip(x).enumerate() {
        if allowed(j) {
            let e = (v.as_f64() - max).exp();
            denom += e;
            *o = T::of(e);
        } else {
            *o = T::zero();
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if allowed(j) {
            *o = T::of(o.as_f64() / denom);
        }
    }
    true
}

/// log-softmax of one row, in f64.
pub fn log_softmax_row<T: Scalar>(x: &[T]) -> Vec<f64> {
    let max = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // [3,4]
        let mut c = vec![0.0; 8];
        matmul(&a, &b, &mut c, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        transpose(&b, &mut bt, 3, 4);
        let mut c2 = vec![0.0; 8];
        matmul_nt(&a, &bt, &mut c2, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
