//! Slice-level numeric kernels shared by the tape and by value-only code paths.

use super::Real;

/// `out += a[m×k] · b[k×n]`, row-major.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)).take(m) {
        for (p, &av) in a_row.iter().enumerate().take(k) {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`; `out` is `[k×n]`.
pub(crate) fn matmul_tn_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_into(a, &bt, out, m, k, n);
}

pub(crate) fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max-shift.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            total += *oi;
        }
        let inv = T::one() / total;
        for oi in o.iter_mut() {
            *oi = *oi * inv;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = row.iter().map(|&xi| (xi - max).exp()).sum();
        let log_z = max + total.ln();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - log_z;
        }
    }
    out
}

/// Per-row `(x - mean) / sqrt(var + eps)` with population variance.
/// Returns the normalized values and each row's `1/sqrt(var + eps)`.
pub fn layer_norm_rows<T: Real>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    if cols == 0 {
        return (out, inv_std);
    }
    let d = T::lit(cols as f64);
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
