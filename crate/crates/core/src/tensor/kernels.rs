//! Raw slice kernels shared by the tape's forward and backward passes.

use super::Real;

pub(crate) const RMS_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, T::zero(), &mut out);
    out
}

/// `acc[m×k] += dout[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_grad_a<T: Real>(
    dout: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    acc: &mut [T],
) {
    T::gemm(m, n, k, dout, n as isize, 1, b, 1, n as isize, T::one(), acc);
}

/// `acc[k×n] += a[m×k]ᵀ · dout[m×n]`
pub(crate) fn matmul_grad_b<T: Real>(
    a: &[T],
    dout: &[T],
    m: usize,
    k: usize,
    n: usize,
    acc: &mut [T],
) {
    T::gemm(k, m, n, a, 1, k as isize, dout, n as isize, 1, T::one(), acc);
}

/// Softmax over each `cols`-wide row. `-inf` entries map to exactly zero and
/// a row with no finite entry becomes all zeros.
pub(crate) fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_into(src, dst);
    }
    out
}

pub(crate) fn softmax_into<T: Real>(src: &[T], dst: &mut [T]) {
    let max = src
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        dst.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = if s == T::neg_infinity() {
            T::zero()
        } else {
            (s - max).exp()
        };
        sum += *d;
    }
    let inv = T::one() / sum;
    dst.iter_mut().for_each(|v| *v *= inv);
}

/// Given `y = softmax(x)` and `dy`, accumulates `dx` per row.
pub(crate) fn softmax_backward_into<T: Real>(y: &[T], dy: &[T], acc: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((a, &yi), &dyi) in acc.iter_mut().zip(y).zip(dy) {
        *a += yi * (dyi - dot);
    }
}

/// Returns `(out, inv_rms per row)`.
pub(crate) fn rmsnorm<T: Real>(x: &[T], gain: &[T]) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let eps = T::from_f64_lossy(RMS_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        for ((o, &v), &g) in dst.iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
    }
    (out, inv)
}

pub(crate) fn rmsnorm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
) {
    let d = gain.len();
    let dn = T::from_usize(d).unwrap();
    if let Some(dx) = dx {
        for (((row, dyr), dxr), &r) in x
            .chunks(d)
            .zip(dy.chunks(d))
            .zip(dx.chunks_mut(d))
            .zip(inv_rms)
        {
            // dx = r * g*dy - x * r^3 * sum(g*dy*x) / d
            let s: T = row
                .iter()
                .zip(dyr)
                .zip(gain)
                .map(|((&xv, &dv), &g)| xv * dv * g)
                .sum();
            let c = r * r * r * s / dn;
            for (((o, &xv), &dv), &g) in dxr.iter_mut().zip(row).zip(dyr).zip(gain) {
                *o += r * g * dv - xv * c;
            }
        }
    }
    if let Some(dg) = dgain {
        for ((row, dyr), &r) in x.chunks(d).zip(dy.chunks(d)).zip(inv_rms) {
            for ((o, &xv), &dv) in dg.iter_mut().zip(row).zip(dyr) {
                *o += xv * r * dv;
            }
        }
    }
}

/// Rotates interleaved pairs of every head by `sign * position * theta_i`.
pub(crate) fn rope_apply<T: Real>(
    x: &[T],
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    sign: f64,
    out: &mut [T],
) {
    let width = n_heads * head_dim;
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / head_dim as f64))
        .collect();
    for ((row, dst), &p) in x.chunks(width).zip(out.chunks_mut(width)).zip(positions) {
        for (i, &f) in freqs.iter().enumerate() {
            let angle = sign * p as f64 * f;
            let (s, c) = (T::from_f64_lossy(angle.sin()), T::from_f64_lossy(angle.cos()));
            for h in 0..n_heads {
                let j = h * head_dim + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                dst[j] += a * c - b * s;
                dst[j + 1] += a * s + b * c;
            }
        }
    }
}

/// SiLU(x) = x * sigmoid(x)
pub(crate) fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}
