//! Dense kernels for the transformer, generic over the scalar type.
//!
//! Training runs in f32; the finite-difference gradient oracle runs the same
//! code in f64. All matrices are flat row-major `Vec`s; the inner loops run
//! over contiguous slices so the compiler can vectorize them. Everything is
//! single-threaded by design: batch sizes here are small enough that thread
//! fan-out costs more than it saves.

use num_traits::{Float, NumAssign};

/// Scalar type the model runs in.
pub trait Scalar: Float + NumAssign + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// out += s * x
pub fn axpy<T: Scalar>(out: &mut [T], s: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &xv) in out.iter_mut().zip(x) {
        *o = s.mul_add(xv, *o);
    }
}

/// out = a @ b for row-major a (m x k) and b (k x n).
pub fn matmul<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    out[..m * n].fill(T::zero());
    matmul_acc(out, a, b, m, k, n);
}

/// out += a @ b for row-major a (m x k) and b (k x n).
///
/// i-k-j loop order: the inner loop streams over rows of `b` and `out`.
pub fn matmul_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            axpy(out_row, av, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out = a @ b^T for row-major a (m x n) and b (k x n); out is (m x k).
///
/// Both operands are traversed along their contiguous rows.
pub fn matmul_bt<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out += a^T @ b for row-major a (m x k) and b (m x n); out is (k x n).
pub fn matmul_at_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut out[p * n..(p + 1) * n], a[i * k + p], b_row);
        }
    }
}

/// Dot product with four accumulators to break the FMA dependency chain.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let mut acc = [T::zero(); 4];
    for c in 0..chunks {
        for l in 0..4 {
            let i = c * 4 + l;
            acc[l] = a[i].mul_add(b[i], acc[l]);
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Adds a bias row to every row of a (rows x n) matrix.
pub fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], rows: usize, n: usize) {
    debug_assert_eq!(out.len(), rows * n);
    debug_assert_eq!(bias.len(), n);
    for r in 0..rows {
        for (o, &b) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// dbias += column sums of d (rows x n).
pub fn col_sums_acc<T: Scalar>(dbias: &mut [T], d: &[T], rows: usize, n: usize) {
    debug_assert_eq!(d.len(), rows * n);
    debug_assert_eq!(dbias.len(), n);
    for r in 0..rows {
        for (o, &v) in dbias.iter_mut().zip(&d[r * n..(r + 1) * n]) {
            *o += v;
        }
    }
}

/// Row-wise layernorm: out = (x - mean) * rstd * gain + bias.
/// Saves per-row mean and rstd for the backward pass.
pub fn layernorm_forward<T: Scalar>(
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
    x: &[T],
    gain: &[T],
    bias: &[T],
    rows: usize,
    d: usize,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        mean[r] = mu;
        rstd[r] = rs;
        let out_row = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            out_row[j] = (row[j] - mu) * rs * gain[j] + bias[j];
        }
    }
}

/// Backward of [`layernorm_forward`]; accumulates into dx, dgain, dbias.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Scalar>(
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
    dout: &[T],
    x: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    rows: usize,
    d: usize,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let dout_row = &dout[r * d..(r + 1) * d];
        let (mu, rs) = (mean[r], rstd[r]);

        // Two reductions over the row: mean(dxhat) and mean(dxhat * xhat).
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = dout_row[j] * gain[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain[j] += dout_row[j] * xhat;
            dbias[j] += dout_row[j];
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        let dx_row = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = dout_row[j] * gain[j];
            dx_row[j] += rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU, elementwise.
pub fn gelu_forward<T: Scalar>(out: &mut [T], x: &[T]) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    for (o, &v) in out.iter_mut().zip(x) {
        let u = c * (v + a * v * v * v);
        *o = half * v * (T::one() + u.tanh());
    }
}

/// dx += dout * gelu'(x)
pub fn gelu_backward<T: Scalar>(dx: &mut [T], dout: &[T], x: &[T]) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    for i in 0..x.len() {
        let v = x[i];
        let u = c * (v + a * v * v * v);
        let th = u.tanh();
        let sech2 = T::one() - th * th;
        let du = c * (T::one() + three * a * v * v);
        let grad = half * (T::one() + th) + half * v * sech2 * du;
        dx[i] += dout[i] * grad;
    }
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}
