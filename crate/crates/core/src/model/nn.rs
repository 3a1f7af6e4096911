//! Dense building blocks with explicit backward passes.
//!
//! Matrices are row-major slices. Everything is generic over [`Real`] so the
//! same code trains in `f32` and is gradient-checked in `f64`. Softmax,
//! layer-norm statistics and losses accumulate in `f64` regardless of `T`.

use std::fmt::Debug;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` over strided views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds of the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from(v).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        View { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Columns `col..col + cols` of a dense matrix with `stride` columns.
    pub fn cols_of(data: &'a [T], rows: usize, stride: usize, col: usize, cols: usize) -> Self {
        View { data, offset: col, rows, cols, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Mutable strided output.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        ViewMut { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, stride: usize, col: usize, cols: usize) -> Self {
        ViewMut { data, offset: col, rows, cols, rs: stride, cs: 1 }
    }
}

/// `out = a b` (or `out += a b` when `accumulate`).
pub fn gemm<T: Real>(a: View<'_, T>, b: View<'_, T>, out: ViewMut<'_, T>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (out.rows, out.cols), "output shape");
    if out.rows == 0 || out.cols == 0 {
        return;
    }
    assert!(a.last_index() < a.data.len() || a.cols == 0);
    assert!(b.last_index() < b.data.len() || b.rows == 0);
    let last_out = out.offset + (out.rows - 1) * out.rs + (out.cols - 1) * out.cs;
    assert!(last_out < out.data.len());
    if a.cols == 0 {
        if !accumulate {
            for i in 0..out.rows {
                for j in 0..out.cols {
                    out.data[out.offset + i * out.rs + j * out.cs] = T::zero();
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound the furthest element touched in each view.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.data.as_mut_ptr().add(out.offset),
            out.rs as isize,
            out.cs as isize,
        )
    }
}

/// `y[n x m] = x[n x k] w[k x m] + bias`.
pub fn linear<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, n: usize, k: usize, m: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * m];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(m) {
            row.copy_from_slice(b);
        }
    }
    gemm(View::dense(x, n, k), View::dense(w, k, m), ViewMut::dense(&mut y, n, m), bias.is_some());
    y
}

/// Backward of [`linear`]: accumulates weight and bias gradients when given,
/// returns `dx` when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    k: usize,
    m: usize,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    if let Some(dw) = dw {
        gemm(View::dense(x, n, k).t(), View::dense(dy, n, m), ViewMut::dense(dw, k, m), true);
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(m) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); n * k];
        gemm(View::dense(dy, n, m), View::dense(w, k, m).t(), ViewMut::dense(&mut dx, n, k), false);
        dx
    })
}

pub const LN_EPS: f64 = 1e-5;

/// Saved statistics of one layer-norm application.
#[derive(Clone, Debug, Default)]
pub struct LnCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], d: usize) -> (Vec<T>, LnCache) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut cache = LnCache {
        mean: Vec::with_capacity(n),
        rstd: Vec::with_capacity(n),
    };
    for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            let xhat = (row[j].f64() - mean) * rstd;
            out[j] = T::of(xhat * gamma[j].f64() + beta[j].f64());
        }
        cache.mean.push(mean);
        cache.rstd.push(rstd);
    }
    (y, cache)
}

/// Returns `dx`; accumulates `dgamma`/`dbeta` when given.
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    cache: &LnCache,
    dy: &[T],
    d: usize,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let mut xhat = vec![0f64; d];
    let mut dxhat = vec![0f64; d];
    for (r, ((row, drow), out)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (mean, rstd) = (cache.mean[r], cache.rstd[r]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (row[j].f64() - mean) * rstd;
            dxhat[j] = drow[j].f64() * gamma[j].f64();
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        if let Some(g) = dgamma.as_deref_mut() {
            for j in 0..d {
                g[j] = T::of(g[j].f64() + drow[j].f64() * xhat[j]);
            }
        }
        if let Some(b) = dbeta.as_deref_mut() {
            for j in 0..d {
                b[j] = b[j] + drow[j];
            }
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            out[j] = T::of(rstd * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat));
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| {
            let v = v.f64();
            T::of(0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        })
        .collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let v = v.f64();
            let u = GELU_C * (v + GELU_A * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            let grad = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            T::of(d.f64() * grad)
        })
        .collect()
}

/// Softmax of one row, accumulated in `f64`.
pub fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Multi-head self-attention cache: the packed qkv input and per-head probabilities.
#[derive(Clone, Debug, Default)]
pub struct AttnCache<T> {
    pub probs: Vec<T>,
}

/// `qkv` is `[n x 3d]` laid out as `[Q | K | V]`; returns the concatenated
/// head outputs `[n x d]`.
pub fn attention<T: Real>(qkv: &[T], n: usize, d: usize, heads: usize, causal: bool) -> (Vec<T>, AttnCache<T>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    let mut scores = vec![T::zero(); n * n];
    for h in 0..heads {
        let q = View::cols_of(qkv, n, 3 * d, h * dh, dh);
        let k = View::cols_of(qkv, n, 3 * d, d + h * dh, dh);
        let v = View::cols_of(qkv, n, 3 * d, 2 * d + h * dh, dh);
        gemm(q, k.t(), ViewMut::dense(&mut scores, n, n), false);
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let visible = if causal { i + 1 } else { n };
            let row = &scores[i * n..i * n + visible];
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max) * scale;
            let mut sum = 0.0;
            for j in 0..visible {
                let e = (row[j].f64() * scale - max).exp();
                p[i * n + j] = T::of(e);
                sum += e;
            }
            for j in 0..visible {
                p[i * n + j] = T::of(p[i * n + j].f64() / sum);
            }
        }
        gemm(
            View::dense(p, n, n),
            v,
            ViewMut::cols_of(&mut out, n, d, h * dh, dh),
            false,
        );
    }
    (out, AttnCache { probs })
}

/// Gradient of [`attention`] with respect to the packed `qkv` input.
pub fn attention_backward<T: Real>(
    qkv: &[T],
    cache: &AttnCache<T>,
    dout: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![T::zero(); n * 3 * d];
    let mut dp = vec![T::zero(); n * n];
    for h in 0..heads {
        let p = &cache.probs[h * n * n..(h + 1) * n * n];
        let q = View::cols_of(qkv, n, 3 * d, h * dh, dh);
        let k = View::cols_of(qkv, n, 3 * d, d + h * dh, dh);
        let v = View::cols_of(qkv, n, 3 * d, 2 * d + h * dh, dh);
        let dout_h = View::cols_of(dout, n, d, h * dh, dh);
        // dV = P^T dO
        gemm(
            View::dense(p, n, n).t(),
            dout_h,
            ViewMut::cols_of(&mut dqkv, n, 3 * d, 2 * d + h * dh, dh),
            false,
        );
        // dP = dO V^T
        gemm(dout_h, v.t(), ViewMut::dense(&mut dp, n, n), false);
        // dS = P * (dP - rowsum(dP * P)), folded with the score scale
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            let dot: f64 = p[row.clone()]
                .iter()
                .zip(&dp[row.clone()])
                .map(|(a, b)| a.f64() * b.f64())
                .sum();
            for j in row {
                dp[j] = T::of(p[j].f64() * (dp[j].f64() - dot) * scale);
            }
        }
        // dQ = dS K, dK = dS^T Q
        gemm(
            View::dense(&dp, n, n),
            k,
            ViewMut::cols_of(&mut dqkv, n, 3 * d, h * dh, dh),
            false,
        );
        gemm(
            View::dense(&dp, n, n).t(),
            q,
            ViewMut::cols_of(&mut dqkv, n, 3 * d, d + h * dh, dh),
            false,
        );
    }
    dqkv
}

pub fn add_in_place<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}
