//! Forward and backward math for the graph's primitive kernels.
//!
//! Conventions: all buffers are contiguous row-major; every backward function
//! *accumulates* into its output gradient slice. Reductions run in a fixed
//! sequential order (or over disjoint rayon partitions), so results are
//! bit-identical across runs and thread counts.

use rayon::prelude::*;

use crate::tensor::{gemm, gemm_at, gemm_bt, Scalar};

pub const GELU_TANH_COEFF: f64 = 0.044_715;

/// sqrt(2/pi), used by the tanh GELU approximation.
pub fn gelu_scale<T: Scalar>() -> T {
    T::from_f64((2.0 / std::f64::consts::PI).sqrt())
}

// ---- matmul -------------------------------------------------------------

/// lhs (l, m, k) x rhs (k, n) -> out (l, m, n); the weight is shared across
/// the leading dimension, so the product collapses to one (l*m, k) gemm.
pub fn matmul_shared<T: Scalar>(l: usize, m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    gemm(l * m, k, n, a, b, out, T::ZERO);
}

pub fn matmul_shared_backward<T: Scalar>(
    l: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    g: &[T],
    da: &mut [T],
    db: &mut [T],
) {
    // dA = g . B^T, dB = A^T . g
    gemm_bt(l * m, n, k, g, b, da, T::ONE);
    gemm_at(k, l * m, n, a, g, db, T::ONE);
}

/// lhs (l, m, k) x rhs (l, k, n) -> out (l, m, n), independent per slab.
pub fn matmul_batched<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    a.par_chunks(m * k)
        .zip(b.par_chunks(k * n))
        .zip(out.par_chunks_mut(m * n))
        .for_each(|((al, bl), ol)| gemm(m, k, n, al, bl, ol, T::ZERO));
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_batched_backward<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    g: &[T],
    da: &mut [T],
    db: &mut [T],
) {
    g.par_chunks(m * n)
        .zip(b.par_chunks(k * n))
        .zip(da.par_chunks_mut(m * k))
        .for_each(|((gl, bl), dal)| gemm_bt(m, n, k, gl, bl, dal, T::ONE));
    g.par_chunks(m * n)
        .zip(a.par_chunks(m * k))
        .zip(db.par_chunks_mut(k * n))
        .for_each(|((gl, al), dbl)| gemm_at(k, m, n, al, gl, dbl, T::ONE));
}

// ---- elementwise ----------------------------------------------------------

pub fn add<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = *x + *y;
    }
}

/// a (outer, suffix) + b (suffix), rhs tiled over the leading dims.
pub fn add_bcast<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let s = b.len();
    for (oc, ac) in out.chunks_mut(s).zip(a.chunks(s)) {
        for ((o, x), y) in oc.iter_mut().zip(ac).zip(b) {
            *o = *x + *y;
        }
    }
}

pub fn add_bcast_backward_rhs<T: Scalar>(g: &[T], db: &mut [T]) {
    let s = db.len();
    for gc in g.chunks(s) {
        for (d, gi) in db.iter_mut().zip(gc) {
            *d += *gi;
        }
    }
}

pub fn mul<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = *x * *y;
    }
}

/// a (outer, d) * b (d): per-channel scaling, e.g. LayerScale or a norm gain.
pub fn mul_bcast_last<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let d = b.len();
    for (oc, ac) in out.chunks_mut(d).zip(a.chunks(d)) {
        for ((o, x), y) in oc.iter_mut().zip(ac).zip(b) {
            *o = *x * *y;
        }
    }
}

pub fn mul_bcast_last_backward<T: Scalar>(a: &[T], b: &[T], g: &[T], da: &mut [T], db: &mut [T]) {
    let d = b.len();
    for ((gc, ac), dc) in g.chunks(d).zip(a.chunks(d)).zip(da.chunks_mut(d)) {
        for i in 0..d {
            dc[i] += gc[i] * b[i];
            db[i] += gc[i] * ac[i];
        }
    }
}

/// a (batch, rest) * b (batch): per-sample scalar, used by drop path.
pub fn mul_bcast_sample<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let rest = a.len() / b.len();
    for ((oc, ac), s) in out.chunks_mut(rest).zip(a.chunks(rest)).zip(b) {
        for (o, x) in oc.iter_mut().zip(ac) {
            *o = *x * *s;
        }
    }
}

pub fn mul_bcast_sample_backward<T: Scalar>(a: &[T], b: &[T], g: &[T], da: &mut [T], db: &mut [T]) {
    let rest = a.len() / b.len();
    for (bi, ((gc, ac), dc)) in g
        .chunks(rest)
        .zip(a.chunks(rest))
        .zip(da.chunks_mut(rest))
        .enumerate()
    {
        let s = b[bi];
        let mut acc = T::ZERO;
        for i in 0..rest {
            dc[i] += gc[i] * s;
            acc += gc[i] * ac[i];
        }
        db[bi] += acc;
    }
}

pub fn scale<T: Scalar>(a: &[T], factor: T, out: &mut [T]) {
    for (o, x) in out.iter_mut().zip(a) {
        *o = *x * factor;
    }
}

// ---- nonlinearities -------------------------------------------------------

/// Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu<T: Scalar>(a: &[T], out: &mut [T]) {
    let c = gelu_scale::<T>();
    let k = T::from_f64(GELU_TANH_COEFF);
    let half = T::from_f64(0.5);
    for (o, &x) in out.iter_mut().zip(a) {
        let t = (c * (x + k * x * x * x)).tanh();
        *o = half * x * (T::ONE + t);
    }
}

pub fn gelu_backward<T: Scalar>(a: &[T], g: &[T], da: &mut [T]) {
    let c = gelu_scale::<T>();
    let k = T::from_f64(GELU_TANH_COEFF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    for ((d, &x), &gi) in da.iter_mut().zip(a).zip(g) {
        let u = c * (x + k * x * x * x);
        let t = u.tanh();
        let du = c * (T::ONE + three * k * x * x);
        let dy = half * (T::ONE + t) + half * x * (T::ONE - t * t) * du;
        *d += gi * dy;
    }
}

// ---- normalization ----------------------------------------------------------

/// Pre-affine layer norm over the last dimension: (x - mean) / sqrt(var + eps),
/// biased variance. Gain/bias are composed as separate mul/add kernels.
pub fn layer_norm<T: Scalar>(a: &[T], d: usize, eps: T, out: &mut [T]) {
    let inv_d = T::ONE / T::from_f64(d as f64);
    for (oc, ac) in out.chunks_mut(d).zip(a.chunks(d)) {
        let mean = ac.iter().copied().sum::<T>() * inv_d;
        let mut var = T::ZERO;
        for &x in ac {
            let c = x - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv_std = T::ONE / (var + eps).sqrt();
        for (o, &x) in oc.iter_mut().zip(ac) {
            *o = (x - mean) * inv_std;
        }
    }
}

pub fn layer_norm_backward<T: Scalar>(a: &[T], d: usize, eps: T, g: &[T], da: &mut [T]) {
    let inv_d = T::ONE / T::from_f64(d as f64);
    for ((gc, ac), dc) in g.chunks(d).zip(a.chunks(d)).zip(da.chunks_mut(d)) {
        let mean = ac.iter().copied().sum::<T>() * inv_d;
        let mut var = T::ZERO;
        for &x in ac {
            let c = x - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv_std = T::ONE / (var + eps).sqrt();
        let mut g_mean = T::ZERO;
        let mut gy_mean = T::ZERO;
        for (&gi, &x) in gc.iter().zip(ac) {
            let y = (x - mean) * inv_std;
            g_mean += gi;
            gy_mean += gi * y;
        }
        g_mean *= inv_d;
        gy_mean *= inv_d;
        for ((di, &gi), &x) in dc.iter_mut().zip(gc).zip(ac) {
            let y = (x - mean) * inv_std;
            *di += (gi - g_mean - y * gy_mean) * inv_std;
        }
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax<T: Scalar>(a: &[T], d: usize, out: &mut [T]) {
    for (oc, ac) in out.chunks_mut(d).zip(a.chunks(d)) {
        let mut max = ac[0];
        for &x in &ac[1..] {
            max = max.maximum(x);
        }
        let mut denom = T::ZERO;
        for (o, &x) in oc.iter_mut().zip(ac) {
            let e = (x - max).exp();
            *o = e;
            denom += e;
        }
        let inv = T::ONE / denom;
        for o in oc.iter_mut() {
            *o *= inv;
        }
    }
}

/// Backward in terms of the *output* y: dx = y * (g - sum(g*y)).
pub fn softmax_backward<T: Scalar>(y: &[T], d: usize, g: &[T], da: &mut [T]) {
    for ((gc, yc), dc) in g.chunks(d).zip(y.chunks(d)).zip(da.chunks_mut(d)) {
        let mut dot = T::ZERO;
        for (&gi, &yi) in gc.iter().zip(yc) {
            dot += gi * yi;
        }
        for ((di, &gi), &yi) in dc.iter_mut().zip(gc).zip(yc) {
            *di += yi * (gi - dot);
        }
    }
}

// ---- reductions -----------------------------------------------------------

/// (b, n, d) -> (b, d), mean over the token axis.
pub fn mean_tokens<T: Scalar>(a: &[T], n: usize, d: usize, out: &mut [T]) {
    let inv_n = T::ONE / T::from_f64(n as f64);
    for (oc, ac) in out.chunks_mut(d).zip(a.chunks(n * d)) {
        oc.fill(T::ZERO);
        for tok in ac.chunks(d) {
            for (o, &x) in oc.iter_mut().zip(tok) {
                *o += x;
            }
        }
        for o in oc.iter_mut() {
            *o *= inv_n;
        }
    }
}

pub fn mean_tokens_backward<T: Scalar>(n: usize, d: usize, g: &[T], da: &mut [T]) {
    let inv_n = T::ONE / T::from_f64(n as f64);
    for (gc, dc) in g.chunks(d).zip(da.chunks_mut(n * d)) {
        for tok in dc.chunks_mut(d) {
            for (di, &gi) in tok.iter_mut().zip(gc) {
                *di += gi * inv_n;
            }
        }
    }
}

pub fn sum_all<T: Scalar>(a: &[T]) -> T {
    a.iter().copied().sum()
}

// ---- data movement ----------------------------------------------------------

/// Permute axes of a row-major tensor, materializing the result.
pub fn permute<T: Scalar>(a: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let mut out = vec![T::ZERO; a.len()];
    // Walk the output in order; map each output index back to the input.
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for (j, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[j]];
        }
        *o = a[src];
        for j in (0..rank).rev() {
            idx[j] += 1;
            if idx[j] < out_shape[j] {
                break;
            }
            idx[j] = 0;
        }
    }
    (out, out_shape)
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row gather: in (r, c), out (indices.len(), c).
pub fn gather_rows<T: Scalar>(a: &[T], c: usize, indices: &[usize], out: &mut [T]) {
    for (oc, &i) in out.chunks_mut(c).zip(indices) {
        oc.copy_from_slice(&a[i * c..(i + 1) * c]);
    }
}

pub fn gather_rows_backward<T: Scalar>(c: usize, indices: &[usize], g: &[T], da: &mut [T]) {
    for (gc, &i) in g.chunks(c).zip(indices) {
        for (d, &gi) in da[i * c..(i + 1) * c].iter_mut().zip(gc) {
            *d += gi;
        }
    }
}

// ---- loss -----------------------------------------------------------------

/// Mean over the batch of -<target, log softmax(logits)>; targets are
/// probability rows. Returns the scalar loss.
pub fn soft_cross_entropy<T: Scalar>(logits: &[T], targets: &[T], k: usize) -> T {
    let b = logits.len() / k;
    let mut total = T::ZERO;
    for (zr, tr) in logits.chunks(k).zip(targets.chunks(k)) {
        let mut max = zr[0];
        for &z in &zr[1..] {
            max = max.maximum(z);
        }
        let mut denom = T::ZERO;
        let mut dot = T::ZERO;
        for (&z, &t) in zr.iter().zip(tr) {
            denom += (z - max).exp();
            dot += t * z;
        }
        total += max + denom.ln() - dot;
    }
    total / T::from_f64(b as f64)
}

/// dL/dlogits = (softmax(logits) - targets) / batch, scaled by the incoming
/// scalar gradient. Targets are constants.
pub fn soft_cross_entropy_backward<T: Scalar>(
    logits: &[T],
    targets: &[T],
    k: usize,
    g: T,
    dlogits: &mut [T],
) {
    let b = logits.len() / k;
    let scale = g / T::from_f64(b as f64);
    let mut probs = vec![T::ZERO; k];
    for ((zr, tr), dr) in logits
        .chunks(k)
        .zip(targets.chunks(k))
        .zip(dlogits.chunks_mut(k))
    {
        softmax(zr, k, &mut probs);
        for ((d, &p), &t) in dr.iter_mut().zip(&probs).zip(tr) {
            *d += (p - t) * scale;
        }
    }
}
