//! Dense row-major tensors over `f32`/`f64`.
//!
//! Everything downstream (graph, model, optimizer) stores values in these
//! tensors. Training runs in `f32`; gradient verification runs the same code
//! paths in `f64`, selected through the [`Scalar`] trait.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rayon::prelude::*;

/// Element type tag used by the tensor archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element of a [`Tensor`].
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;

    /// C := alpha * A(m,k) * B(k,n) + beta * C with explicit row/column
    /// strides per operand (units of elements, as in BLAS gemm).
    ///
    /// # Safety
    /// Pointers must stay in bounds for every (row, col) index reachable
    /// under the given strides.
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
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense n-dimensional value with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::ZERO; n])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(&[], vec![value])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient slot; two accumulations without a reset
    /// sum (backward passes are additive by contract).
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient shape mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same values reinterpreted under a new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor<T> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            &self.shape,
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }

    pub fn iter_rows(&self, row_len: usize) -> impl Iterator<Item = &[T]> {
        assert_eq!(self.data.len() % row_len.max(1), 0);
        self.data.chunks(row_len)
    }
}

/// Row-major matmul: `c(m,n) += alpha * a(m,k) * b(k,n)` when `beta == 1`,
/// or overwrites when `beta == 0`.
///
/// Large products are split over fixed 64-row blocks and dispatched through
/// rayon; each output element is still produced by the same sequential inner
/// kernel, so results are identical for any thread count.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], beta: T) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    const BLOCK_ROWS: usize = 64;
    if m <= BLOCK_ROWS {
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::ONE,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        };
        return;
    }
    a.par_chunks(BLOCK_ROWS * k)
        .zip(c.par_chunks_mut(BLOCK_ROWS * n))
        .for_each(|(ab, cb)| {
            let rows = cb.len() / n;
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    T::ONE,
                    ab.as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    n as isize,
                    1,
                    beta,
                    cb.as_mut_ptr(),
                    n as isize,
                    1,
                )
            };
        });
}

/// `c(m,n) = a(m,k) * op_t(b) + beta*c` where `b` is a `(k,n)` row-major
/// matrix read transposed (i.e. the product contracts over `b`'s rows).
/// Here the contraction length is `k` and `b` physically holds `(n,k)`.
pub fn gemm_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], beta: T) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k, "gemm_bt: rhs holds (n,k) row-major");
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // B^T(k,n): element (row=l, col=j) lives at b[j*k + l].
    const BLOCK_ROWS: usize = 64;
    let run = |rows: usize, ab: &[T], cb: &mut [T]| unsafe {
        T::gemm_raw(
            rows,
            k,
            n,
            T::ONE,
            ab.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            cb.as_mut_ptr(),
            n as isize,
            1,
        )
    };
    if m <= BLOCK_ROWS {
        run(m, a, c);
        return;
    }
    a.par_chunks(BLOCK_ROWS * k)
        .zip(c.par_chunks_mut(BLOCK_ROWS * n))
        .for_each(|(ab, cb)| run(cb.len() / n, ab, cb));
}

/// `c(m,n) = op_t(a) * b + beta*c` where `a` physically holds `(k,m)`
/// row-major and is read transposed.
pub fn gemm_at<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], beta: T) {
    assert_eq!(a.len(), k * m, "gemm_at: lhs holds (k,m) row-major");
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_invariant() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn tensor_rejects_bad_length() {
        let _ = Tensor::<f32>::new(&[2, 3], vec![1.0; 5]);
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn gemm_identity() {
        // matmul(I, X) == X
        let eye = vec![1.0f32, 0.0, 0.0, 1.0];
        let x = vec![3.0f32, -1.0, 2.5, 7.0];
        let mut out = vec![0.0f32; 4];
        gemm(2, 2, 2, &eye, &x, &mut out, 0.0);
        assert_eq!(out, x);
    }

    #[test]
    fn gemm_blocked_matches_plain() {
        // 200 rows exercises the rayon split; compare against a hand loop.
        let m = 200;
        let k = 17;
        let n = 13;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64) * 0.01 - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 89) as f64) * 0.02 - 0.8).collect();
        let mut c = vec![0.0f64; m * n];
        gemm(m, k, n, &a, &b, &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-12, "mismatch at ({i},{j})");
            }
        }
    }
}
