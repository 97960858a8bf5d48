//! Dense rank-4 tensors in `[batch, height, width, channel]` layout.
//!
//! Row-major with the channel axis contiguous, so a pixel's channel slice is
//! one `&[E]` and convolution inner loops reduce to contiguous copies plus
//! GEMM calls. Scalars are `[1,1,1,1]`, per-channel vectors `[1,1,1,C]`.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar type the engine is generic over. The pipeline runs f32; f64 exists
/// for finite-difference gradient checking, where f32 rounding would drown
/// the comparison.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const BITS: u32;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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

impl Element for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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
        unsafe {
            matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

impl Element for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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
        unsafe {
            matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

/// Row-major matrix product with optional logical transposes.
///
/// `a` holds `m*k` elements (stored `[k,m]` when `a_trans`), `b` holds `k*n`
/// (stored `[n,k]` when `b_trans`), `c` holds `m*n` row-major.
pub fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    a_trans: bool,
    b: &[E],
    b_trans: bool,
    beta: E,
    c: &mut [E],
) {
    assert_eq!(a.len(), m * k, "gemm: a length");
    assert_eq!(b.len(), k * n, "gemm: b length");
    assert_eq!(c.len(), m * n, "gemm: c length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    E::gemm_strided(
        m,
        k,
        n,
        alpha,
        a.as_ptr(),
        rsa,
        csa,
        b.as_ptr(),
        rsb,
        csb,
        beta,
        c.as_mut_ptr(),
        n as isize,
        1,
    );
}

pub type Shape = [usize; 4];

pub fn shape_len(s: Shape) -> usize {
    s[0] * s[1] * s[2] * s[3]
}

pub fn fmt_shape(s: Shape) -> String {
    format!("[{},{},{},{}]", s[0], s[1], s[2], s[3])
}

#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![E::zero(); shape_len(shape)] }
    }

    pub fn filled(shape: Shape, v: E) -> Self {
        Tensor { shape, data: vec![v; shape_len(shape)] }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    /// Wraps raw data, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape_len(shape) {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!(
                    "{} elements do not fill shape {}",
                    data.len(),
                    fmt_shape(shape)
                ),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("from_vec")?;
        Ok(t)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape_len(shape));
        for n in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    for c in 0..shape[3] {
                        data.push(f(n, h, w, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape_len(shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{} -> {}", fmt_shape(self.shape), fmt_shape(shape)),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn idx(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> E {
        self.data[self.idx(n, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, v: E) {
        let i = self.idx(n, h, w, c);
        self.data[i] = v;
    }

    /// Contiguous channel slice of one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, h: usize, w: usize) -> &[E] {
        let i = self.idx(n, h, w, 0);
        &self.data[i..i + self.shape[3]]
    }

    #[inline]
    pub fn pixel_mut(&mut self, n: usize, h: usize, w: usize) -> &mut [E] {
        let i = self.idx(n, h, w, 0);
        let c = self.shape[3];
        &mut self.data[i..i + c]
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sq_l2(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor<E>, s: E) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b * s;
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| F::of_f64(v.as_f64())).collect(),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", fmt_shape(self.shape))?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major_channel_last() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |n, h, w, c| {
            (n * 1000 + h * 100 + w * 10 + c) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.idx(0, 0, 0, 1), 1);
        assert_eq!(t.idx(0, 0, 1, 0), 5);
        assert_eq!(t.idx(0, 1, 0, 0), 20);
        assert_eq!(t.idx(1, 0, 0, 0), 60);
        assert_eq!(t.pixel(1, 2, 3), &[1230.0, 1231.0, 1232.0, 1233.0, 1234.0]);
    }

    #[test]
    fn from_vec_rejects_wrong_length_and_non_finite() {
        let err = Tensor::<f32>::from_vec([1, 2, 2, 1], vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("[1,2,2,1]"), "{err}");
        let err = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![1.0, f32::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn gemm_matches_naive_matmul() {
        // 2x3 * 3x2 worked out by hand.
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f32; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // Transposed A: store A as [3,2] and use it as [2,3].
        let a_t = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0f32; 4];
        gemm(2, 3, 2, 1.0, &a_t, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);

        // Transposed B and beta accumulation.
        let b_t = [7.0f32, 9.0, 11.0, 8.0, 10.0, 12.0];
        gemm(2, 3, 2, 1.0, &a, false, &b_t, true, 1.0, &mut c2);
        assert_eq!(c2, [116.0, 128.0, 278.0, 308.0]);
    }

    #[test]
    fn gemm_f64_path() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
