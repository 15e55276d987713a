//! Dense row-major tensors and a reverse-mode tape.
//!
//! Every differentiable computation in the crate is expressed as a sequence of
//! [`Tape`] operations over [`Var`] handles. The engine is generic over the
//! element type so the same code path can be checked in double precision;
//! production models use `f32`.

mod rng;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use rng::SeededRng;
pub use tape::{Tape, Var};

/// Floating point element type supported by the engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a·b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

macro_rules! impl_real {
    ($ty:ty, $name:literal, $gemm:path) => {
        impl Real for $ty {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |r: usize, c: usize, rs: isize, cs: isize| {
                    (r.saturating_sub(1) as isize * rs + c.saturating_sub(1) as isize * cs) as usize
                };
                assert!(k == 0 || last(m, k, rsa, csa) < a.len());
                assert!(k == 0 || last(k, n, rsb, csb) < b.len());
                assert!(last(m, n, rsc, csc) < c.len());
                if m * k * n <= SMALL_GEMM && small_gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) {
                    return;
                }
                // SAFETY: the asserts above bound every strided access inside
                // the three slices, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

/// Products up to this many multiply-adds skip `matrixmultiply`, whose
/// packing dominates at the sizes a small transformer produces.
const SMALL_GEMM: usize = 64 * 1024;

/// Direct product for contiguous layouts: `c` row-major, and either `a`
/// row-major with `b` row-major or transposed, or `a` transposed with `b`
/// row-major. Returns false, touching nothing, for any other layout.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float + AddAssign + Sum>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) -> bool {
    let a_rows = csa == 1 && rsa >= k as isize;
    let a_cols = rsa == 1 && csa >= m as isize;
    let b_rows = csb == 1 && rsb >= n as isize;
    let b_cols = rsb == 1 && csb >= k as isize;
    if csc != 1 || rsc < n as isize || !((a_rows && (b_rows || b_cols)) || (a_cols && b_rows)) {
        return false;
    }
    let (rsa, csa, rsb, csb, rsc) = (rsa as usize, csa as usize, rsb as usize, csb as usize, rsc as usize);
    for i in 0..m {
        let crow = &mut c[i * rsc..i * rsc + n];
        if beta == T::zero() {
            crow.fill(T::zero());
        } else {
            crow.iter_mut().for_each(|x| *x = *x * beta);
        }
    }
    if a_cols {
        for p in 0..k {
            let brow = &b[p * rsb..p * rsb + n];
            for (i, &aip) in a[p * csa..p * csa + m].iter().enumerate() {
                let s = alpha * aip;
                for (cj, &bj) in c[i * rsc..i * rsc + n].iter_mut().zip(brow) {
                    *cj += s * bj;
                }
            }
        }
        return true;
    }
    for i in 0..m {
        let arow = &a[i * rsa..i * rsa + k];
        let crow = &mut c[i * rsc..i * rsc + n];
        if b_rows {
            for (p, &aip) in arow.iter().enumerate() {
                let s = alpha * aip;
                for (cj, &bj) in crow.iter_mut().zip(&b[p * rsb..p * rsb + n]) {
                    *cj += s * bj;
                }
            }
        } else {
            for (j, cj) in crow.iter_mut().enumerate() {
                let dot: T = arow.iter().zip(&b[j * csb..j * csb + k]).map(|(&x, &y)| x * y).sum();
                *cj += alpha * dot;
            }
        }
    }
    true
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Dense array with an optional gradient buffer of identical layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!("gradient of length {} for tensor {:?}", grad.len(), self.shape)));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from(*x).expect("castable")).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|x| U::from(*x).expect("castable")).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
