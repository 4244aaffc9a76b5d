//! Dense 4-D tensors in (batch, channel, height, width) layout, the
//! differentiable operators the network needs, a tape-based reverse-mode
//! graph, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod ops;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};

pub use graph::{Graph, Mode, Var};
pub use ops::{Activation, BinaryKind, ConvSpec};

/// Scalar type a tensor can hold. Training and inference run in `f32`;
/// gradient checks run in `f64`.
pub trait Element:
    num_traits_lite::FloatLike + Copy + Send + Sync + Default + fmt::Debug + fmt::Display + PartialOrd + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for row/column strided matrices.
    /// `a` is m×k, `b` is k×n, `c` is m×n.
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
}

/// Arithmetic surface shared by `f32` and `f64`, kept local so the
/// kernels read naturally without pulling in a numeric-traits crate.
pub mod num_traits_lite {
    use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait FloatLike:
        Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
        + Sized
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn powi(self, n: i32) -> Self;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_float_like {
        ($t:ty) => {
            impl FloatLike for $t {
                #[inline]
                fn zero() -> Self {
                    0.0
                }
                #[inline]
                fn one() -> Self {
                    1.0
                }
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn powi(self, n: i32) -> Self {
                    <$t>::powi(self, n)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                #[inline]
                fn min(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
            }
        };
    }

    impl_float_like!(f32);
    impl_float_like!(f64);
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

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
        check_gemm_extent(a.len(), m, k, rsa, csa);
        check_gemm_extent(b.len(), k, n, rsb, csb);
        check_gemm_extent(c.len(), m, n, rsc, csc);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            );
        }
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

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
        check_gemm_extent(a.len(), m, k, rsa, csa);
        check_gemm_extent(b.len(), k, n, rsb, csb);
        check_gemm_extent(c.len(), m, n, rsc, csc);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            );
        }
    }
}

/// Extents of a 4-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Per-channel vector shape `(1, c, 1, 1)`.
    pub const fn vector(c: usize) -> Self {
        Shape::new(1, c, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match dims {
            [n, c, h, w] => {
                let s = Shape::new(*n, *c, *h, *w);
                s.validate()?;
                Ok(s)
            }
            _ => Err(Error::shape("shape", format!("expected 4 extents, got {}", dims.len()))),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (axis, v) in [
            (Axis::Batch, self.n),
            (Axis::Channel, self.c),
            (Axis::Height, self.h),
            (Axis::Width, self.w),
        ] {
            if v == 0 {
                return Err(Error::shape("shape", format!("{axis} extent must be at least 1")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>[{}]", T::NAME, self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data.as_slice())?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("data length {} does not match shape {shape}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor from a buffer the caller guarantees matches `shape`.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        shape.validate()?;
        if shape.numel() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} as {shape}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Converts every element to another precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape, self.data.iter().map(|v| U::of(v.f64())).collect())
    }

    /// Slices `count` batch entries starting at `start`.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape.n {
            return Err(Error::dim("batch_slice", Axis::Batch, self.shape.n, start + count));
        }
        let per = self.shape.c * self.shape.plane();
        let shape = Shape::new(count, self.shape.c, self.shape.h, self.shape.w);
        Ok(Tensor::from_parts(
            shape,
            self.data[start * per..(start + count) * per].to_vec(),
        ))
    }

    /// Stacks tensors of identical (c, h, w) along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack_batch", "no tensors to stack"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            for (axis, a, b) in [
                (Axis::Channel, first.c, s.c),
                (Axis::Height, first.h, s.h),
                (Axis::Width, first.w, s.w),
            ] {
                if a != b {
                    return Err(Error::dim("stack_batch", axis, a, b));
                }
            }
            n += s.n;
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::from_parts(Shape::new(n, first.c, first.h, first.w), data))
    }

    /// Selects a single channel as a `(n, 1, h, w)` tensor.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if c >= self.shape.c {
            return Err(Error::dim("channel", Axis::Channel, self.shape.c, c + 1));
        }
        let s = self.shape;
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            data.extend_from_slice(&self.data[base..base + plane]);
        }
        Ok(Tensor::from_parts(Shape::new(s.n, 1, s.h, s.w), data))
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in self.data.iter() {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = self.data[0];
        let mut hi = self.data[0];
        for &v in self.data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
