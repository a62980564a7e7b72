//! Dense rank-4 tensors in NCHW layout.
//!
//! Everything in the crate moves through [`Tensor<E>`]: a shape plus a flat,
//! row-major `Vec<E>`. The element type is generic over [`Scalar`] so the
//! same model code runs in `f32` (training, inference) and `f64` (gradient
//! checking). No views, no strides: a tensor owns its buffer, and ops that
//! need a different layout copy. At the scales this crate targets that is a
//! feature, not a bug — every buffer is contiguous and every loop is a plain
//! forward scan.

use std::fmt;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` or `f64`.
///
/// The trait carries exactly what the kernels need — conversions, a few
/// transcendental functions, and a GEMM entry point that dispatches to
/// `matrixmultiply`'s `sgemm`/`dgemm`.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    /// Serialized element width in bytes; doubles as the on-disk type tag.
    const BYTE_WIDTH: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    /// Append this value's little-endian bytes.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode one value from exactly `BYTE_WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// C (row-major, MxN) = alpha * A (MxK) * B (KxN) + beta * C.
    ///
    /// Strides are in elements; all matrices are dense row-major here.
    ///
    /// # Safety
    /// Pointers must reference buffers of at least the implied extents.
    unsafe fn gemm(
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

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const BYTE_WIDTH: u8 = std::mem::size_of::<$ty>() as u8;

            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }
            #[inline(always)]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            #[inline(always)]
            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("caller sizes the slice"))
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$ty>::abs(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$ty>::sqrt(self)
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$ty>::exp(self)
            }
            #[inline(always)]
            fn maximum(self, other: Self) -> Self {
                // NaN-propagating max is not wanted here; ties keep `self`.
                if other > self {
                    other
                } else {
                    self
                }
            }

            unsafe fn gemm(
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
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dimensions of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn chw(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements per channel plane.
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// The 1x1x1x1 shape used for scalar losses.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::scalar()
    }

    /// Flat offset of `(n, c, h, w)` in row-major NCHW order.
    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A dense NCHW tensor owning its storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    /// All-zeros tensor.
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::ZERO; shape.len()],
        }
    }

    /// Tensor filled with one value.
    pub fn full(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Wrap an existing buffer; `data.len()` must equal `shape.len()`.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "from_vec",
                format!("buffer has {} elements, shape {shape} needs {}", data.len(), shape.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Build elementwise from the index function.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
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

    /// Value at `(n, c, h, w)`.
    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.shape.at(n, c, h, w)]
    }

    /// Mutable value at `(n, c, h, w)`.
    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut E {
        &mut self.data[self.shape.at(n, c, h, w)]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {shape} changes element count", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// New tensor with `f` applied to every element.
    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Convert elements to another scalar type via `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute element, 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Sum of all elements accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64()).sum()
    }

    /// Add `other` elementwise into `self` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    /// Fill with zeros, keeping the allocation.
    pub fn zero_(&mut self) {
        self.data.fill(E::ZERO);
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>({})", std::any::type_name::<E>(), self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.len())
        }
    }
}
