//! Dense row-major arrays over `f32`/`f64`.
//!
//! [`NdArray`] is a contiguous buffer plus a shape. It carries the autodiff
//! bookkeeping (`requires_grad`, `grad`) but no tape reference; recording
//! happens in [`crate::tape`]. `f32` is the working element type, `f64` the
//! verification type used by gradient checks and oracles.

use crate::error::{Error, Result};

/// Element type for arrays: the two float widths the tracker supports.
///
/// The trait pins down everything the kernels need — arithmetic, transcendental
/// functions, byte-level serialization and a GEMM primitive — so that every
/// algorithm in the crate can be written once and instantiated at either
/// precision.
pub trait Elem:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
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
    /// Name used in checkpoint manifests ("f32" / "f64").
    const DTYPE: &'static str;
    /// Size of one element in bytes.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Reads one element from little-endian bytes (`b.len() == Self::BYTES`).
    fn from_le(b: &[u8]) -> Self;
    /// Appends the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// `C = alpha * A * B + beta * C` for row/column strided matrices.
    ///
    /// Dispatches to the SIMD GEMM kernel for the element width. Safety: the
    /// pointers must cover `m x k`, `k x n`, `m x n` elements under the given
    /// strides.
    #[allow(clippy::too_many_arguments)]
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

macro_rules! impl_elem {
    ($t:ty, $dtype:literal, $gemm:path) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: &'static str = $dtype;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
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
            fn maxv(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
            #[inline]
            fn minv(self, o: Self) -> Self {
                <$t>::min(self, o)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn from_le(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b.try_into().expect("element byte width"))
            }
            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
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

impl_elem!(f32, "f32", matrixmultiply::sgemm);
impl_elem!(f64, "f64", matrixmultiply::dgemm);

/// Dense row-major array.
///
/// The shape and buffer are kept consistent by construction, so both are
/// private; `requires_grad` and `grad` are plain data the tape reads and
/// writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Whether backward should produce a gradient for this array when it is
    /// registered as a tape leaf.
    pub requires_grad: bool,
    /// Gradient buffer, same length as `data`, populated by backward.
    pub grad: Option<Vec<T>>,
}

impl<T: Elem> NdArray<T> {
    /// Builds an array from a shape and matching buffer.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(NdArray { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    /// All-zeros array of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![T::ZERO; numel], requires_grad: false, grad: None }
    }

    /// Constant-filled array.
    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![v; numel], requires_grad: false, grad: None }
    }

    /// Single-element array of shape `[1]`.
    pub fn scalar(v: T) -> Self {
        NdArray { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Consumes the array, returning its buffer.
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The scalar value of a one-element array.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!("item() on array of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} ({} elements) as {:?}", self.shape, self.data.len(), shape),
            ));
        }
        Ok(NdArray { shape: shape.to_vec(), data: self.data.clone(), requires_grad: false, grad: None })
    }

    /// Marks the array as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Interprets the shape as `[a, b]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::dim("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// Interprets the shape as `[a, b, c]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::dim("dims3", format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    /// Interprets the shape as `[n, c, h, w]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim("dims4", format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Largest absolute difference to another array of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "max_abs_diff",
                format!("shape {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut m = 0.0f64;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            m = m.max((a.to_f64() - b.to_f64()).abs());
        }
        Ok(m)
    }

    /// Converts element type (used to move fixtures between precisions).
    pub fn cast<U: Elem>(&self) -> NdArray<U> {
        let data = self.data.iter().map(|v| U::from_f64(v.to_f64())).collect();
        NdArray { shape: self.shape.clone(), data, requires_grad: self.requires_grad, grad: None }
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(NdArray::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(NdArray::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let a = NdArray::<f64>::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b = a.reshaped(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.data(), a.data());
        assert!(a.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
    }

    #[test]
    fn elem_round_trips_bytes() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        assert_eq!(buf.len(), 4);
        assert_eq!(f32::from_le(&buf), 1.5);
        let mut buf = Vec::new();
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f64::from_le(&buf), -2.25);
    }

    #[test]
    fn gemm_matches_hand_product() {
        // 2x2 product checked by hand.
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        unsafe {
            f32::gemm(2, 2, 2, 1.0, a.as_ptr(), 2, 1, b.as_ptr(), 2, 1, 0.0, c.as_mut_ptr(), 2, 1);
        }
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
