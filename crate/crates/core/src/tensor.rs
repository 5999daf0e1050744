//! Dense row-major tensors and the `TAN1` binary container.
//!
//! Tensors are generic over [`Scalar`], which is implemented for `f32`
//! (training and inference) and `f64` (verification). Every tensor may carry
//! an optional gradient buffer of identical length.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::Container(format!("unknown precision tag {other}"))),
        }
    }
}

/// Floating-point element type usable in tensors.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// explicit row/column strides. When `beta` is zero `c` is not read.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    (a, rsa, csa): (usize, usize, usize),
    (b, rsb, csb): (usize, usize, usize),
    (c, rsc, csc): (usize, usize, usize),
) {
    assert!(span(m, k, rsa, csa) <= a, "gemm: lhs out of bounds");
    assert!(span(k, n, rsb, csb) <= b, "gemm: rhs out of bounds");
    assert!(span(m, n, rsc, csc) <= c, "gemm: output out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_bounds(
                    m,
                    k,
                    n,
                    (a.len(), rsa, csa),
                    (b.len(), rsb, csb),
                    (c.len(), rsc, csc),
                );
                // SAFETY: all three operands were bounds-checked against their
                // slices for the given extents and strides above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_scalar!(f32, Precision::F32, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::F64, matrixmultiply::dgemm);

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} elements but {} were given", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", format!("{} vs {}", grad.len(), self.data.len())));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|&x| U::of(x.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect(), grad: None }
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(op, format!("expected rank {rank}, got shape {:?}", self.shape)));
        }
        Ok(())
    }

    /// Writes the tensor in the `TAN1` container format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.shape.len() + self.data.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.push(T::PRECISION.tag());
        buf.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a `TAN1` container, converting from the stored precision if it
    /// differs from `T`.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Container("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Container(format!("bad magic {magic:?}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|_| Error::Container("truncated header".into()))?;
        let precision = Precision::from_tag(tag[0])?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 16 {
            return Err(Error::Container(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Container("extent overflow".into()))?;
        let width = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let mut payload = vec![0u8; n * width];
        r.read_exact(&mut payload).map_err(|_| Error::Container("truncated payload".into()))?;
        let data = match precision {
            Precision::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            Precision::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Tensor::from_vec(&shape, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

const MAGIC: &[u8; 4] = b"TAN1";

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Container("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TAN1");
        assert_eq!(buf[4], 32);
        assert_eq!(u64::from_le_bytes(buf[5..13].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[13..21].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[21..25].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 21 + 8);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let t = Tensor::<f64>::zeros(&[3, 3]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(Tensor::<f64>::read_from(&buf[..]), Err(Error::Container(_))));
        assert!(Tensor::<f64>::read_from(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn f32_container_reads_as_f64() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.5, 1.25, -3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::<f64>::read_from(&buf[..]).unwrap();
        assert_eq!(back.data(), &[0.5, 1.25, -3.0]);
    }

    proptest! {
        #[test]
        fn container_round_trip(
            shape in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) % 1000) as f64 * 0.37 - 100.0).collect();
            let t = Tensor::<f64>::from_vec(&shape, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = Tensor::<f64>::read_from(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
