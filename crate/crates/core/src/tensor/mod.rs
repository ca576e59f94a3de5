//! Dense row-major tensors with just enough machinery for the networks in
//! this crate: typed storage (f32 for models, f64 for gradient checking),
//! an eager autograd tape, and the `PSTEN001` on-disk format.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckEval};
pub use tape::{NodeId, Tape};

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Element type of a tensor. The networks run in `f32`; finite-difference
/// gradient checks instantiate the same code with `f64` so the differences
/// stay meaningful at the checked tolerances.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense N-dimensional array, row-major, with an optional gradient buffer of
/// the same shape. Shapes are non-empty lists of positive extents.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}, len={})", self.shape, self.data.len())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Dim("tensor shape must have at least one axis".into()));
    }
    let mut n: usize = 1;
    for (axis, &d) in shape.iter().enumerate() {
        if d == 0 {
            return Err(Error::Dim(format!("axis {axis} has zero extent in {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Dim(format!("shape {shape:?} overflows element count")))?;
    }
    Ok(n)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n], grad: None }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), grad: None }
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

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dim(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data under a new shape with an identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), grad: None })
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds on axis {i}");
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Errors with `NonFinite` if any element is NaN or infinite.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite(context.to_string()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Largest relative elementwise difference against `other`, normalized by
    /// `max(1, |a|, |b|)`. Used throughout the test suites.
    pub fn max_rel_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "shape mismatch in comparison: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let (a, b) = (a.to_f64(), b.to_f64());
            let denom = 1.0f64.max(a.abs()).max(b.abs());
            worst = worst.max((a - b).abs() / denom);
        }
        Ok(worst)
    }

    /// Serialize in the `PSTEN001` format: 8-byte magic, little-endian u32
    /// rank, little-endian u32 dims, then raw little-endian f32 data
    /// row-major. `f64` tensors are narrowed to f32 on write.
    pub fn write_pst<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PST_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&v.to_f32().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pst<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PST_MAGIC {
            return Err(Error::Input(format!(
                "bad tensor magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(PST_MAGIC)
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Input(format!("unsupported tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n = check_shape(&shape).map_err(|e| Error::Input(e.to_string()))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pst(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_pst(&mut f)
    }
}

pub const PST_MAGIC: &[u8; 8] = b"PSTEN001";

/// Gaussian init scaled by fan-in, computed in f64 so that f32 and f64
/// instantiations of the same model see bit-identical f32 parameters.
pub fn randn_scaled<T: Scalar, R: rand::Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    use rand_distr::Distribution;
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0f64, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::from_f32(normal.sample(rng) as f32))
}
