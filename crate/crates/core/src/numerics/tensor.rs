//! Dense row-major tensors and the HFAT binary container.
//!
//! HFAT layout (all integers little-endian):
//!
//! ```text
//! b"HFAT" | u8 version = 1 | u8 dtype (0 = f32, 1 = f64) | u32 rank
//!         | rank x u64 extents | payload (product(extents) values, LE)
//! ```

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

pub const HFAT_MAGIC: &[u8; 4] = b"HFAT";
pub const HFAT_VERSION: u8 = 1;

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: u8;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[inline]
pub(crate) fn c<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
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

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_hfat_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + T::BYTES * self.data.len());
        out.extend_from_slice(HFAT_MAGIC);
        out.push(HFAT_VERSION);
        out.push(T::DTYPE);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_hfat<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_hfat_bytes())
    }

    pub fn save_hfat(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_hfat_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses one HFAT record from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed. Payloads stored at the other
    /// precision are converted.
    pub fn parse_hfat(bytes: &[u8], source: &str) -> Result<(Self, usize)> {
        let fail = |detail: String| Error::Format {
            path: source.to_string(),
            detail,
        };
        if bytes.len() < 10 {
            return Err(fail("truncated HFAT header".into()));
        }
        if &bytes[..4] != HFAT_MAGIC {
            return Err(fail("bad HFAT magic".into()));
        }
        if bytes[4] != HFAT_VERSION {
            return Err(fail(format!("unsupported HFAT version {}", bytes[4])));
        }
        let dtype = bytes[5];
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(fail(format!("unknown HFAT dtype {d}"))),
        };
        let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = 10 + 8 * rank;
        if bytes.len() < header {
            return Err(fail("truncated HFAT extents".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 10 + 8 * i;
            let e = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            shape.push(usize::try_from(e).map_err(|_| fail("extent overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| fail("extent product overflow".into()))?;
        let payload = count * width;
        if bytes.len() < header + payload {
            return Err(fail(format!(
                "payload length {} shorter than the {} bytes implied by shape {:?}",
                bytes.len() - header,
                payload,
                shape
            )));
        }
        let body = &bytes[header..header + payload];
        let data: Vec<T> = if dtype == 0 {
            body.chunks_exact(4)
                .map(|ch| T::from_f64(f32::read_le(ch) as f64))
                .collect()
        } else {
            body.chunks_exact(8)
                .map(|ch| T::from_f64(f64::read_le(ch)))
                .collect()
        };
        Ok((Self { shape, data }, header + payload))
    }

    pub fn read_hfat<R: Read>(mut r: R, source: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(source, e))?;
        let (t, used) = Self::parse_hfat(&bytes, source)?;
        if used != bytes.len() {
            return Err(Error::Format {
                path: source.to_string(),
                detail: format!("{} trailing bytes after HFAT payload", bytes.len() - used),
            });
        }
        Ok(t)
    }

    pub fn load_hfat(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_hfat(std::io::BufReader::new(file), &path.display().to_string())
    }
}
