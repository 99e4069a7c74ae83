//! Dense rank-4 tensor in `(n, c, h, w)` row-major layout, f64 throughout.

use crate::error::{AlignError, Result};
use std::io::{Read, Write};

pub const TENSOR_MAGIC: &[u8; 4] = b"RNT4";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims4 { n, c, h, w }
    }
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Dims4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        let dims = Dims4::new(n, c, h, w);
        Tensor4 {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        let dims = Dims4::new(n, c, h, w);
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        let dims = Dims4::new(n, c, h, w);
        if data.len() != dims.len() {
            return Err(AlignError::shape(format!(
                "data length {} does not match dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Placeholder with no storage; used when a node's value has been released.
    pub fn empty() -> Self {
        Tensor4 {
            dims: Dims4::new(0, 0, 0, 0),
            data: Vec::new(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor4 {
            dims: Dims4::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    /// 1-D content stored as `(1, len, 1, 1)`.
    pub fn from_slice_1d(v: &[f64]) -> Self {
        Tensor4 {
            dims: Dims4::new(1, v.len(), 1, 1),
            data: v.to_vec(),
        }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.offset(n, c, h, w);
        &mut self.data[i]
    }

    /// Reinterpret the same storage with new dims of identical length.
    pub fn reshaped(&self, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor4> {
        let dims = Dims4::new(n, c, h, w);
        if dims.len() != self.len() {
            return Err(AlignError::shape(format!(
                "cannot reshape {} to {dims}",
                self.dims
            )));
        }
        Ok(Tensor4 {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Write one `RNT4` block: magic, 4 little-endian u64 dims, f64 payload.
    pub fn write_block<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        for d in [self.dims.n, self.dims.c, self.dims.h, self.dims.w] {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read one `RNT4` block written by [`Tensor4::write_block`].
    pub fn read_block<R: Read>(input: &mut R) -> Result<Tensor4> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(AlignError::integrity(format!(
                "bad tensor magic {:?}, expected RNT4",
                magic
            )));
        }
        let mut dim = [0usize; 4];
        for d in dim.iter_mut() {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            *d = u64::from_le_bytes(buf) as usize;
        }
        let dims = Dims4::new(dim[0], dim[1], dim[2], dim[3]);
        if dims.len() > (1 << 31) {
            return Err(AlignError::integrity(format!(
                "tensor block dims {dims} unreasonably large"
            )));
        }
        let mut data = vec![0.0f64; dims.len()];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn fill_normal(&mut self, rng: &mut crate::rng::SeededRng, mean: f64, std: f64) {
        for v in self.data.iter_mut() {
            *v = rng.normal(mean, std);
        }
    }

    pub fn fill_uniform(&mut self, rng: &mut crate::rng::SeededRng, lo: f64, hi: f64) {
        for v in self.data.iter_mut() {
            *v = rng.uniform(lo, hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn indexing_is_row_major() {
        let mut t = Tensor4::zeros(2, 3, 4, 5);
        *t.at_mut(1, 2, 3, 4) = 9.0;
        assert_eq!(t.data()[t.len() - 1], 9.0);
        *t.at_mut(0, 0, 0, 1) = 4.0;
        assert_eq!(t.data()[1], 4.0);
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor4::from_vec(1, 1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn block_round_trip_is_bitwise() {
        let mut rng = SeededRng::new(5);
        let mut t = Tensor4::zeros(2, 3, 4, 4);
        t.fill_normal(&mut rng, 0.0, 1.0);
        let mut buf = Vec::new();
        t.write_block(&mut buf).unwrap();
        assert_eq!(&buf[..4], TENSOR_MAGIC);
        let back = Tensor4::read_block(&mut &buf[..]).unwrap();
        assert_eq!(t.dims(), back.dims());
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn read_block_rejects_bad_magic() {
        let mut buf = Vec::new();
        Tensor4::scalar(1.0).write_block(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor4::read_block(&mut &buf[..]).is_err());
    }
}
