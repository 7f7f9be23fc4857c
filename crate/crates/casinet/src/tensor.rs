//! Dense rank-4 tensors in row-major (batch, channel, height, width) layout,
//! with seeded initialization and a bit-exact file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// 16-byte magic prefixing every tensor file.
const MAGIC: &[u8; 16] = b"CASINET.TENSOR\x00\x01";

/// Shape of a rank-4 tensor. Zero-sized dimensions are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "zero-sized dimension in ({n},{c},{h},{w})"
            )));
        }
        Ok(Shape { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of element (n, c, i, j).
    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor of 64-bit reals. Values are finite by construction;
/// operations treat tensors as immutable and produce fresh outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Tensor {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: Shape, value: f64) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Tensor::full".into()));
        }
        Ok(Tensor { shape, data: vec![value; shape.numel()] })
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose outputs are finite by
    /// construction (bounded maps of finite inputs); skips the scan.
    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { shape, data }
    }

    /// I.i.d. normal samples with the given standard deviation.
    pub fn randn(shape: Shape, rng: &mut Rng, stddev: f64) -> Result<Tensor> {
        if !(stddev > 0.0) {
            return Err(Error::Param(format!("stddev must be positive, got {stddev}")));
        }
        let data = (0..shape.numel()).map(|_| stddev * rng.normal()).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.shape.at(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let idx = self.shape.at(n, c, i, j);
        self.data[idx] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a (1,1,1,1) tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Write in the `.ten` format: magic, version, little-endian dims, raw
    /// little-endian f64 payload. Bit-exact round trip.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for d in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Tensor> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)
            .map_err(|_| Error::CorruptTensor("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::CorruptTensor("magic number mismatch".into()));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::CorruptTensor("truncated dims".into()))?;
            *d = u64::from_le_bytes(buf) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|e| Error::CorruptTensor(e.to_string()))?;
        let mut data = vec![0.0f64; shape.numel()];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::CorruptTensor("truncated payload".into()))?;
            *v = f64::from_le_bytes(buf);
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::CorruptTensor("trailing bytes".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptTensor("non-finite payload".into()));
        }
        Ok(Tensor { shape, data })
    }
}
