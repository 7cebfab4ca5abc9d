//! Dense row-major tensors and the on-disk container format.
//!
//! Layout convention: images and feature maps are stored channels x height x
//! width; a batch prepends a count axis. All in-memory arithmetic is f64; the
//! container format additionally stores f32 (images) and u8 (masks).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense tensor of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", "element count", n, data.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("Tensor::new", "zero-length axis"));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of `[c, y, x]` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += other`, dims must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }
}

/// Element type codes of the container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }
}

const MAGIC: &[u8; 4] = b"STNS";
const VERSION: u8 = 1;

fn container_err(path: &Path, what: impl Into<String>) -> Error {
    Error::Container {
        path: path.display().to_string(),
        what: what.into(),
    }
}

/// Write `t` to `path` in the container format, converting to `dtype`.
///
/// f32 and u8 conversion is value-truncating; callers keep data representable
/// in the target type when bit-exact round-trips matter (images are generated
/// at f32 precision, masks hold small integers).
pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype as u8, t.rank() as u8])?;
    for &d in t.dims() {
        if d > u32::MAX as usize {
            return Err(container_err(path, format!("axis too large: {d}")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::U8 => {
            for &v in t.data() {
                w.write_all(&[v as u8])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a container file into an f64 tensor (f32/u8 payloads are widened).
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (t, _) = read_tensor_with_dtype(path)?;
    Ok(t)
}

pub fn read_tensor_with_dtype(path: &Path) -> Result<(Tensor, Dtype)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[0..4] != MAGIC {
        return Err(container_err(path, "bad magic bytes"));
    }
    if head[4] != VERSION {
        return Err(container_err(path, format!("unsupported version {}", head[4])));
    }
    let dtype = Dtype::from_code(head[5])
        .ok_or_else(|| container_err(path, format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            for chunk in buf.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            for chunk in buf.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        Dtype::U8 => {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            data.extend(buf.iter().map(|&b| b as f64));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(container_err(path, "trailing bytes after payload"));
    }
    Ok((Tensor::new(dims, data)?, dtype))
}
