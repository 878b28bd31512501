//! Dense row-major `f64` tensors and the packed tensor file format.
//!
//! The on-disk format (extension `.cot`) is the interchange format for
//! spectrogram dumps, packed frame/flow clips, and mask exports. Byte layout
//! (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic: b"COFTENS1" (the trailing '1' is the format version)
//! 8       1           dtype: 0 = f32, 1 = f64, 2 = u8
//! 9       1           ndim: number of dimensions (1..=8)
//! 10      2           n_meta: number of metadata entries (u16)
//! 12      8 * ndim    dims, u64 each, outermost first (row-major, last dim fastest)
//! ...     per entry   metadata: key_len u16, key bytes (utf-8), val_len u16, val bytes
//! ...     n * size    payload: product(dims) elements of dtype
//! ```
//!
//! Metadata is a flat string map; spectrogram dumps carry `sample_rate`,
//! `window_size` and `hop` so other tools can interpret the grid.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"COFTENS1";

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.numel(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New tensor with the two leading axes swapped.
    pub fn transposed01(&self) -> Tensor {
        assert!(self.shape.len() >= 2);
        let (a, b) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut shape = self.shape.clone();
        shape.swap(0, 1);
        let mut out = Tensor::zeros(&shape);
        for i in 0..a {
            for j in 0..b {
                let src = &self.data[(i * b + j) * inner..(i * b + j + 1) * inner];
                out.data_mut()[(j * a + i) * inner..(j * a + i + 1) * inner]
                    .copy_from_slice(src);
            }
        }
        out
    }
}

/// Element type used when serializing a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// String metadata attached to a tensor file.
pub type TensorMeta = BTreeMap<String, String>;

/// Serialize `t` to `path` using the documented byte layout.
pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType, meta: &TensorMeta) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(64 + t.numel() * dtype.size());
    buf.extend_from_slice(MAGIC);
    buf.push(dtype.code());
    if t.shape.is_empty() || t.shape.len() > 8 {
        return Err(Error::invalid(format!(
            "tensor rank {} outside supported range 1..=8",
            t.shape.len()
        )));
    }
    buf.push(t.shape.len() as u8);
    if meta.len() > u16::MAX as usize {
        return Err(Error::invalid("too many metadata entries"));
    }
    buf.extend_from_slice(&(meta.len() as u16).to_le_bytes());
    for &d in &t.shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for (k, v) in meta {
        for s in [k, v] {
            let b = s.as_bytes();
            if b.len() > u16::MAX as usize {
                return Err(Error::invalid("metadata entry too long"));
            }
            buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
            buf.extend_from_slice(b);
        }
    }
    match dtype {
        DType::F32 => {
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::U8 => {
            for &v in &t.data {
                buf.push(v.clamp(0.0, 255.0).round() as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a tensor file back into an `f64` tensor plus its metadata.
pub fn read_tensor(path: &Path) -> Result<(Tensor, TensorMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::format(path, reason);

    if bytes.len() < 12 || &bytes[0..8] != MAGIC {
        return Err(fail("missing COFTENS1 magic"));
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| fail("unknown dtype code"))?;
    let ndim = bytes[9] as usize;
    if ndim == 0 || ndim > 8 {
        return Err(fail("ndim outside 1..=8"));
    }
    let n_meta = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let mut pos = 12;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        if pos + 8 > bytes.len() {
            return Err(fail("truncated dims"));
        }
        let d = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        shape.push(d as usize);
        pos += 8;
    }
    let mut meta = TensorMeta::new();
    for _ in 0..n_meta {
        let read_str = |pos: &mut usize| -> Result<String> {
            if *pos + 2 > bytes.len() {
                return Err(fail("truncated metadata"));
            }
            let len = u16::from_le_bytes([bytes[*pos], bytes[*pos + 1]]) as usize;
            *pos += 2;
            if *pos + len > bytes.len() {
                return Err(fail("truncated metadata"));
            }
            let s = std::str::from_utf8(&bytes[*pos..*pos + len])
                .map_err(|_| fail("metadata is not utf-8"))?
                .to_string();
            *pos += len;
            Ok(s)
        };
        let k = read_str(&mut pos)?;
        let v = read_str(&mut pos)?;
        meta.insert(k, v);
    }
    let n: usize = shape.iter().product();
    let payload = n * dtype.size();
    if bytes.len() != pos + payload {
        return Err(fail(&format!(
            "payload size mismatch: expected {} bytes after header, found {}",
            payload,
            bytes.len() - pos
        )));
    }
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F32 => {
            for c in bytes[pos..].chunks_exact(4) {
                data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
            }
        }
        DType::F64 => {
            for c in bytes[pos..].chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
        DType::U8 => {
            for &b in &bytes[pos..] {
                data.push(b as f64);
            }
        }
    }
    Ok((Tensor::from_vec(&shape, data), meta))
}
