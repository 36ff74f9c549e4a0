//! Dense row-major tensors and the `HIRT` binary tensor format.
//!
//! Layout on disk: magic `HIRT`, u32 version (1), u8 dtype (0 = f32, 1 = f64),
//! u8 ndim, `ndim` u64 extents, then the row-major little-endian payload.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HIRT_MAGIC: &[u8; 4] = b"HIRT";
pub const HIRT_VERSION: u32 = 1;

/// Element type used when serializing a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown HIRT dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense N-dimensional array of `f64` with an explicit shape.
///
/// Image-like data uses N×C×H×W order. A tensor is never mutated once
/// built; every operation produces a new one.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor from external data, rejecting shape mismatches and
    /// non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite element {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for values computed from already-validated tensors.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Fills a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() needs a single-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Interprets the tensor as N×C×H×W.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(format!(
                "expected a 4-d N×C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Copies channels `[start, end)` out of an N×C×H×W tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::shape(format!(
                "channel range {start}..{end} invalid for {c} channels"
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor::from_parts(vec![n, end - start, h, w], data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "zip_map")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape(self, other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // HIRT serialization -------------------------------------------------

    pub fn write_hirt<W: Write>(&self, mut w: W, dtype: DType) -> Result<()> {
        write_header(&mut w, &self.shape, dtype).map_err(|e| Error::io("<stream>", e))?;
        write_payload(&mut w, &self.data, dtype).map_err(|e| Error::io("<stream>", e))
    }

    /// Reads one tensor from a stream, leaving the stream positioned just
    /// after its payload.
    pub fn read_hirt<R: Read>(mut r: R) -> Result<Tensor> {
        let (shape, dtype) = read_hirt_header(&mut r)?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        let nbytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let mut data = Vec::with_capacity(numel);
        let mut buf = vec![0u8; 1 << 16];
        let mut remaining = nbytes;
        while remaining > 0 {
            let take = remaining.min(buf.len());
            read_exact(&mut r, &mut buf[..take], "payload")?;
            match dtype {
                DType::F32 => data.extend(
                    buf[..take]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
                ),
                DType::F64 => data.extend(buf[..take].chunks_exact(8).map(|b| {
                    f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
                })),
            }
            remaining -= take;
        }
        Tensor::new(&shape, data)
    }

    /// Writes a standalone HIRT file; the target only appears once fully written.
    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let path = path.as_ref();
        atomic_write(path, |w| {
            write_header(w, &self.shape, dtype)?;
            write_payload(w, &self.data, dtype)
        })
    }

    /// Reads a standalone HIRT file. Trailing bytes are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let t = Tensor::read_hirt(&mut reader)?;
        let mut probe = [0u8; 1];
        match reader.read(&mut probe) {
            Ok(0) => Ok(t),
            Ok(_) => Err(Error::Format(format!(
                "{}: trailing bytes after HIRT payload",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one extent"));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::shape(format!("too many dimensions ({})", shape.len())));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "extent at axis {axis} is zero in shape {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{what}: shapes differ ({:?} vs {:?})",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("HIRT stream ended while reading {what}"))
        } else {
            Error::io("<stream>", e)
        }
    })
}

/// Reads only the header of a HIRT stream: shape and stored dtype.
pub fn read_hirt_header<R: Read>(mut r: R) -> Result<(Vec<usize>, DType)> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != HIRT_MAGIC {
        return Err(Error::Format(format!(
            "bad HIRT magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != HIRT_VERSION {
        return Err(Error::Format(format!(
            "unsupported HIRT version {version} (expected {HIRT_VERSION})"
        )));
    }
    let mut two = [0u8; 2];
    read_exact(&mut r, &mut two, "dtype/ndim")?;
    let dtype = DType::from_code(two[0])?;
    let ndim = two[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut ext = [0u8; 8];
        read_exact(&mut r, &mut ext, "extents")?;
        shape.push(usize::try_from(u64::from_le_bytes(ext)).map_err(|_| {
            Error::Format("extent does not fit in usize".into())
        })?);
    }
    check_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
    Ok((shape, dtype))
}

/// Header of a HIRT file, without reading its payload.
pub fn peek_hirt(path: impl AsRef<Path>) -> Result<(Vec<usize>, DType)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_hirt_header(BufReader::new(f))
}

fn write_header<W: Write>(w: &mut W, shape: &[usize], dtype: DType) -> io::Result<()> {
    w.write_all(HIRT_MAGIC)?;
    w.write_all(&HIRT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code(), shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn write_payload<W: Write>(w: &mut W, data: &[f64], dtype: DType) -> io::Result<()> {
    let mut buf = Vec::with_capacity(1 << 16);
    for chunk in data.chunks(8192) {
        buf.clear();
        match dtype {
            DType::F32 => chunk
                .iter()
                .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => chunk
                .iter()
                .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial target behind.
pub(crate) fn atomic_write(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<()> {
    let tmp = temp_path(path);
    let result = (|| {
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Incremental HIRT file writer for tensors too large to hold in memory.
///
/// Data is appended in row-major order; `finish` checks that exactly the
/// declared number of elements arrived before renaming the file into place.
pub struct HirtWriter {
    path: PathBuf,
    tmp: PathBuf,
    writer: Option<BufWriter<File>>,
    dtype: DType,
    expected: usize,
    written: usize,
}

impl HirtWriter {
    pub fn create(path: impl AsRef<Path>, shape: &[usize], dtype: DType) -> Result<Self> {
        check_shape(shape)?;
        let path = path.as_ref().to_path_buf();
        let tmp = temp_path(&path);
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut writer = BufWriter::with_capacity(1 << 20, file);
        write_header(&mut writer, shape, dtype).map_err(|e| Error::io(&tmp, e))?;
        Ok(HirtWriter {
            path,
            tmp,
            writer: Some(writer),
            dtype,
            expected: shape.iter().product(),
            written: 0,
        })
    }

    pub fn append(&mut self, data: &[f64]) -> Result<()> {
        if self.written + data.len() > self.expected {
            return Err(Error::shape(format!(
                "HIRT writer overflow: {} + {} > {}",
                self.written,
                data.len(),
                self.expected
            )));
        }
        let w = self.writer.as_mut().expect("writer present until finish");
        write_payload(w, data, self.dtype).map_err(|e| Error::io(&self.tmp, e))?;
        self.written += data.len();
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.expected {
            return Err(Error::shape(format!(
                "HIRT writer received {} of {} elements",
                self.written, self.expected
            )));
        }
        let w = self.writer.take().expect("writer present until finish");
        let file = w.into_inner().map_err(|e| Error::io(&self.tmp, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.tmp, e))?;
        fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for HirtWriter {
    fn drop(&mut self) {
        if self.writer.is_some() {
            self.writer = None;
            let _ = fs::remove_file(&self.tmp);
        }
    }
}
