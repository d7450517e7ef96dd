//! VTEN: a small named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VTEN" 0x00 | u8 version (=1) | u32 tensor count
//! per tensor: u16 name length | name bytes (UTF-8) | u8 dtype | u8 ndim | ndim x u64 dims | payload
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = i64. Payload is row-major.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 5] = *b"VTEN\0";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    I64 = 3,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::I64),
            other => Err(Error::BadDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    /// Bitwise equality; unlike `PartialEq`, NaN payloads compare equal to themselves.
    pub fn bits_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

fn element_count(dims: &[u64]) -> Option<usize> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).and_then(|n| usize::try_from(n).ok())
}

/// An ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorArchive {
    entries: Vec<Tensor>,
}

impl NamedTensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|t| t.name.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        let count = element_count(&dims).ok_or_else(|| Error::Shape(format!("dims {dims:?} of {name:?} overflow")))?;
        if count != data.len() {
            return Err(Error::Shape(format!("{name:?}: dims {dims:?} need {count} values, got {}", data.len())));
        }
        self.entries.push(Tensor { name, dims, data });
        Ok(())
    }

    /// Appends an entry without validation. Used to exercise the writer's own checks.
    #[doc(hidden)]
    pub fn push_unchecked(&mut self, tensor: Tensor) {
        self.entries.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn push_f32_matrix(&mut self, name: &str, m: &Array2<f32>) -> Result<()> {
        let dims = vec![m.nrows() as u64, m.ncols() as u64];
        self.push(name, dims, TensorData::F32(m.iter().copied().collect()))
    }

    pub fn push_f64_matrix(&mut self, name: &str, m: &Array2<f64>) -> Result<()> {
        let dims = vec![m.nrows() as u64, m.ncols() as u64];
        self.push(name, dims, TensorData::F64(m.iter().copied().collect()))
    }

    pub fn push_f64_vec(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len() as u64], TensorData::F64(v.to_vec()))
    }

    pub fn push_index_vec(&mut self, name: &str, v: &[usize]) -> Result<()> {
        self.push(name, vec![v.len() as u64], TensorData::I64(v.iter().map(|&i| i as i64).collect()))
    }

    /// Reads a 2-D tensor as f64, widening f32 payloads.
    pub fn f64_matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.require(name)?;
        let (r, c) = matrix_dims(t)?;
        let values: Vec<f64> = match &t.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(_) => return Err(Error::Shape(format!("{name:?} is integer, expected float"))),
        };
        Ok(Array2::from_shape_vec((r, c), values).expect("dims checked on insert"))
    }

    pub fn f32_matrix(&self, name: &str) -> Result<Array2<f32>> {
        let t = self.require(name)?;
        let (r, c) = matrix_dims(t)?;
        match &t.data {
            TensorData::F32(v) => Ok(Array2::from_shape_vec((r, c), v.clone()).expect("dims checked")),
            _ => Err(Error::Shape(format!("{name:?} is not f32"))),
        }
    }

    pub fn f64_values(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::I64(_) => Err(Error::Shape(format!("{name:?} is integer, expected float"))),
        }
    }

    pub fn index_values(&self, name: &str) -> Result<Vec<usize>> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::I64(v) => v
                .iter()
                .map(|&i| usize::try_from(i).map_err(|_| Error::Shape(format!("negative index in {name:?}"))))
                .collect(),
            _ => Err(Error::Shape(format!("{name:?} is not an index tensor"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let mut w = BufWriter::new(File::create(path)?);
        let n = write_tensor_archive(self, &mut w)?;
        w.flush()?;
        Ok(n)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        read_tensor_archive(&mut r)
    }

    /// Bitwise equality of every entry, in order.
    pub fn bits_eq(&self, other: &NamedTensorArchive) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.dims == b.dims && a.data.bits_eq(&b.data))
    }
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.dims.as_slice() {
        [r, c] => Ok((*r as usize, *c as usize)),
        [n] => Ok((1, *n as usize)),
        other => Err(Error::Shape(format!("{:?} has dims {other:?}, expected 2-D", t.name))),
    }
}

/// Serializes `archive`, returning the number of bytes written.
pub fn write_tensor_archive<W: Write>(archive: &NamedTensorArchive, sink: &mut W) -> Result<u64> {
    let mut seen = HashSet::new();
    for t in &archive.entries {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::DuplicateName(t.name.clone()));
        }
        if t.name.len() > u16::MAX as usize {
            return Err(Error::Shape(format!("tensor name of {} bytes is too long", t.name.len())));
        }
        if t.dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("{:?} has {} dims, at most 255 allowed", t.name, t.dims.len())));
        }
        if element_count(&t.dims) != Some(t.data.len()) {
            return Err(Error::Shape(format!("{:?}: dims {:?} disagree with {} values", t.name, t.dims, t.data.len())));
        }
    }
    let count = u32::try_from(archive.entries.len()).map_err(|_| Error::Shape("too many tensors".into()))?;

    let mut written = 0u64;
    let mut put = |bytes: &[u8]| -> io::Result<()> {
        written += bytes.len() as u64;
        sink.write_all(bytes)
    };
    put(&MAGIC)?;
    put(&[VERSION])?;
    put(&count.to_le_bytes())?;
    for t in &archive.entries {
        put(&(t.name.len() as u16).to_le_bytes())?;
        put(t.name.as_bytes())?;
        put(&[t.data.dtype().code(), t.dims.len() as u8])?;
        for d in &t.dims {
            put(&d.to_le_bytes())?;
        }
        match &t.data {
            TensorData::F32(v) => {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                put(&bytes)?;
            }
            TensorData::F64(v) => {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                put(&bytes)?;
            }
            TensorData::I64(v) => {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                put(&bytes)?;
            }
        }
    }
    Ok(written)
}

struct Cursor<'a, R> {
    inner: &'a mut R,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut *self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(Error::Truncated(format!("{what}: wanted {n} bytes, got {got}")));
        }
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let v = self.bytes(N, what)?;
        Ok(v.try_into().expect("length checked"))
    }
}

/// Parses an archive previously produced by [`write_tensor_archive`].
pub fn read_tensor_archive<R: Read>(source: &mut R) -> Result<NamedTensorArchive> {
    let mut cur = Cursor { inner: source };
    let magic: [u8; 5] = cur.array("magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let [version] = cur.array::<1>("version")?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = u32::from_le_bytes(cur.array("tensor count")?);
    let mut archive = NamedTensorArchive::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.array("name length")?) as usize;
        let name = String::from_utf8(cur.bytes(name_len, "name")?)
            .map_err(|e| Error::Shape(format!("tensor name is not UTF-8: {e}")))?;
        let [code, ndim] = cur.array::<2>("dtype/ndim")?;
        let dtype = Dtype::from_code(code)?;
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(cur.array("dim")?));
        }
        let n = element_count(&dims).ok_or_else(|| Error::Shape(format!("dims {dims:?} of {name:?} overflow")))?;
        let what = format!("payload of {name:?}");
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        };
        let nbytes = n.checked_mul(width).ok_or_else(|| Error::Shape(format!("payload of {name:?} too large")))?;
        let raw = cur.bytes(nbytes, &what)?;
        let data = match dtype {
            Dtype::F32 => {
                TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            Dtype::F64 => {
                TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            Dtype::I64 => {
                TensorData::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
            }
        };
        archive.push(name, dims, data)?;
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(a: &NamedTensorArchive) -> NamedTensorArchive {
        let mut buf = Vec::new();
        let n = write_tensor_archive(a, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        read_tensor_archive(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn empty_archive_is_header_only() {
        let mut buf = Vec::new();
        let n = write_tensor_archive(&NamedTensorArchive::new(), &mut buf).unwrap();
        assert_eq!(n, 10);
        assert_eq!(&buf, b"VTEN\0\x01\0\0\0\0");
    }

    #[test]
    fn f32_matrix_roundtrip() {
        let mut a = NamedTensorArchive::new();
        a.push("x", vec![2, 3], TensorData::F32((0..6).map(|i| i as f32).collect())).unwrap();
        let b = roundtrip(&a);
        assert_eq!(a, b);
        assert_eq!(b.f32_matrix("x").unwrap()[[1, 2]], 5.0);
    }

    #[test]
    fn exact_bytes_for_single_tensor() {
        let mut a = NamedTensorArchive::new();
        a.push("ab", vec![2], TensorData::I64(vec![1, -1])).unwrap();
        let mut buf = Vec::new();
        write_tensor_archive(&a, &mut buf).unwrap();
        let mut expected = b"VTEN\0\x01".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.extend([3u8, 1u8]);
        expected.extend(2u64.to_le_bytes());
        expected.extend(1i64.to_le_bytes());
        expected.extend((-1i64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = NamedTensorArchive::new();
        a.push("x", vec![1], TensorData::F64(vec![1.0])).unwrap();
        assert!(matches!(a.push("x", vec![1], TensorData::F64(vec![2.0])), Err(Error::DuplicateName(_))));
        a.push_unchecked(Tensor { name: "x".into(), dims: vec![0], data: TensorData::F32(vec![]) });
        let mut buf = Vec::new();
        assert!(matches!(write_tensor_archive(&a, &mut buf), Err(Error::DuplicateName(_))));
    }

    #[test]
    fn dims_must_match_payload() {
        let mut a = NamedTensorArchive::new();
        assert!(a.push("x", vec![2, 2], TensorData::F32(vec![0.0; 3])).is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = b"XTEN\0\x01\0\0\0\0";
        assert!(matches!(read_tensor_archive(&mut &bytes[..]), Err(Error::BadMagic(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = b"VTEN\0\x01".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.extend([1u8, 2u8]);
        bytes.extend(2u64.to_le_bytes());
        bytes.extend(2u64.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend(v.to_le_bytes());
        }
        assert!(matches!(read_tensor_archive(&mut bytes.as_slice()), Err(Error::Truncated(_))));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let mut bytes = b"VTEN\0\x01".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.extend([4u8, 0u8]);
        assert!(matches!(read_tensor_archive(&mut bytes.as_slice()), Err(Error::BadDtype(4))));
    }

    #[test]
    fn empty_tensor_and_unit_dims() {
        let mut a = NamedTensorArchive::new();
        a.push("e", vec![0, 5], TensorData::F64(vec![])).unwrap();
        a.push("s", vec![], TensorData::I64(vec![42])).unwrap();
        a.push("u", vec![1, 1, 1], TensorData::F32(vec![f32::NAN])).unwrap();
        assert!(a.bits_eq(&roundtrip(&a)));
    }
}
