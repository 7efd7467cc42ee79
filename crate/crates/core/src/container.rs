//! Self-describing binary array container.
//!
//! Layout (little-endian): magic `PADM`, `u16` version, `u8` dtype code,
//! `u8` ndim, `ndim` x `u64` dims, then the row-major payload. Float data is
//! always written as `f64`.

use std::fs;
use std::path::Path;

use crate::data::{DenseLabelMap, EntropyMap, ProbMap, Provenance, WeakLabelMap};
use crate::error::{io_err, Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"PADM";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::U8),
            2 => Some(Self::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::U8(_) => DType::U8,
            Self::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::U8(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }
}

/// An untyped n-dimensional array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl RawArray {
    pub fn encode(&self) -> Vec<u8> {
        assert_eq!(self.dims.iter().product::<usize>(), self.data.len());
        let mut out = Vec::with_capacity(8 + self.dims.len() * 8 + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 {
            return Err(format!("header truncated ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dtype = DType::from_code(bytes[6]).ok_or_else(|| format!("unknown dtype code {}", bytes[6]))?;
        let ndim = usize::from(bytes[7]);
        let header_len = 8 + ndim * 8;
        if bytes.len() < header_len {
            return Err("dimension table truncated".into());
        }
        let dims: Vec<usize> = bytes[8..header_len]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dimension product overflows")?;
        let payload = &bytes[header_len..];
        let expected = count.checked_mul(dtype.width()).ok_or("payload size overflows")?;
        if payload.len() != expected {
            return Err(format!("payload has {} bytes, expected {expected}", payload.len()));
        }
        let data = match dtype {
            DType::U8 => ArrayData::U8(payload.to_vec()),
            DType::F64 => ArrayData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

/// Types with a container representation.
pub trait Persist: Sized {
    fn to_raw(&self) -> RawArray;
    fn from_raw(raw: RawArray) -> std::result::Result<Self, String>;
}

pub fn save_map<P: Persist>(path: impl AsRef<Path>, value: &P) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, value.to_raw().encode()).map_err(io_err(path))
}

/// Reads a container; any format or shape problem is an error and no value is
/// produced.
pub fn load_map<P: Persist>(path: impl AsRef<Path>) -> Result<P> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let raw = RawArray::decode(&bytes)
        .map_err(|reason| Error::Container { path: path.to_path_buf(), reason })?;
    P::from_raw(raw).map_err(|reason| Error::Container { path: path.to_path_buf(), reason })
}

fn expect_f64(raw: RawArray, ndim: usize) -> std::result::Result<(Vec<usize>, Vec<f64>), String> {
    if raw.dims.len() != ndim {
        return Err(format!("expected {ndim} dims, found {}", raw.dims.len()));
    }
    match raw.data {
        ArrayData::F64(v) => Ok((raw.dims, v)),
        other => Err(format!("expected f64 payload, found {:?}", other.dtype())),
    }
}

fn expect_u8(raw: RawArray, ndim: usize) -> std::result::Result<(Vec<usize>, Vec<u8>), String> {
    if raw.dims.len() != ndim {
        return Err(format!("expected {ndim} dims, found {}", raw.dims.len()));
    }
    match raw.data {
        ArrayData::U8(v) => Ok((raw.dims, v)),
        other => Err(format!("expected u8 payload, found {:?}", other.dtype())),
    }
}

impl<T: Scalar> Persist for ProbMap<T> {
    fn to_raw(&self) -> RawArray {
        RawArray {
            dims: vec![self.height(), self.width(), self.classes()],
            data: ArrayData::F64(self.as_slice().iter().map(|p| p.as_f64()).collect()),
        }
    }

    fn from_raw(raw: RawArray) -> std::result::Result<Self, String> {
        let (d, v) = expect_f64(raw, 3)?;
        ProbMap::new(d[0], d[1], d[2], v.into_iter().map(T::of).collect()).map_err(|e| e.to_string())
    }
}

impl<T: Scalar> Persist for EntropyMap<T> {
    fn to_raw(&self) -> RawArray {
        RawArray {
            dims: vec![self.height(), self.width(), self.classes()],
            data: ArrayData::F64(self.as_slice().iter().map(|p| p.as_f64()).collect()),
        }
    }

    fn from_raw(raw: RawArray) -> std::result::Result<Self, String> {
        let (d, v) = expect_f64(raw, 3)?;
        EntropyMap::new(d[0], d[1], d[2], v.into_iter().map(T::of).collect())
            .map_err(|e| e.to_string())
    }
}

impl Persist for DenseLabelMap {
    fn to_raw(&self) -> RawArray {
        RawArray {
            dims: vec![self.height(), self.width()],
            data: ArrayData::U8(self.as_slice().to_vec()),
        }
    }

    fn from_raw(raw: RawArray) -> std::result::Result<Self, String> {
        let (d, v) = expect_u8(raw, 2)?;
        DenseLabelMap::new(d[0], d[1], v).map_err(|e| e.to_string())
    }
}

/// Stored as `H x W x 2`: class, provenance code.
impl Persist for WeakLabelMap {
    fn to_raw(&self) -> RawArray {
        let mut data = Vec::with_capacity(self.classes().len() * 2);
        for (&c, &p) in self.classes().iter().zip(self.provenance()) {
            data.push(c);
            data.push(p as u8);
        }
        RawArray { dims: vec![self.height(), self.width(), 2], data: ArrayData::U8(data) }
    }

    fn from_raw(raw: RawArray) -> std::result::Result<Self, String> {
        let (d, v) = expect_u8(raw, 3)?;
        if d[2] != 2 {
            return Err(format!("expected 2 planes, found {}", d[2]));
        }
        let mut classes = Vec::with_capacity(v.len() / 2);
        let mut provenance = Vec::with_capacity(v.len() / 2);
        for pair in v.chunks_exact(2) {
            classes.push(pair[0]);
            provenance.push(
                Provenance::from_code(pair[1])
                    .ok_or_else(|| format!("unknown provenance code {}", pair[1]))?,
            );
        }
        WeakLabelMap::new(d[0], d[1], classes, provenance).map_err(|e| e.to_string())
    }
}

/// Flat parameter vectors.
impl Persist for Vec<f64> {
    fn to_raw(&self) -> RawArray {
        RawArray { dims: vec![self.len()], data: ArrayData::F64(self.clone()) }
    }

    fn from_raw(raw: RawArray) -> std::result::Result<Self, String> {
        Ok(expect_f64(raw, 1)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IGNORE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probmap(seed: u64, h: usize, w: usize, c: usize) -> ProbMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::new();
        for _ in 0..h * w {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            v.extend(raw.iter().map(|x| x / s));
        }
        ProbMap::new(h, w, c, v).unwrap()
    }

    #[test]
    fn prob_map_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_probmap(7, 5, 6, 4);
        let path = dir.path().join("p.padm");
        save_map(&path, &p).unwrap();
        let q: ProbMap<f64> = load_map(&path).unwrap();
        let bits = |m: &ProbMap<f64>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn label_map_with_ignore_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DenseLabelMap::new(2, 3, vec![0, IGNORE, 2, 1, IGNORE, 3]).unwrap();
        let path = dir.path().join("l.padm");
        save_map(&path, &m).unwrap();
        assert_eq!(load_map::<DenseLabelMap>(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_probmap(1, 4, 4, 3);
        let path = dir.path().join("p.padm");
        save_map(&path, &p).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_map::<ProbMap<f64>>(&path), Err(Error::Container { .. })));
        fs::write(&path, &bytes[..6]).unwrap();
        assert!(load_map::<ProbMap<f64>>(&path).is_err());
    }

    #[test]
    fn dtype_and_rank_mismatch_are_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.padm");
        save_map(&path, &DenseLabelMap::filled(3, 3, 1)).unwrap();
        let err = load_map::<ProbMap<f64>>(&path).unwrap_err();
        assert!(err.to_string().contains("expected 3 dims"), "{err}");
        save_map(&path, &vec![1.0f64, 2.0]).unwrap();
        assert!(load_map::<DenseLabelMap>(&path).is_err());
    }

    #[test]
    fn header_layout() {
        let raw = DenseLabelMap::filled(2, 3, 4).to_raw().encode();
        assert_eq!(&raw[..4], b"PADM");
        assert_eq!(u16::from_le_bytes([raw[4], raw[5]]), 1);
        assert_eq!(raw[6], DType::U8 as u8);
        assert_eq!(raw[7], 2);
        assert_eq!(u64::from_le_bytes(raw[8..16].try_into().unwrap()), 2);
        assert_eq!(raw.len(), 8 + 16 + 6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weak_map_round_trip(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut m = WeakLabelMap::empty(4, 5);
                for y in 0..4 {
                    for x in 0..5 {
                        match rng.random_range(0..3) {
                            0 => {}
                            1 => m.set(x, y, rng.random_range(0..4), Provenance::Oracle),
                            _ => m.set(x, y, rng.random_range(0..4), Provenance::Pseudo),
                        }
                    }
                }
                let raw = RawArray::decode(&m.to_raw().encode()).unwrap();
                prop_assert_eq!(WeakLabelMap::from_raw(raw).unwrap(), m);
            }
        }
    }
}
