//! Binary checkpoint format.
//!
//! ```text
//! "SQAG" | u32 version | u32 array count
//! per array: u16 name len | name | u8 dtype (0 = f32, 1 = f64) | u8 rank | u32 dims[rank] | LE payload
//! u32 len | vocabulary text | u32 len | config text | u64 step
//! ```
//! All integers are little-endian.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::textenc::Vocabulary;

pub const MAGIC: &[u8; 4] = b"SQAG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub step: u64,
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore,
        vocab: &Vocabulary,
        config: &TrainConfig,
        step: u64,
    ) -> Result<Self> {
        Ok(Self {
            arrays: capture_arrays(store)?,
            vocab: vocab.clone(),
            config: config.clone(),
            step,
        })
    }

    /// Writes every array into the store. The store must already hold exactly
    /// the same set of names with the same shapes.
    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        apply_arrays(&self.arrays, store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_arrays(&mut out, &self.arrays);
        for block in [self.vocab.to_text(), self.config.to_kv()] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            out.extend_from_slice(block.as_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::CheckpointVersion("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion(format!(
                "version {version}, expected {VERSION}"
            )));
        }
        let arrays = read_arrays(&mut r)?;
        let vocab = Vocabulary::from_text(&r.block("vocabulary")?)?;
        let config = TrainConfig::from_kv(&r.block("config")?)?;
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
        Ok(Self {
            arrays,
            vocab,
            config,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

pub fn capture_arrays(store: &ParamStore) -> Result<Vec<NamedArray>> {
    let mut arrays = Vec::new();
    for (name, var) in store.entries() {
        let t = var.as_tensor().flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => ArrayData::F64(t.to_vec1()?),
            _ => ArrayData::F32(t.to_dtype(DType::F32)?.to_vec1()?),
        };
        arrays.push(NamedArray {
            name,
            dims: var.dims().to_vec(),
            data,
        });
    }
    Ok(arrays)
}

pub fn apply_arrays(arrays: &[NamedArray], store: &ParamStore) -> Result<()> {
    for a in arrays {
        let var = store
            .get(&a.name)
            .ok_or_else(|| Error::CheckpointUnknownArray(a.name.clone()))?;
        if var.dims() != a.dims.as_slice() {
            return Err(Error::CheckpointShape {
                name: a.name.clone(),
                expected: var.dims().to_vec(),
                got: a.dims.clone(),
            });
        }
    }
    for name in store.names() {
        if !arrays.iter().any(|a| a.name == name) {
            return Err(Error::CheckpointMissingArray(name));
        }
    }
    for a in arrays {
        let var = store.get(&a.name).unwrap();
        let t = match &a.data {
            ArrayData::F32(v) => Tensor::from_slice(v, a.dims.as_slice(), store.device())?,
            ArrayData::F64(v) => Tensor::from_slice(v, a.dims.as_slice(), store.device())?,
        };
        var.set(&t.to_dtype(store.dtype())?)?;
    }
    Ok(())
}

/// Appends the `u32 count` header and every array record.
pub fn write_arrays(out: &mut Vec<u8>, arrays: &[NamedArray]) {
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(match a.data {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
        });
        out.push(a.dims.len() as u8);
        for &d in &a.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &a.data {
            ArrayData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

pub(crate) fn read_arrays(r: &mut Reader<'_>) -> Result<Vec<NamedArray>> {
    let count = r.u32("array count")?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(len, "array name")?.to_vec())
            .map_err(|_| Error::CheckpointTruncated("array name is not UTF-8".into()))?;
        let code = r.take(1, "dtype")?[0];
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let data = match code {
            0 => ArrayData::F32(
                r.take(n * 4, &name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => ArrayData::F64(
                r.take(n * 8, &name)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => {
                return Err(Error::CheckpointVersion(format!(
                    "unknown dtype code {other}"
                )))
            }
        };
        arrays.push(NamedArray { name, dims, data });
    }
    Ok(arrays)
}

/// Reads a container written as `magic | u32 version | arrays`.
pub fn decode_array_file(bytes: &[u8], magic: &[u8; 4]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != magic {
        return Err(Error::CheckpointVersion("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(format!(
            "version {version}, expected {VERSION}"
        )));
    }
    read_arrays(&mut r)
}

pub fn encode_array_file(arrays: &[NamedArray], magic: &[u8; 4]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_arrays(&mut out, arrays);
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!("while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn block(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::CheckpointTruncated(format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn store() -> ParamStore {
        let s = ParamStore::new(DType::F32, 4);
        s.root()
            .pp("a")
            .get("w", &[3, 2], Init::Normal(1.0))
            .unwrap();
        s.root().get("b", &[4], Init::Normal(1.0)).unwrap();
        s
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["make it blue"], 1)
    }

    #[test]
    fn round_trip_is_exact() {
        let s = store();
        let ck = Checkpoint::capture(&s, &vocab(), &TrainConfig::default(), 17).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.arrays, ck.arrays);
        assert_eq!(back.step, 17);
        assert_eq!(back.vocab, vocab());
        let fresh = ParamStore::new(DType::F32, 99);
        fresh.root().pp("a").get("w", &[3, 2], Init::Zeros).unwrap();
        fresh.root().get("b", &[4], Init::Zeros).unwrap();
        back.apply(&fresh).unwrap();
        assert_eq!(
            fresh
                .get("a.w")
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap(),
            s.get("a.w")
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        );
    }

    #[test]
    fn corruption_errors() {
        let s = store();
        let bytes = Checkpoint::capture(&s, &vocab(), &TrainConfig::default(), 0)
            .unwrap()
            .to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::CheckpointVersion(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::CheckpointVersion(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 20]),
            Err(Error::CheckpointTruncated(_))
        ));

        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let extra = ParamStore::new(DType::F32, 0);
        extra.root().pp("a").get("w", &[3, 2], Init::Zeros).unwrap();
        extra.root().get("b", &[4], Init::Zeros).unwrap();
        extra.root().get("c", &[1], Init::Zeros).unwrap();
        match ck.apply(&extra) {
            Err(Error::CheckpointMissingArray(n)) => assert_eq!(n, "c"),
            other => panic!("{other:?}"),
        }
        let fewer = ParamStore::new(DType::F32, 0);
        fewer.root().get("b", &[4], Init::Zeros).unwrap();
        match ck.apply(&fewer) {
            Err(Error::CheckpointUnknownArray(n)) => assert_eq!(n, "a.w"),
            other => panic!("{other:?}"),
        }
    }
}
