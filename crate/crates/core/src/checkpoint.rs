//! Binary checkpoints: named parameter tensors plus string metadata.
//!
//! Layout (little-endian): `DISCOCKPT1`, u32 tensor count, then per tensor
//! u16 name length, name bytes, u32 rank, rank × u64 extents, f64 values;
//! then u32 metadata count and per entry u32 key length, key, u32 value
//! length, value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 10] = b"DISCOCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: Vec<(String, String)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: Vec<(String, String)>) -> Self {
        Checkpoint {
            tensors: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            metadata,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copies every tensor into the same-named parameter of `store`. All
    /// parameters must be present with matching shapes.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "{} tensors for a model with {} parameters",
                    self.tensors.len(),
                    store.len()
                ),
            ));
        }
        for (name, t) in &self.tensors {
            let id = store.find(name).ok_or_else(|| {
                Error::format("checkpoint", format!("unknown parameter `{name}`"))
            })?;
            let cur = store.value(id).shape();
            if cur != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("`{name}` has shape {:?}, model expects {cur:?}", t.shape()),
                ));
            }
            store.get_mut(id).value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::format("checkpoint", "too many tensors"))?;
        out.extend(count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
            out.extend(len.to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out.extend((self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            for s in [k, v] {
                out.extend((s.len() as u32).to_le_bytes());
                out.extend(s.as_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = usize::from(r.u16()?);
            let name = r.string(len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mcount = r.u32()?;
        let mut metadata = Vec::new();
        for _ in 0..mcount {
            let kl = r.u32()? as usize;
            let k = r.string(kl)?;
            let vl = r.u32()? as usize;
            let v = r.string(vl)?;
            metadata.push((k, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add(
            "a.w",
            Tensor::matrix(2, 3, vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 0.1]).unwrap(),
        );
        store.add("b", Tensor::scalar(2.0));
        Checkpoint::from_store(
            &store,
            vec![
                ("seed".into(), "7".into()),
                ("path".into(), "x/ü.csv".into()),
            ],
        )
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.meta("path"), Some("x/ü.csv"));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"DISCOCKPT2").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn apply_checks_names_and_shapes() {
        let c = sample();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(&[2, 3]));
        store.add("b", Tensor::scalar(0.0));
        c.apply_to(&mut store).unwrap();
        assert_eq!(store.value(store.find("b").unwrap()).item(), 2.0);

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(&[3, 2]));
        wrong.add("b", Tensor::scalar(0.0));
        assert!(c.apply_to(&mut wrong).is_err());
    }
}
