//! Named parameter store and its binary container.
//!
//! Container layout (little endian):
//! `b"MBTFNETW"`, `u32` version, topology string, `u32` metadata count followed by key/value
//! strings, `u32` tensor count, then per tensor: name string, `u8` dtype (0 = f32, 1 = f64),
//! `u8` flags (bit 0 = trainable), `u32` rank, `u64` dims, raw values.
//! Strings are a `u32` byte length followed by UTF-8.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MBTFNETW";
const VERSION: u32 = 1;
/// Names with this prefix hold optimizer state rather than model parameters.
pub const OPTIM_PREFIX: &str = "optim/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for DType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::config(format!("unknown dtype {other:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
    topology: String,
    metadata: BTreeMap<String, String>,
}

impl ModelWeights {
    pub fn new(topology: impl Into<String>) -> Self {
        Self { topology: topology.into(), ..Self::default() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, tensor, trainable });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn topology(&self) -> &str {
        &self.topology
    }

    pub fn set_topology(&mut self, t: impl Into<String>) {
        self.topology = t.into();
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Stores a float so that it parses back to the identical value.
    pub fn set_metadata_f64(&mut self, key: impl Into<String>, value: f64) {
        self.metadata.insert(key.into(), format!("{value:?}"));
    }

    pub fn metadata_f64(&self, key: &str) -> Result<Option<f64>> {
        self.metadata
            .get(key)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("metadata {key} is not a number: {v:?}"))))
            .transpose()
    }

    /// Number of scalar values in trainable model parameters (optimizer state excluded).
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable && !e.name.starts_with(OPTIM_PREFIX)).map(|e| e.tensor.numel()).sum()
    }

    /// Copies every model parameter of `self` from `loaded`. The parameter sets must match exactly
    /// in names and shapes; optimizer entries in `loaded` are ignored. Metadata is merged.
    pub fn adopt(&mut self, loaded: &ModelWeights) -> Result<()> {
        if loaded.topology != self.topology {
            return Err(Error::Format(format!(
                "topology mismatch: file has {:?}, configuration expects {:?}",
                loaded.topology, self.topology
            )));
        }
        for e in &self.entries {
            let Some(src) = loaded.get(&e.name) else {
                return Err(Error::Format(format!("missing parameter {}", e.name)));
            };
            if src.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.tensor.shape()
                )));
            }
        }
        if let Some(extra) =
            loaded.entries.iter().find(|e| !e.name.starts_with(OPTIM_PREFIX) && !self.index.contains_key(&e.name))
        {
            return Err(Error::Format(format!("unexpected parameter {}", extra.name)));
        }
        for e in &mut self.entries {
            e.tensor = loaded.get(&e.name).expect("checked above").clone();
        }
        for (k, v) in &loaded.metadata {
            self.metadata.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    /// Drops optimizer state entries.
    pub fn without_optimizer_state(&self) -> ModelWeights {
        let mut out = ModelWeights::new(self.topology.clone());
        out.metadata = self.metadata.clone();
        for e in self.entries.iter().filter(|e| !e.name.starts_with(OPTIM_PREFIX)) {
            out.add(e.name.clone(), e.tensor.clone(), e.trainable).expect("unique names");
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write, dtype: DType) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.topology)?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            write_str(w, &e.name)?;
            w.write_all(&[if dtype == DType::F32 { 0 } else { 1 }, u8::from(e.trainable)])?;
            w.write_all(&(e.tensor.shape().len() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.tensor.numel() * 8);
            for &v in e.tensor.data() {
                match dtype {
                    DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("weights file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let mut out = ModelWeights::new(read_str(r)?);
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            out.metadata.insert(k, v);
        }
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let mut head = [0u8; 2];
            read_exact(r, &mut head)?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= 1 << 32).ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let data = match head[0] {
                0 => {
                    let mut raw = vec![0u8; n * 4];
                    read_exact(r, &mut raw)?;
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
                }
                1 => {
                    let mut raw = vec![0u8; n * 8];
                    read_exact(r, &mut raw)?;
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
                }
                d => return Err(Error::Format(format!("tensor {name} has unknown dtype tag {d}"))),
            };
            out.add(name, Tensor::new(shape, data)?, head[1] & 1 == 1)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after weights".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, dtype)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("weights file truncated".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format("string field too long".into()));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string field is not UTF-8".into()))
}

/// Creates parameters with seeded initial values.
pub struct ParamBuilder {
    weights: ModelWeights,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(topology: impl Into<String>, seed: u64) -> Self {
        Self { weights: ModelWeights::new(topology), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.weights.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.weights.add(name, Tensor::filled(shape, value), true)
    }

    /// Non-trainable state (e.g. running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.weights.add(name, Tensor::filled(shape, value), false)
    }

    pub fn finish(self) -> ModelWeights {
        self.weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelWeights {
        let mut w = ModelWeights::new("toy:1");
        w.add("a.weight", Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1e-30, 5.5, -7.25]).unwrap(), true).unwrap();
        w.add("a.running_mean", Tensor::new(vec![2], vec![0.5, 0.25]).unwrap(), false).unwrap();
        w.set_metadata_f64("lambda", 0.123_456_789_012_345_67);
        w
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let w = sample();
        let mut buf = Vec::new();
        w.write_to(&mut buf, DType::F64).unwrap();
        let r = ModelWeights::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(r, w);
        assert_eq!(r.metadata_f64("lambda").unwrap(), Some(0.123_456_789_012_345_67));
    }

    #[test]
    fn f32_round_trip_is_stable() {
        let w = sample();
        let mut a = Vec::new();
        w.write_to(&mut a, DType::F32).unwrap();
        let r = ModelWeights::read_from(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        r.write_to(&mut b, DType::F32).unwrap();
        assert_eq!(a, b);
        assert!(!r.is_trainable(r.id("a.running_mean").unwrap()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = sample();
        let mut buf = Vec::new();
        w.write_to(&mut buf, DType::F32).unwrap();
        assert!(ModelWeights::read_from(&mut &buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ModelWeights::read_from(&mut bad.as_slice()).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(ModelWeights::read_from(&mut long.as_slice()).is_err());
    }

    #[test]
    fn adopt_names_the_mismatch() {
        let mut target = sample();
        let mut other = ModelWeights::new("toy:1");
        other.add("a.weight", Tensor::zeros(&[3, 2]), true).unwrap();
        other.add("a.running_mean", Tensor::zeros(&[2]), false).unwrap();
        let err = target.adopt(&other).unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");

        let mut missing = ModelWeights::new("toy:1");
        missing.add("a.weight", Tensor::zeros(&[2, 3]), true).unwrap();
        let err = target.adopt(&missing).unwrap_err().to_string();
        assert!(err.contains("a.running_mean"), "{err}");

        let mut ok = sample();
        ok.add("optim/m/a.weight", Tensor::zeros(&[2, 3]), false).unwrap();
        ok.tensor_mut(ok.id("a.weight").unwrap()).data_mut()[0] = 9.0;
        target.adopt(&ok).unwrap();
        assert_eq!(target.get("a.weight").unwrap().data()[0], 9.0);
    }
}
