use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"IMCK";
const CKPT_VERSION: u32 = 1;

/// Named, insertion-ordered set of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter (marked trainable). Names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors
            .insert(name.to_string(), tensor.with_requires_grad(true));
        Ok(())
    }

    /// Inserts or replaces a parameter.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        self.tensors
            .insert(name.to_string(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Marks exactly the listed parameters as trainable.
    pub fn train_only<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        for n in names {
            if !self.contains(n.as_ref()) {
                return Err(Error::MissingParameter(n.as_ref().to_string()));
            }
        }
        for (k, t) in self.tensors.iter_mut() {
            t.set_requires_grad(names.iter().any(|n| n.as_ref() == k));
        }
        Ok(())
    }

    pub fn train_all(&mut self) {
        self.tensors
            .values_mut()
            .for_each(|t| t.set_requires_grad(true));
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for name in grads.names() {
            let t = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
            t.accumulate_grad(grads.get(name).unwrap_or_default())?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values of the parameters whose name
    /// starts with one of `prefixes` (all parameters when empty).
    pub fn fingerprint(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| k.starts_with(p)) {
                continue;
            }
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rounds every value through f32, i.e. what a checkpoint round trip
    /// produces.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.values_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&nlen.to_le_bytes())?;
            w.write_all(nb)?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::Format("rank exceeds 255".into()))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.values() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(&name, Tensor::new(shape, values)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Xavier-uniform `fan_in × fan_out` weight matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], values).expect("finite by construction")
}
