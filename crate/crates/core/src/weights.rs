//! `RLW1` weight container.
//!
//! Little-endian layout: magic `RLW1`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` extents
//! and an `f32` row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use ripeloc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"RLW1";
pub const VERSION: u32 = 1;
/// Name of the optional tensor carrying the model configuration as JSON bytes.
const CONFIG_ENTRY: &str = "__config__";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_container(w: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(tensors.len(), "tensor count")?.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format(format!("rank too large for {}", t.name)))?;
        w.write_all(&[rank])?;
        for &e in &t.shape {
            w.write_all(&u32_of(e, "extent")?.to_le_bytes())?;
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Format(format!("tensor {} payload does not match its shape", t.name)));
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated weight file: {e}")))?;
    Ok(b)
}

pub fn read_container(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    if &read_exact::<4>(r)? != MAGIC {
        return Err(Error::Format("bad magic, not an RLW1 file".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported RLW1 version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_exact::<1>(r)?[0] as usize;
        let shape = (0..rank)
            .map(|_| read_exact::<4>(r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated payload for {name}: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

impl Model {
    /// All stored tensors (weights and running statistics) plus the config.
    pub fn to_named_tensors(&self) -> Result<Vec<NamedTensor>> {
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut v = vec![NamedTensor {
            name: CONFIG_ENTRY.into(),
            shape: vec![cfg.len()],
            data: cfg.iter().map(|&b| b as f32).collect(),
        }];
        v.extend(self.store.entries().iter().map(|e| NamedTensor {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            data: e.tensor.data().iter().map(|&x| x as f32).collect(),
        }));
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_container(&mut f, &self.to_named_tensors()?)?;
        f.flush()?;
        Ok(())
    }

    /// Rebuilds a model from a container: the embedded config fixes the
    /// topology, stored shapes override the default ones (pruned models).
    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Model> {
        let cfg_t = tensors
            .iter()
            .find(|t| t.name == CONFIG_ENTRY)
            .ok_or_else(|| Error::Format("weight file has no embedded model config".into()))?;
        let bytes: Vec<u8> = cfg_t.data.iter().map(|&b| b as u8).collect();
        let cfg: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("bad model config: {e}")))?;
        let mut model = build_model(&cfg, 0)?;
        model.load_named(tensors)?;
        Ok(model)
    }

    /// Replaces every stored tensor by the same-named one from `tensors`.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let index = self.store.name_index();
        let mut seen = vec![false; self.store.len()];
        for t in tensors.iter().filter(|t| t.name != CONFIG_ENTRY) {
            let id = *index
                .get(&t.name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {}", t.name)))?;
            let cur = self.store.get(id);
            if cur.rank() != t.shape.len() {
                return Err(Error::Format(format!(
                    "tensor {} has rank {} but the model expects {}",
                    t.name,
                    t.shape.len(),
                    cur.rank()
                )));
            }
            let data = t.data.iter().map(|&x| x as f64).collect();
            *self.store.get_mut(id) = Tensor::new(&t.shape, data)?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = &self.store.entries()[i].name;
            return Err(Error::Format(format!("weight file is missing tensor {name}")));
        }
        self.refresh_channels();
        self.check_structure()
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Model::from_named_tensors(&read_container(&mut f)?)
    }
}
