//! Binary checkpoints with a JSON manifest.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GVCK" | u32 version | u8 dtype width | u32 manifest length | manifest (UTF-8 JSON)
//! u32 tensor count
//! per tensor: u16 name length | name | u8 ndim | u32 dims... | element data
//! ```
//!
//! The same manifest is also written pretty-printed next to the binary file
//! with a `.json` extension.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::PrunePlan;
use crate::error::{Error, Result};
use crate::model::{Layout, Network, Stage};
use crate::params::{ParamKind, ParamStore};
use crate::rng::{RngSnapshot, RngState};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: DType,
    pub stage: Stage,
    pub layout: Layout,
    pub prune_plan: PrunePlan,
    pub selected_gates: Option<Vec<usize>>,
    pub rng: RngSnapshot,
    pub tensors: Vec<TensorInfo>,
    /// Free-form metadata such as the experiment configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub rng: RngState,
    pub extra: serde_json::Value,
}

pub fn manifest<T: Scalar>(net: &Network<T>, rng: &RngState, extra: serde_json::Value) -> Manifest {
    Manifest {
        version: VERSION,
        dtype: T::DTYPE,
        stage: net.layout.stage,
        layout: net.layout.clone(),
        prune_plan: net.prune_plan(),
        selected_gates: net.selected_gates(),
        rng: rng.snapshot(),
        tensors: net
            .store
            .entries()
            .iter()
            .map(|e| TensorInfo { name: e.name.clone(), kind: e.kind, shape: e.value.shape().to_vec() })
            .collect(),
        extra,
    }
}

pub fn encode<T: Scalar>(net: &Network<T>, rng: &RngState, extra: serde_json::Value) -> Result<Vec<u8>> {
    let man = manifest(net, rng, extra);
    let json = serde_json::to_vec(&man)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(
        &u32::try_from(json.len()).map_err(|_| Error::Format("manifest too large".into()))?.to_le_bytes(),
    );
    out.extend_from_slice(&json);
    let entries = net.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.value.ndim() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r)
}

fn header(r: &mut Reader<'_>) -> Result<Manifest> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let len = r.u32()? as usize;
    let man: Manifest = serde_json::from_slice(r.take(len)?)?;
    if man.dtype != dtype {
        return Err(Error::Format("manifest dtype disagrees with header".into()));
    }
    Ok(man)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let man = header(&mut r)?;
    if man.dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint holds {:?} values, expected {:?}", man.dtype, T::DTYPE)));
    }
    let count = r.u32()? as usize;
    if count != man.tensors.len() {
        return Err(Error::Format(format!("{count} tensors, manifest lists {}", man.tensors.len())));
    }
    let w = T::DTYPE.byte_width();
    let mut store = ParamStore::new();
    for info in &man.tensors {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != info.name {
            return Err(Error::Format(format!("tensor {name} out of order, expected {}", info.name)));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != info.shape {
            return Err(Error::Format(format!("{name}: shape {shape:?} vs manifest {:?}", info.shape)));
        }
        let n: usize = shape.iter().product();
        let data = r.take(n * w)?.chunks(w).map(T::read_le).collect();
        store.add(name, info.kind, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let network = Network { layout: man.layout, store };
    network.layout.config.validate()?;
    Ok(Checkpoint { network, rng: RngState::restore(man.rng), extra: man.extra })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the binary checkpoint and its manifest.
pub fn save<T: Scalar>(path: &Path, net: &Network<T>, rng: &RngState, extra: serde_json::Value) -> Result<()> {
    let bytes = encode(net, rng, extra.clone())?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let man = serde_json::to_string_pretty(&manifest(net, rng, extra))?;
    let mp = manifest_path(path);
    std::fs::write(&mp, man + "\n").map_err(|e| Error::io(&mp, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
