// Checkpoint container, little-endian throughout:
//
//   magic "LWTACKPT" | u32 version
//   u64 len | config (TOML)
//   u64 len | metadata (JSON: model spec, rng, history, normalization, optimizer, masks)
//   u64 count | tensors: u32 name len, name, u8 dtype (2 = f64), u8 ndim, ndim × u64 dims, f64 data
//
// Tensor names: `param/<name>`, `adam.m/<name>`, `adam.v/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, Optimizer, OptimizerKind, TrainConfig};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::icp::{IcpModel, ModelSpec};
use crate::samplers::{RngSnapshot, RngState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LWTACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full training state: parameters, optimizer moments, rng position, config and history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: IcpModel,
    pub optimizer: Optimizer,
    pub rng: RngSnapshot,
    pub history: Vec<EpochMetrics>,
    pub normalization: Option<Normalization>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    spec: ModelSpec,
    rng: RngSnapshot,
    history: Vec<EpochMetrics>,
    normalization: Option<Normalization>,
    optimizer: OptimizerKind,
    optimizer_steps: [u64; 3],
    masks: BTreeMap<String, Vec<bool>>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(2);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse { offset: self.pos as u64, message: format!("truncated checkpoint {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8")))
    }

    fn len_prefixed(&mut self, what: &str) -> Result<&'a str> {
        let at = self.pos;
        let n = self.u64(what)? as usize;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|e| Error::Parse { offset: at as u64, message: format!("{what} is not utf-8: {e}") })
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let n = self.u32("tensor name")? as usize;
        let name = std::str::from_utf8(self.take(n, "tensor name")?)
            .map_err(|e| Error::Parse { offset: at as u64, message: e.to_string() })?
            .to_string();
        let head = self.take(2, "tensor header")?;
        if head[0] != 2 {
            return Err(Error::Parse { offset: self.pos as u64 - 2, message: format!("unsupported dtype {}", head[0]) });
        }
        let mut dims = Vec::with_capacity(head[1] as usize);
        for _ in 0..head[1] {
            dims.push(self.u64("tensor dims")? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = self.take(count * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
        Ok((name, Tensor::new(&dims, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config).map_err(|e| Error::config(format!("config serialization: {e}")))?;
        let meta = Metadata {
            spec: self.model.spec.clone(),
            rng: self.rng.clone(),
            history: self.history.clone(),
            normalization: self.normalization.clone(),
            optimizer: self.optimizer.kind,
            optimizer_steps: self.optimizer.steps,
            masks: self.model.masks().into_iter().collect(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::data(format!("metadata serialization: {e}")))?;
        let store = &self.model.store;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(config.as_bytes());
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(meta.as_bytes());
        put_u64(&mut out, 3 * store.len() as u64);
        for id in store.ids() {
            put_tensor(&mut out, &format!("param/{}", store.name(id)), store.value(id));
        }
        for (prefix, moments) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for (id, t) in store.ids().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}/{}", store.name(id)), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse { offset: 0, message: "bad magic, expected LWTACKPT".into() });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse { offset: 8, message: format!("unsupported checkpoint version {version}") });
        }
        let config: TrainConfig =
            toml::from_str(r.len_prefixed("config")?).map_err(|e| Error::config(format!("checkpoint config: {e}")))?;
        let meta_at = r.pos;
        let meta: Metadata = serde_json::from_str(r.len_prefixed("metadata")?)
            .map_err(|e| Error::Parse { offset: meta_at as u64, message: format!("metadata: {e}") })?;
        let mut model = IcpModel::new(meta.spec, &mut RngState::seed(0))?;
        let mut optimizer = Optimizer::new(meta.optimizer, &model.store);
        optimizer.steps = meta.optimizer_steps;
        let count = r.u64("tensor count")? as usize;
        let mut seen = vec![0u8; model.store.len()];
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            let (prefix, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::data(format!("malformed tensor name '{name}'")))?;
            let id = model
                .store
                .find(pname)
                .ok_or_else(|| Error::data(format!("checkpoint tensor '{name}' has no matching parameter")))?;
            let expected = model.store.value(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(Error::data(format!("tensor '{name}' has shape {:?}, expected {expected:?}", t.shape())));
            }
            let slot = match prefix {
                "param" => {
                    model.store.set_value(id, t)?;
                    0
                }
                "adam.m" => {
                    optimizer.m[id.index()] = t;
                    1
                }
                "adam.v" => {
                    optimizer.v[id.index()] = t;
                    2
                }
                _ => return Err(Error::data(format!("unknown tensor kind '{prefix}'"))),
            };
            seen[id.index()] |= 1 << slot;
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos as u64, message: "trailing bytes".into() });
        }
        if let Some(i) = seen.iter().position(|&s| s != 0b111) {
            let id = model.store.ids().nth(i).expect("index");
            return Err(Error::data(format!("checkpoint is missing tensors for '{}'", model.store.name(id))));
        }
        for (name, mask) in meta.masks {
            model.set_mask(&name, mask)?;
        }
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            rng: meta.rng,
            history: meta.history,
            normalization: meta.normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
