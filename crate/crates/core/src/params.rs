//! Named parameters, per-forward sessions and the checkpoint container.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian.
//!
//! ```text
//! magic    4 bytes  "SSCK"
//! version  u32      1
//! count    u32      number of entries
//! entry × count:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   kind     u8     0 = trainable, 1 = buffer
//!   ndim     u32, dims (u64 × ndim)
//!   data     f64 × product(dims), row-major
//! ```
//!
//! Entries are written in registration order. Loading into an existing store
//! matches entries by name and requires identical shapes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::energy::OpCounts;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Carried state such as batch-norm running statistics; never optimised.
    Buffer,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Param(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Trainable tensor with entries uniform in `(-bound, bound)`.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> Result<ParamId> {
        let t = if bound > 0.0 {
            Tensor::uniform(shape, -bound, bound, rng)
        } else {
            Tensor::zeros(shape)
        };
        self.add(name, t, ParamKind::Trainable)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "`{}` has shape {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Trainable parameters whose names start with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kinds[id.0] == ParamKind::Trainable && self.names[id.0].starts_with(prefix))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_scalars() * 8);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for ((name, kind), t) in self.names.iter().zip(&self.kinds).zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[match kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            }])?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("truncated or malformed {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("header"))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(|_| bad("header"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(r).map_err(|_| bad("header"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r).map_err(|_| bad("entry name"))? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("entry name"))?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let mut kind = [0u8];
            r.read_exact(&mut kind).map_err(|_| bad("entry kind"))?;
            let kind = match kind[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k} for `{name}`"))),
            };
            let ndim = read_u32(r).map_err(|_| bad("entry shape"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut n: usize = 1;
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("entry shape"))?;
                let d = usize::try_from(u64::from_le_bytes(b))
                    .map_err(|_| Error::Checkpoint(format!("dimension overflow in `{name}`")))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("dimension overflow in `{name}`")))?;
                shape.push(d);
            }
            let mut raw = vec![0u8; n.checked_mul(8).ok_or_else(|| bad("entry data"))?];
            r.read_exact(&mut raw).map_err(|_| bad("entry data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(name, Tensor::new(&shape, data)?, kind)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }

    /// Overwrite values from `other`, matching by name. Every parameter in
    /// `self` must be present in `other` with the same shape.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let j = other
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            let src = other.get(j);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in checkpoint but {:?} in model",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Binds parameters of one store into a graph, each at most once.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    frozen: Vec<bool>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
            frozen: vec![false; store.len()],
        }
    }

    /// Every parameter bound as a constant.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self {
            frozen: vec![true; store.len()],
            ..Self::new(store)
        }
    }

    /// Bind these parameters as constants: they receive no gradient.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.frozen[id.0] = true;
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Graph node for a parameter, created on first use.
    pub fn bind(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.frozen[id.0] || self.store.kind(id) == ParamKind::Buffer {
            g.constant(value)
        } else {
            g.variable(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound, trainable, unfrozen parameter.
    pub fn grads(&self, g: &Graph) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                g.requires_grad(v).then(|| (ParamId(i), g.grad_tensor(v)))
            })
            .collect()
    }
}

/// One forward pass: a graph, the parameter binding, and side outputs
/// (running-statistic updates and optional operation counts).
pub struct Session<'s> {
    pub graph: Graph,
    pub params: Binder<'s>,
    /// Batch-norm uses batch statistics when true, running statistics otherwise.
    pub training: bool,
    bn_updates: Vec<(ParamId, Tensor)>,
    counts: Option<OpCounts>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            graph: Graph::new(),
            params: Binder::new(store),
            training,
            bn_updates: Vec::new(),
            counts: None,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.params.bind(&mut self.graph, id)
    }

    /// Start counting synaptic operations for the energy estimate.
    pub fn enable_op_counts(&mut self) {
        self.counts = Some(OpCounts::default());
    }

    pub fn op_counts(&self) -> Option<&OpCounts> {
        self.counts.as_ref()
    }

    pub(crate) fn counts_mut(&mut self) -> Option<&mut OpCounts> {
        self.counts.as_mut()
    }

    /// Latest value of a buffer, including updates made during this session.
    pub(crate) fn buffer_value(&self, id: ParamId) -> Tensor {
        self.bn_updates
            .iter()
            .rev()
            .find(|(i, _)| *i == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.params.store.get(id).clone())
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.bn_updates.push((id, value));
    }

    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.params.grads(&self.graph)
    }

    /// Pending running-statistic updates, to apply with [`apply_updates`].
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Write buffer updates back into the store. Later updates win.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(())
}
