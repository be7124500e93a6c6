//! Named parameter storage, deterministic initialization and checkpoint IO.
//!
//! Parameter names are `group.path` strings; the group prefix (text before the
//! first '.') is the unit of freezing and of checkpoint organization. The
//! checkpoint file is a single little-endian binary archive of named arrays.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Arr, Grads, Graph, NodeId};
use crate::error::{GlyphError, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arr,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    /// Global seed mixed into per-parameter init streams.
    pub init_seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        ParamStore { params: BTreeMap::new(), init_seed }
    }

    /// Registers a parameter with normal(0, std) init. Returns the stored name.
    /// Re-registering an existing name is a no-op (shapes must agree).
    pub fn register(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) {
        if let Some(p) = self.params.get(name) {
            assert_eq!(p.value.shape(), shape, "re-register shape mismatch for {name}");
            return;
        }
        let value = if std == 0.0 {
            ArrayD::zeros(IxDyn(shape))
        } else {
            let mut rng = ChaCha12Rng::seed_from_u64(self.init_seed ^ name_hash(name));
            let dist = Normal::new(0.0, std).unwrap();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(&mut rng))
        };
        self.params.insert(name.to_string(), Param { value, trainable });
    }

    /// Registers with an explicit value (e.g. fixed codec constants).
    pub fn register_const(&mut self, name: &str, value: Arr) {
        self.register_value(name, value, false);
    }

    /// Registers with an explicit initial value.
    pub fn register_value(&mut self, name: &str, value: Arr, trainable: bool) {
        if let Some(p) = self.params.get(name) {
            assert_eq!(p.value.shape(), value.shape(), "re-register shape mismatch for {name}");
            return;
        }
        self.params.insert(name.to_string(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    /// Names in a group (prefix before the first '.').
    pub fn group_names(&self, group: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.split('.').next() == Some(group))
            .cloned()
            .collect()
    }

    /// Marks every parameter of a group trainable or frozen.
    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.split('.').next() == Some(group) {
                p.trainable = trainable;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"GGCKPT01");
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in &self.params {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(p.trainable as u8);
            buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for d in p.value.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| GlyphError::io(path, e))?;
        f.write_all(&buf).map_err(|e| GlyphError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| GlyphError::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| GlyphError::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(GlyphError::Checkpoint("truncated archive".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != b"GGCKPT01" {
            return Err(GlyphError::Checkpoint("bad magic".into()));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| GlyphError::Checkpoint("bad name".into()))?;
            let trainable = take(&mut pos, 1)?[0] != 0;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| GlyphError::Checkpoint(format!("bad shape: {e}")))?;
            params.insert(name, Param { value, trainable });
        }
        Ok(ParamStore { params, init_seed: 0 })
    }
}

/// A graph plus the parameter bindings created while building it.
///
/// Binding is memoized per name so a parameter used in several places shares
/// one leaf node and its gradients accumulate correctly. Frozen parameters
/// bind as constants, so no gradient ever flows into them.
pub struct Tape<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    binds: BTreeMap<String, NodeId>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape { g: Graph::new(), store, binds: BTreeMap::new() }
    }

    pub fn with_capture(store: &'s ParamStore) -> Self {
        Tape { g: Graph::with_capture(), store, binds: BTreeMap::new() }
    }

    /// Binds a parameter by name, returning its (memoized) leaf node.
    pub fn p(&mut self, name: &str) -> NodeId {
        if let Some(id) = self.binds.get(name) {
            return *id;
        }
        let param = self.store.get(name);
        let id = self.g.leaf(param.value.clone(), param.trainable);
        self.binds.insert(name.to_string(), id);
        id
    }

    /// Collects parameter-name -> gradient after a backward pass.
    /// Parameters bound as constants (frozen) are absent.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.binds {
            if let Some(gv) = grads.get(*id) {
                out.insert(name.clone(), gv.clone());
            }
        }
        out
    }
}
