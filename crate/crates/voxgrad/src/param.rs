use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::Var;
use crate::tensor::Tensor;
use crate::Error;

pub type ParamId = usize;

static NEXT_PARAM: AtomicUsize = AtomicUsize::new(0);

struct ParamInner {
    id: ParamId,
    name: String,
    value: RwLock<Tensor>,
    trainable: AtomicBool,
}

/// A named, mutable weight tensor shared between a model and its store.
#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        Param(Arc::new(ParamInner {
            id: NEXT_PARAM.fetch_add(1, Ordering::Relaxed),
            name,
            value: RwLock::new(value),
            trainable: AtomicBool::new(true),
        }))
    }

    pub fn id(&self) -> ParamId {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn value(&self) -> Tensor {
        self.0.value.read().expect("param lock poisoned").clone()
    }

    pub fn set_value(&self, value: Tensor) {
        let mut guard = self.0.value.write().expect("param lock poisoned");
        assert_eq!(guard.shape(), value.shape(), "param {} reshaped", self.0.name);
        *guard = value;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.read().expect("param lock poisoned").shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.read().expect("param lock poisoned").len()
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, on: bool) {
        self.0.trainable.store(on, Ordering::Relaxed)
    }

    /// Graph leaf carrying the current value.
    pub fn var(&self) -> Var {
        Var::from_param(self)
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name(), self.shape())
    }
}

/// Named weight registry plus the seeded generator used to initialize it.
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn root(&mut self) -> Path<'_> {
        Path {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.params.values() {
            p.set_trainable(on);
        }
    }

    /// SHA-256 over names, shapes and raw little-endian values, in name order.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            let v = p.value();
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn snapshot(&self) -> NamedTensors {
        NamedTensors(
            self.params
                .iter()
                .map(|(k, p)| (k.clone(), StoredTensor::from(&p.value())))
                .collect(),
        )
    }

    /// Overwrites every parameter from `snap`; names and shapes must match exactly.
    pub fn load(&self, snap: &NamedTensors) -> Result<(), Error> {
        for name in snap.0.keys() {
            if !self.params.contains_key(name) {
                return Err(Error::UnknownParam(name.clone()));
            }
        }
        for (name, p) in &self.params {
            let stored = snap.0.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let t = stored.to_tensor()?;
            if t.shape() != p.shape().as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape(),
                    found: t.shape().to_vec(),
                });
            }
            p.set_value(t);
        }
        Ok(())
    }
}

/// Hierarchical naming handle used while building a model.
pub struct Path<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Path<'_> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Path<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Path {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Param {
        let full = self.full(name);
        assert!(!self.store.params.contains_key(&full), "duplicate parameter {full}");
        let p = Param::new(full.clone(), value);
        self.store.params.insert(full, p.clone());
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Param {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.store.rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    /// Normal with the given standard deviation (Box-Muller on the store generator).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Param {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = self.store.rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = self.store.rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let t = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * t.cos());
            if data.len() < n {
                data.push(std * r * t.sin());
            }
        }
        self.add(name, Tensor::new(shape, data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Param {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Param {
        self.add(name, Tensor::ones(shape))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }
}

impl StoredTensor {
    pub fn to_tensor(&self) -> Result<Tensor, Error> {
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::CorruptTensor(self.shape.clone(), self.data.len()));
        }
        Ok(Tensor::new(&self.shape, self.data.clone()))
    }
}

/// Name → tensor map in a stable order, used for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NamedTensors(pub BTreeMap<String, StoredTensor>);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut s = ParamStore::new(seed);
            s.root().sub("a").uniform("w", &[4, 4], 0.5);
            s.sha256()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn load_rejects_shape_change() {
        let mut s = ParamStore::new(0);
        s.root().zeros("w", &[2]);
        let mut other = ParamStore::new(0);
        other.root().zeros("w", &[3]);
        assert!(matches!(s.load(&other.snapshot()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn snapshot_load_roundtrip() {
        let mut s = ParamStore::new(1);
        s.root().sub("x").normal("w", &[3, 3], 1.0);
        let snap = s.snapshot();
        let h = s.sha256();
        s.get("x.w").unwrap().set_value(Tensor::zeros(&[3, 3]));
        assert_ne!(s.sha256(), h);
        s.load(&snap).unwrap();
        assert_eq!(s.sha256(), h);
    }
}
