//! Named parameter storage, initialisation helpers and safetensors persistence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::{NnError, Result, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
}

/// Flat list of named tensors. Non-trainable entries hold running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            trainable,
        });
        id
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

    pub fn get(&self, id: ParamId) -> &Arc<Tensor> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let entry = &mut self.entries[id.0];
        assert_eq!(
            entry.value.shape(),
            value.shape(),
            "shape change for {}",
            entry.name
        );
        entry.value = Arc::new(value);
    }

    /// Mutable access, copying the tensor if a graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Serialise to safetensors bytes (little-endian f64).
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .entries
            .iter()
            .map(|e| {
                let mut buf = Vec::with_capacity(e.value.numel() * 8);
                for v in e.value.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                (e.name.clone(), e.value.shape().to_vec(), buf)
            })
            .collect();
        let mut views = Vec::with_capacity(bytes.len());
        for (name, shape, buf) in &bytes {
            let view = TensorView::new(Dtype::F64, shape.clone(), buf)
                .map_err(|e| NnError::Serialize(e.to_string()))?;
            views.push((name.clone(), view));
        }
        let mut meta = HashMap::new();
        let trainable: BTreeMap<&str, bool> = self
            .entries
            .iter()
            .map(|e| (e.name.as_str(), e.trainable))
            .collect();
        let frozen: Vec<&str> = trainable
            .iter()
            .filter(|(_, t)| !**t)
            .map(|(n, _)| *n)
            .collect();
        meta.insert("frozen".to_string(), frozen.join(","));
        safetensors::serialize(views, &Some(meta)).map_err(|e| NnError::Serialize(e.to_string()))
    }

    /// Overwrite every entry from safetensors bytes; names and shapes must match.
    pub fn load_safetensors(&mut self, bytes: &[u8]) -> Result<()> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| NnError::Serialize(e.to_string()))?;
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let view = st
                .tensor(&name)
                .map_err(|_| NnError::MissingParam(name.clone()))?;
            if view.dtype() != Dtype::F64 {
                return Err(NnError::Serialize(format!("{name}: expected F64")));
            }
            if view.shape() != self.entries[i].value.shape() {
                return Err(NnError::Shape(format!(
                    "{name}: stored shape {:?} vs model shape {:?}",
                    view.shape(),
                    self.entries[i].value.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            self.entries[i].value = Arc::new(Tensor::new(view.shape().to_vec(), data));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_safetensors()?)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.load_safetensors(&bytes)
    }
}

/// Scoped parameter creation, in the spirit of a var-builder.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn RngCore) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape.to_vec(), bound, &mut *self.rng);
        self.store.insert(self.full_name(name), t, true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape.to_vec(), std, &mut *self.rng);
        self.store.insert(self.full_name(name), t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store
            .insert(self.full_name(name), Tensor::full(shape.to_vec(), value), true)
    }

    /// Non-trainable buffer (e.g. batch-norm running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store
            .insert(self.full_name(name), Tensor::full(shape.to_vec(), value), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn safetensors_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            let mut lin = pb.pp("lin");
            lin.normal("weight", &[3, 4], 0.7);
            lin.buffer("running_mean", &[4], 0.25);
        }
        let bytes = store.to_safetensors().unwrap();
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            let shape = other.get(id).shape().to_vec();
            other.set(id, Tensor::zeros(shape));
        }
        other.load_safetensors(&bytes).unwrap();
        for id in store.ids() {
            assert_eq!(store.get(id), other.get(id));
            assert_eq!(store.name(id), other.name(id));
        }
        assert_eq!(store.lookup("lin.weight"), Some(ParamId(0)));
        assert!(!store.is_trainable(ParamId(1)));
    }

    #[test]
    fn shape_mismatch_on_load_is_an_error() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(vec![2, 2]), true);
        let bytes = a.to_safetensors().unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(vec![4]), true);
        assert!(matches!(b.load_safetensors(&bytes), Err(NnError::Shape(_))));
    }
}
