use super::{Graph, Real, Tensor, Var};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Excluded from training; always receives a zero gradient.
    pub frozen: bool,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

/// Named parameter tensors for one network. Names are stable and sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) {
        self.map.insert(
            name.into(),
            Param {
                value,
                frozen: false,
                decay,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    /// Insert (or reuse) the named parameter as a leaf of `g`.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Var {
        let p = self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        g.param(name, &p.value, !p.frozen)
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (k, p) in self.map.iter_mut() {
            if k.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    pub fn freeze_all(&mut self) {
        for p in self.map.values_mut() {
            p.frozen = true;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|p| p.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            frozen: p.frozen,
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Sub-store of parameters under `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .filter_map(|(k, p)| k.strip_prefix(prefix).map(|s| (s.to_string(), p.clone())))
                .collect(),
        }
    }

    /// Merge `other` into `self` under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, p) in &other.map {
            self.map.insert(format!("{prefix}{k}"), p.clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian f32 payloads.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.map {
            h.update(k.as_bytes());
            for d in &p.value.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value.data {
                h.update((v.to_f64c() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
