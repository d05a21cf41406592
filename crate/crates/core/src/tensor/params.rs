use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;

use super::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Panics on duplicate names; parameter names are fixed by model topology.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = self.values.len();
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor of `src` whose name, after replacing the prefix
    /// `from` by `to`, exists here with the same shape. Returns the count.
    pub fn copy_prefixed(&mut self, src: &ParamStore, from: &str, to: &str) -> usize {
        let mut copied = 0;
        for (_, name, value) in src.iter() {
            let Some(rest) = name.strip_prefix(from) else {
                continue;
            };
            let target = format!("{to}{rest}");
            if let Some(id) = self.find(&target) {
                if self.values[id.0].shape() == value.shape() {
                    self.values[id.0] = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Scoped parameter allocator used by layer constructors.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamInit<'_> {
        ParamInit {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}{}", self.prefix, name), value)
    }

    /// He-normal weights for a `[cout, cin, k, k]` convolution.
    pub fn conv_weight(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> ParamId {
        let fan_in = (cin * k * k) as f64;
        let w = Tensor::randn([cout, cin, k, k], (2.0 / fan_in).sqrt(), self.rng);
        self.add(name, w)
    }

    pub fn zeros(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }
}
