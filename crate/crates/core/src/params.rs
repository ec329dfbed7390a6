//! Named parameter storage, grouping and tape binding.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Branch,
    Heads,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Branch, Group::Heads];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Branch => "branch",
            Group::Heads => "heads",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: Group, trainable: bool) {
        self.params.insert(
            name.into(),
            Param {
                tensor: tensor.with_requires_grad(trainable),
                group,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.get_mut(name)?.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Number of trainable scalar entries.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Canonical byte image of one group: name, shape and little-endian values per parameter.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.tensor.rank() as u64).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&p.tensor.to_le_bytes());
        }
        out
    }

    /// SHA-256 of [`ParamStore::group_bytes`], hex encoded.
    pub fn group_hash(&self, group: Group) -> String {
        hex::encode(Sha256::digest(self.group_bytes(group)))
    }

    /// Writes gradients into the `grad` buffers of trainable parameters.
    pub fn assign_grads(&mut self, grads: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(&name)?;
            if !p.trainable() {
                return Err(Error::FreezeLeak(name));
            }
            p.tensor.set_grad(g.into_data())?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).expect("shape and data agree")
}

/// Lazily places parameters on a tape as leaves.
///
/// Trainable parameters become differentiable leaves unless the binder was
/// built with [`Binder::frozen`].
pub struct Binder<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    grad_enabled: bool,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            grad_enabled: true,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Every parameter enters the tape as a constant.
    pub fn frozen(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = if self.grad_enabled && p.trainable() {
            self.tape.var(p.tensor.clone())
        } else {
            self.tape.constant(p.tensor.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every trainable parameter; unbound ones get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(name, p)| {
                let g = bound
                    .get(name)
                    .and_then(|v| grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
