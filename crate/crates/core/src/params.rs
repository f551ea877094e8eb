//! Named, grouped model parameters.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter group; decides freezing and learning rate during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Enhancer,
    Projector,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Enhancer, Group::Projector, Group::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Enhancer => "enhancer",
            Group::Projector => "projector",
            Group::Decoder => "decoder",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group '{s}'")))
    }
}

/// Set of groups, used as a trainability mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn none() -> Self {
        GroupSet(0)
    }

    pub fn all() -> Self {
        Group::ALL.into_iter().collect()
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn insert(&mut self, g: Group) {
        self.0 |= g.bit();
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl FromIterator<Group> for GroupSet {
    fn from_iter<I: IntoIterator<Item = Group>>(iter: I) -> Self {
        let mut s = GroupSet::none();
        iter.into_iter().for_each(|g| s.insert(g));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: Group, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("register", format!("duplicate parameter name '{name}'")));
        }
        tensor.requires_grad = true;
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, group, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// SHA-256 over names, shapes and raw bits of one group (or all).
    pub fn checksum(&self, group: Option<Group>) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Forward-pass context: a tape plus read access to the parameters.
///
/// Each parameter becomes a single leaf on first use; it requires a
/// gradient only when its group is in the trainable set.
pub struct Cx<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    trainable: GroupSet,
    leaves: RefCell<Vec<Option<Var>>>,
}

impl<'a> Cx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: GroupSet) -> Self {
        Cx {
            tape,
            store,
            trainable,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.leaves.borrow()[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf(p.tensor.clone(), self.trainable.contains(p.group));
        self.leaves.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of trainable parameters touched by this forward pass,
    /// after `tape.backward` has run.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.leaves
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
