//! Named parameter storage shared by every model in the crate.
//!
//! Parameters are plain `f64` matrices tagged with the optimizer group they
//! belong to during adapter fine-tuning. Models hold [`ParamId`] handles and
//! read values through the store, so a whole model can be checksummed,
//! serialized or cloned as a unit.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Optimizer group a parameter belongs to during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Lora,
    Codebook,
    Classifiers,
    Perceiver,
    /// Pre-trained backbone weights and the speaker conditioner.
    Frozen,
    /// Parameters of auxiliary models (toy ASR, speaker embedder, probes).
    Aux,
}

impl ParamGroup {
    pub const FINETUNE: [ParamGroup; 5] = [
        ParamGroup::Lora,
        ParamGroup::Codebook,
        ParamGroup::Classifiers,
        ParamGroup::Perceiver,
        ParamGroup::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Lora => "lora",
            ParamGroup::Codebook => "codebook",
            ParamGroup::Classifiers => "classifiers",
            ParamGroup::Perceiver => "perceiver",
            ParamGroup::Frozen => "frozen",
            ParamGroup::Aux => "aux",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Integrity(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(id)
    }

    /// Gaussian-initialized parameter.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::config("init_std", e.to_string()))?;
        let value = Mat::from_shape_simple_fn(shape, || dist.sample(rng));
        self.insert(name, group, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: (usize, usize)) -> Result<ParamId> {
        self.insert(name, group, Mat::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, group: ParamGroup, shape: (usize, usize)) -> Result<ParamId> {
        self.insert(name, group, Mat::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.params[id.0].group = group;
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, p) in self.params.iter().enumerate() {
            if self.index.insert(p.name.clone(), ParamId(i)).is_some() {
                return Err(Error::Integrity(format!("parameter `{}` registered twice", p.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, groups and raw little-endian values of every
    /// parameter matching `filter`, in registration order.
    pub fn checksum_where(&self, filter: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            h.update(p.group.name().as_bytes());
            let (r, c) = p.value.dim();
            h.update((r as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    pub fn group_checksum(&self, group: ParamGroup) -> String {
        self.checksum_where(|p| p.group == group)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradient accumulators produced by a backward pass.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}
