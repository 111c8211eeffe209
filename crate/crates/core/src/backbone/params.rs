//! Named parameter tensors grouped for freezing and bound onto a tape.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Mat, Tape, Var};
use crate::error::{invalid, Result, TempoError};

/// Freeze-policy class of a tensor. Every tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PositionEmbedding,
    LayerNorm,
    Lora,
    AttentionCore,
    MlpCore,
    Heads,
    Prompts,
    Embed,
    RevinAffine,
    LocalDecomp,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::PositionEmbedding,
        ParamGroup::LayerNorm,
        ParamGroup::Lora,
        ParamGroup::AttentionCore,
        ParamGroup::MlpCore,
        ParamGroup::Heads,
        ParamGroup::Prompts,
        ParamGroup::Embed,
        ParamGroup::RevinAffine,
        ParamGroup::LocalDecomp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::PositionEmbedding => "position_embedding",
            ParamGroup::LayerNorm => "layer_norm",
            ParamGroup::Lora => "lora",
            ParamGroup::AttentionCore => "attention_core",
            ParamGroup::MlpCore => "mlp_core",
            ParamGroup::Heads => "heads",
            ParamGroup::Prompts => "prompts",
            ParamGroup::Embed => "embed",
            ParamGroup::RevinAffine => "revin_affine",
            ParamGroup::LocalDecomp => "local_decomp",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = TempoError;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| invalid!("unknown parameter group {s:?}"))
    }
}

/// Which groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything trains.
    #[default]
    FromScratch,
    /// Attention and MLP weights stay fixed. Everything else trains.
    GptStyle,
}

impl FreezePolicy {
    pub fn is_trainable(self, group: ParamGroup) -> bool {
        match self {
            FreezePolicy::FromScratch => true,
            FreezePolicy::GptStyle => {
                !matches!(group, ParamGroup::AttentionCore | ParamGroup::MlpCore)
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezePolicy::FromScratch => "from_scratch",
            FreezePolicy::GptStyle => "gpt_style",
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = TempoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from_scratch" => Ok(FreezePolicy::FromScratch),
            "gpt_style" => Ok(FreezePolicy::GptStyle),
            _ => Err(invalid!("unknown freeze policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order everywhere tensors are flattened, checkpoints included.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid!("duplicate parameter {name:?}"));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Panics on an unknown name; parameter names are fixed by the model
    /// layout.
    pub fn get(&self, name: &str) -> &Mat {
        &self.params[self.expect_id(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let id = self.expect_id(name);
        &mut self.params[id].value
    }

    fn expect_id(&self, name: &str) -> usize {
        self.id(name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }

    pub fn param(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        for p in &mut self.params {
            p.trainable = policy.is_trainable(p.group);
        }
    }

    /// `(group, trainable)` for every group present in the store.
    pub fn group_flags(&self) -> Vec<(ParamGroup, bool)> {
        let mut flags: Vec<(ParamGroup, bool)> = Vec::new();
        for p in &self.params {
            match flags.iter_mut().find(|(g, _)| *g == p.group) {
                Some((_, t)) => *t |= p.trainable,
                None => flags.push((p.group, p.trainable)),
            }
        }
        flags.sort();
        flags
    }

    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Lazily places parameters on a tape as leaves, once each.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Var {
        let id = self.store.expect_id(name);
        *self.vars[id].get_or_insert_with(|| tape.leaf(self.store.params[id].value.clone()))
    }

    /// Collects per-parameter gradients; unused parameters get `None`.
    pub fn collect(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self
                .vars
                .iter()
                .map(|v| v.and_then(|v| grads.get(v).cloned()))
                .collect(),
        }
    }
}

/// Gradients aligned with [`ParamStore`] order. `None` means zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient entry for flat coordinate `coord` of parameter `id`.
    pub fn coord(&self, id: usize, coord: usize) -> f64 {
        self.get(id)
            .and_then(|g| g.as_slice().map(|s| s[coord]))
            .unwrap_or(0.0)
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Evaluates a scalar loss built on a fresh tape and returns its value with
/// gradients for every parameter of `store`.
pub fn value_and_grad<F>(store: &ParamStore, build: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut Tape, &mut Binder<'_>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let loss = build(&mut tape, &mut binder)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), binder.collect(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        for (i, g) in ParamGroup::ALL.into_iter().enumerate() {
            s.insert(format!("p{i}"), g, Mat::zeros((1, 2))).unwrap();
        }
        s
    }

    #[test]
    fn policies() {
        let mut s = store();
        s.set_freeze_policy(FreezePolicy::GptStyle);
        for (g, t) in s.group_flags() {
            let frozen = matches!(g, ParamGroup::AttentionCore | ParamGroup::MlpCore);
            assert_eq!(t, !frozen, "{g}");
        }
        s.set_freeze_policy(FreezePolicy::FromScratch);
        assert!(s.group_flags().iter().all(|(_, t)| *t));
        assert!("frozen_everything".parse::<FreezePolicy>().is_err());
        assert_eq!("gpt_style".parse::<FreezePolicy>().unwrap(), FreezePolicy::GptStyle);
    }

    #[test]
    fn group_names_roundtrip() {
        for g in ParamGroup::ALL {
            assert_eq!(g.as_str().parse::<ParamGroup>().unwrap(), g);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("p0", ParamGroup::Heads, Mat::zeros((1, 1))).is_err());
    }
}
