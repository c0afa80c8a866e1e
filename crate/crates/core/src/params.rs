//! Named parameter storage shared by every block of a model.
//!
//! Blocks hold [`ParamId`]s, never tensors, so two blocks that name the same
//! id share the same weights. A forward pass binds each id to a tape leaf at
//! most once; gradients from every use therefore accumulate on one node.

use std::collections::HashMap;

use rand::Rng;
use ripeloc_tensor::{BnStats, Mode, Tape, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Running statistics; updated by forward passes, never by gradients.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
    /// Index of the owning layer in the model graph.
    pub layer: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, tensor: Tensor, kind: ParamKind, layer: usize) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            tensor,
            kind,
            layer,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn name_index(&self) -> HashMap<String, ParamId> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), ParamId(i)))
            .collect()
    }
}

/// Uniform `±1/√fan_in` initialisation, the usual default for conv kernels.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Per-forward binding of parameter ids to tape leaves.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    bound: Vec<Option<Var>>,
    frozen: Vec<bool>,
    current_frozen: bool,
}

impl<'a> Ctx<'a> {
    /// `frozen_layers[i]` marks layer `i` as frozen: its weights enter the
    /// tape as constants and its BatchNorm layers run on stored statistics.
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode, frozen_layers: Vec<bool>) -> Self {
        let n = store.len();
        Self {
            tape,
            store,
            mode,
            bound: vec![None; n],
            frozen: frozen_layers,
            current_frozen: false,
        }
    }

    pub fn enter_layer(&mut self, layer: usize) {
        self.current_frozen = self.frozen.get(layer).copied().unwrap_or(false);
    }

    fn trainable(&self, id: ParamId) -> bool {
        let e = &self.store.entries[id.0];
        self.mode == Mode::Train
            && e.kind == ParamKind::Weight
            && !self.frozen.get(e.layer).copied().unwrap_or(false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = &self.store.entries[id.0].tensor;
        let v = if self.trainable(id) {
            self.tape.param(t)
        } else {
            self.tape.constant(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()))
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Binds `id` to an existing tape node instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    /// BatchNorm with running statistics read from (and, when training an
    /// unfrozen layer, written back to) the store.
    pub fn batch_norm(&mut self, x: Var, bn: &crate::blocks::Bn) -> Result<Var> {
        let g = self.param(bn.gamma);
        let b = self.param(bn.beta);
        let mut stats = BnStats {
            mean: self.store.get(bn.mean).data().to_vec(),
            var: self.store.get(bn.var).data().to_vec(),
        };
        let mode = if self.mode == Mode::Train && !self.current_frozen {
            Mode::Train
        } else {
            Mode::Eval
        };
        let y = self.tape.batch_norm(x, g, b, &mut stats, mode)?;
        if mode == Mode::Train {
            self.store.get_mut(bn.mean).data_mut().copy_from_slice(&stats.mean);
            self.store.get_mut(bn.var).data_mut().copy_from_slice(&stats.var);
        }
        Ok(y)
    }

    /// Bound (id, var) pairs whose gradients the tape tracks.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(id, _)| self.trainable(*id))
            .collect()
    }
}
