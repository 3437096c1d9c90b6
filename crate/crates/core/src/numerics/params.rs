//! Named trainable parameters, batch-norm running statistics, and the
//! per-forward binding of both onto a [`Graph`].

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;

use super::graph::{Gradients, Graph, Var};
use super::ops::norm::{BatchStats, Mode, RunningStats};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Seeded generator used for every initialisation in the crate.
pub type ModelRng = rand_pcg::Pcg64Mcg;

pub fn seeded_rng(seed: u64) -> ModelRng {
    ModelRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub name: String,
    pub stats: RunningStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(usize);

/// All parameters and running statistics of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    bn: Vec<BnState>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.index.contains_key(name) || self.bn.iter().any(|b| b.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.claim(name)?;
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_bn(&mut self, name: &str, channels: usize) -> Result<BnId> {
        self.claim(name)?;
        self.bn.push(BnState {
            name: name.to_string(),
            stats: RunningStats::new(channels),
        });
        Ok(BnId(self.bn.len() - 1))
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn running(&self, id: BnId) -> &RunningStats {
        &self.bn[id.0].stats
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.scale_in_place(0.0);
        }
    }

    /// Add the gradients of every parameter bound in `bindings`.
    pub fn accumulate_grads(&mut self, bindings: &Bindings<'_>, grads: &Gradients) {
        for (slot, p) in bindings.params.iter().zip(&mut self.params) {
            if let Some(var) = slot {
                if let Some(g) = grads.get(*var) {
                    p.grad.add_assign(g);
                }
            }
        }
    }

    /// Fold the batch statistics gathered during a train-mode forward into
    /// the running averages.
    pub fn apply_batch_stats(&mut self, bindings: &Bindings<'_>, momentum: f64) {
        for (id, stats) in &bindings.stats {
            self.bn[id.0].stats.update(stats, momentum);
        }
    }
}

/// One forward evaluation of a model over a [`Graph`].
///
/// Parameters are bound lazily as graph leaves the first time they are
/// used; train-mode batch statistics are collected rather than applied, so
/// a forward can be repeated (e.g. for finite differences) without side
/// effects on the store.
pub struct Forward<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    mode: Mode,
    track_grads: bool,
    bound: RefCell<Vec<Option<Var<'g>>>>,
    stats: RefCell<Vec<(BnId, BatchStats)>>,
}

/// Graph handles of the parameters used by a forward, and its batch statistics.
pub struct Bindings<'g> {
    params: Vec<Option<Var<'g>>>,
    stats: Vec<(BnId, BatchStats)>,
}

impl<'g> Bindings<'g> {
    pub fn param(&self, id: ParamId) -> Option<Var<'g>> {
        self.params[id.0]
    }

    pub fn batch_stats(&self) -> &[(BnId, BatchStats)] {
        &self.stats
    }
}

impl<'g, 's> Forward<'g, 's> {
    /// Forward whose parameters receive gradients.
    pub fn new(graph: &'g Graph, store: &'s ParamStore, mode: Mode) -> Self {
        Self::build(graph, store, mode, true)
    }

    /// Forward with parameters bound as constants (inference).
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore, mode: Mode) -> Self {
        Self::build(graph, store, mode, false)
    }

    fn build(graph: &'g Graph, store: &'s ParamStore, mode: Mode, track_grads: bool) -> Self {
        Forward {
            graph,
            store,
            mode,
            track_grads,
            bound: RefCell::new(vec![None; store.params.len()]),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            self.graph
                .leaf(self.store.params[id.0].value.clone(), self.track_grads)
        })
    }

    pub fn running(&self, id: BnId) -> &'s RunningStats {
        &self.store.bn[id.0].stats
    }

    pub fn record_batch_stats(&self, id: BnId, stats: BatchStats) {
        self.stats.borrow_mut().push((id, stats));
    }

    pub fn finish(self) -> Bindings<'g> {
        Bindings {
            params: self.bound.into_inner(),
            stats: self.stats.into_inner(),
        }
    }
}
