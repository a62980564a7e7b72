//! Named, ordered parameter storage and the forward-pass binding context.
//!
//! A [`ParamStore`] owns every learnable tensor and persistent buffer of a
//! model in insertion order, keyed by unique hierarchical names like
//! `parsing.hourglass.down1.conv.weight`. Layers hold [`ParamId`] handles
//! into the store, never tensors, so the same layer definitions drive `f32`
//! training and `f64` gradient checking.
//!
//! A forward pass never mutates the store. Each pass opens a [`Pass`],
//! which lazily copies parameters into the autodiff graph as leaves (one
//! leaf per parameter, shared between all its uses) and collects the batch
//! statistics that batch-norm layers want written back; the caller applies
//! those updates after the step. That convention keeps forwards pure, which
//! the finite-difference oracle relies on.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to an entry in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named tensor: a trainable parameter or a persistent buffer
/// (batch-norm running statistics are buffers).
pub struct Entry<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

/// Insertion-ordered collection of parameters and buffers.
pub struct ParamStore<E: Scalar> {
    entries: Vec<Entry<E>>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Register a tensor under a unique hierarchical name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Entry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &Entry<E> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
    }

    /// Replace a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                format!(
                    "cannot assign {} into parameter {:?} of shape {}",
                    value.shape(),
                    e.name,
                    e.value.shape()
                ),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Entry<E>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Mark every parameter whose name starts with `prefix` as
    /// non-trainable: passes stop requesting gradients for them and the
    /// optimizer refuses to touch them.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    /// Total scalar count of trainable parameters (the model's headline
    /// parameter count).
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Total scalar count including buffers.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Zero every trainable entry in place (test helper: many blocks have
    /// exact closed forms under zero weights).
    pub fn zero_trainable(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            e.value.zero_();
        }
    }

    /// Element-wise conversion of every entry (used to build the `f64` twin
    /// of an `f32` model for gradient checking).
    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

// ------------------------------------------------------------------- init

/// Deterministic stream cipher RNG used for every random draw in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Tensor with entries drawn uniformly from `[-bound, bound)`. Draws happen
/// in `f64` so the same seed produces corresponding `f32`/`f64` stores.
pub fn uniform_tensor<E: Scalar, R: Rng>(rng: &mut R, shape: Shape, bound: f64) -> Tensor<E> {
    let data = (0..shape.len())
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape by construction")
}

/// Fan-in-scaled uniform bound for a convolution: `1 / sqrt(cin * k * k)`.
pub fn conv_bound(cin: usize, k: usize) -> f64 {
    1.0 / ((cin * k * k) as f64).sqrt()
}

// ----------------------------------------------------------------- binding

/// Pending write-back of batch statistics from one batch-norm forward.
pub struct BnUpdate<E: Scalar> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Tensor<E>,
    /// Biased batch variance, exactly as used for normalization.
    pub batch_var: Tensor<E>,
    /// Elements per channel that produced the statistics (N * H * W).
    pub count: usize,
    pub momentum: f64,
}

/// One forward pass: an autodiff graph plus the store it binds from.
///
/// Binding is cached, so a parameter used by several layers becomes a
/// single graph leaf and its gradient accumulates across uses.
pub struct Pass<'s, E: Scalar> {
    pub g: Graph<E>,
    store: &'s ParamStore<E>,
    bound: Vec<Option<Var>>,
    pairs: Vec<(ParamId, Var)>,
    pub bn_updates: Vec<BnUpdate<E>>,
    pub training: bool,
}

impl<'s, E: Scalar> Pass<'s, E> {
    pub fn new(store: &'s ParamStore<E>, training: bool) -> Self {
        Pass {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            pairs: Vec::new(),
            bn_updates: Vec::new(),
            training,
        }
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    /// Leaf for a parameter; trainable entries request gradients.
    pub fn bind(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let e = self.store.entry(id);
        let v = self.g.leaf(e.value.clone(), e.trainable)?;
        self.bound[id.0] = Some(v);
        self.pairs.push((id, v));
        Ok(v)
    }

    /// Constant leaf for non-parameter data (inputs, targets, masks).
    pub fn input(&mut self, t: Tensor<E>) -> Result<Var> {
        self.g.constant(t)
    }

    /// Parameters bound so far, in first-use order.
    pub fn bound_pairs(&self) -> &[(ParamId, Var)] {
        &self.pairs
    }

    /// After backward: gradient per bound trainable parameter, zeros where
    /// a parameter ended up off the loss path.
    pub fn take_grads(&mut self) -> Vec<(ParamId, Tensor<E>)> {
        let mut out = Vec::with_capacity(self.pairs.len());
        for &(id, var) in &self.pairs {
            if !self.store.entry(id).trainable {
                continue;
            }
            let g = self
                .g
                .take_grad(var)
                .unwrap_or_else(|| Tensor::zeros(self.store.value(id).shape()));
            out.push((id, g));
        }
        out
    }
}
