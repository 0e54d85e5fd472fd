//! Parameter storage, gradient maps and the AMSGrad optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Identifies one tensor in one store across graphs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u32,
    pub index: u32,
}

/// Index of a tensor inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trained by the optimizer.
    Param,
    /// State carried with the model but never differentiated
    /// (power-iteration vectors, for example).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<F> {
    pub name: String,
    pub kind: EntryKind,
    pub tensor: Tensor<F>,
}

/// Named tensors owned by one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    id: u32,
    name: String,
    entries: Vec<Entry<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        Self { id, name: name.into(), entries: Vec::new() }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.push(name.into(), EntryKind::Param, tensor)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.push(name.into(), EntryKind::Buffer, tensor)
    }

    fn push(&mut self, name: String, kind: EntryKind, tensor: Tensor<F>) -> ParamId {
        self.entries.push(Entry { name, kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.id, index: id.0 as u32 }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::UnknownParam(format!("{}/{name}", self.name)))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Param).map(|e| e.tensor.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash of every entry's bits, for cheap
    /// "did anything change" checks.
    pub fn checksum(&self) -> u64 {
        self.hash_entries(|_| true)
    }

    /// Like [`checksum`](Self::checksum) but over trainable entries only.
    pub fn param_checksum(&self) -> u64 {
        self.hash_entries(|e| e.kind == EntryKind::Param)
    }

    fn hash_entries(&self, keep: impl Fn(&Entry<F>) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in self.entries.iter().filter(|e| keep(e)) {
            for &v in e.tensor.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    pub(crate) by_key: BTreeMap<ParamKey, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor<F>> {
        self.by_key.get(&key)
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.by_key.keys()
    }

    pub fn all_finite(&self) -> bool {
        self.by_key.values().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmsgradConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient (coupled, as in `torch.optim.Adam`).
    pub weight_decay: f64,
}

impl Default for AmsgradConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub v_max: Vec<F>,
}

/// Adam with the AMSGrad running maximum of the second moment.
///
/// Parameters that received no gradient in a step are left untouched,
/// weight decay included.
#[derive(Clone, Debug, PartialEq)]
pub struct Amsgrad<F> {
    pub config: AmsgradConfig,
    pub state: BTreeMap<ParamKey, Moments<F>>,
}

impl<F: Float> Amsgrad<F> {
    pub fn new(config: AmsgradConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn step(&mut self, stores: &mut [&mut ParamStore<F>], grads: &Gradients<F>) -> Result<()> {
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let wd = F::lit(c.weight_decay);
        let eps = F::lit(c.eps);
        for store in stores.iter_mut() {
            let sid = store.id();
            for (i, entry) in store.entries_mut().iter_mut().enumerate() {
                let key = ParamKey { store: sid, index: i as u32 };
                let Some(grad) = grads.get(key) else { continue };
                if entry.kind != EntryKind::Param {
                    continue;
                }
                if grad.shape() != entry.tensor.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} does not match parameter {} {:?}",
                        grad.shape(),
                        entry.name,
                        entry.tensor.shape()
                    )));
                }
                let n = grad.numel();
                let mom = self.state.entry(key).or_insert_with(|| Moments {
                    step: 0,
                    m: vec![F::zero(); n],
                    v: vec![F::zero(); n],
                    v_max: vec![F::zero(); n],
                });
                if mom.m.len() != n {
                    return Err(Error::Shape(format!("optimizer state for {} has wrong size", entry.name)));
                }
                mom.step += 1;
                let bc1 = 1.0 - c.beta1.powi(mom.step as i32);
                let bc2 = 1.0 - c.beta2.powi(mom.step as i32);
                let step_size = F::lit(c.lr / bc1);
                let bc2_sqrt = F::lit(bc2.sqrt());
                let p = entry.tensor.data_mut();
                for j in 0..n {
                    let g = grad.data()[j] + wd * p[j];
                    mom.m[j] = b1 * mom.m[j] + one_b1 * g;
                    mom.v[j] = b2 * mom.v[j] + one_b2 * g * g;
                    if mom.v[j] > mom.v_max[j] {
                        mom.v_max[j] = mom.v[j];
                    }
                    let denom = mom.v_max[j].sqrt() / bc2_sqrt + eps;
                    p[j] -= step_size * mom.m[j] / denom;
                }
            }
        }
        Ok(())
    }
}
