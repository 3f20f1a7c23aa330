//! Named parameter table shared by every module.
//!
//! Modules hold [`ParamId`]s; values, accumulated gradients and training
//! flags live here so that the tape can be discarded after every step
//! without touching model state.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group. Parameters restored by a warm start train at the
/// lower "pretrained" rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateGroup {
    Fresh,
    Pretrained,
}

impl RateGroup {
    pub fn tag(self) -> &'static str {
        match self {
            RateGroup::Fresh => "fresh-rate",
            RateGroup::Pretrained => "pretrained-rate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Matrices and embeddings; weight decay applies.
    Weight,
    /// Biases and normalization affines; no weight decay.
    Bias,
    /// Running statistics; never touched by the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    pub group: RateGroup,
    pub trainable: bool,
}

impl Param {
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique; registering twice is a
    /// programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
            kind,
            group: RateGroup::Fresh,
            trainable: kind != ParamKind::Buffer,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let g = self.params[id.0].grad.data_mut();
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b;
        }
    }

    fn with_prefix<'a>(&'a mut self, prefix: &'a str) -> impl Iterator<Item = &'a mut Param> + 'a {
        self.params
            .iter_mut()
            .filter(move |p| p.name.starts_with(prefix))
    }

    /// Number of scalar values held by parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.with_prefix(prefix) {
            if p.kind != ParamKind::Buffer {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_group(&mut self, prefix: &str, group: RateGroup) {
        for p in self.with_prefix(prefix) {
            p.group = group;
        }
    }

    /// Overwrites every non-buffer parameter under `prefix` with fresh noise.
    pub fn randomize<R: Rng + ?Sized>(&mut self, prefix: &str, rng: &mut R) {
        for p in self.with_prefix(prefix) {
            if p.kind != ParamKind::Buffer {
                p.value = Tensor::randn(p.value.shape(), 1.0, rng);
            }
        }
    }

    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }
}
