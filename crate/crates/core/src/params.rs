//! Named parameter storage shared by the model, the optimizer and checkpoints.

use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Convolutional blocks and the e1 prediction conv.
    Encoder,
    /// The duplicated prediction conv producing e2.
    E2Head,
    Predictor,
    Decoder,
    /// Predicts e2 from e1.
    Disentangler1,
    /// Predicts e1 from e2.
    Disentangler2,
}

impl ParamGroup {
    pub fn is_disentangler(self) -> bool {
        matches!(self, ParamGroup::Disentangler1 | ParamGroup::Disentangler2)
    }

    /// Parameters the pruned inference model keeps.
    pub fn on_prediction_path(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::Predictor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group, tensor: tensor.with_requires_grad(true) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_where(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| pred(p.group)).map(|(id, _)| id).collect()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds every parameter gradient held by `graph` into the stored tensors.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<(), TensorError> {
        for (id, g) in graph.param_grads() {
            self.params[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// SHA-256 over names and little-endian values of the selected groups.
    pub fn hash_groups(&self, pred: impl Fn(ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(p.group)) {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}
