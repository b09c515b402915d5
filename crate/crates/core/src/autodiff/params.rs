use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Records every tensor on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t)).collect()
    }

    /// Adds the gradients that a backward pass left on `vars` (as returned
    /// by [`ParamSet::bind`]) into each tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, vars: &[Var<'_>]) {
        assert_eq!(vars.len(), self.tensors.len());
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = v.grad() {
                t.accumulate_grad(g.data());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}
