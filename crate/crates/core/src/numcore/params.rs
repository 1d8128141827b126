use super::{checkpoint, Real, Tensor};
use sha2::{Digest, Sha256};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<R: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<R>) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
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

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn refs(&self) -> Vec<&Tensor<R>> {
        self.tensors.iter().collect()
    }

    pub fn refs_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.tensors.iter_mut().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 of the checkpoint encoding, hex.
    pub fn content_hash(&self) -> String {
        let bytes = checkpoint::encode(self);
        hex::encode(Sha256::digest(&bytes))
    }
}
