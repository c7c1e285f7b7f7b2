//! Named parameter storage and per-tape binding.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`,
    /// requiring identical names and shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (name, t)) in other.iter().enumerate() {
            if *name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {}, found {name}",
                    self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_from",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Trainable leaves on `g`, one per parameter.
    pub fn bind(&self, g: &mut Graph) -> Result<Binding> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<_>>()?;
        Ok(Binding { vars })
    }

    /// Constant leaves, for inference where no gradient is wanted.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Binding> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<_>>()?;
        Ok(Binding { vars })
    }

    /// Gradients of every bound parameter (zeros where none reached it).
    pub fn gradients(&self, g: &Graph, binding: &Binding) -> Vec<Tensor> {
        binding
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// The graph variables standing for a [`ParamSet`] on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform matrix in `[-1/sqrt(cols), 1/sqrt(cols)]`.
pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

pub fn uniform_vector<R: Rng>(rng: &mut R, len: usize, bound: f64) -> Tensor {
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(vec![len], data)
}
