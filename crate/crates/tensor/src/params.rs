use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to.
///
/// Decoder indices are zero-based. The split between regression and scoring
/// branches is what lets the trainer route trajectory gradients to the
/// winning decoder only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Shared,
    Regression(usize),
    Scoring(usize),
}

impl Partition {
    pub fn decoder(self) -> Option<usize> {
        match self {
            Partition::Shared => None,
            Partition::Regression(j) | Partition::Scoring(j) => Some(j),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Shared => write!(f, "shared"),
            Partition::Regression(j) => write!(f, "decoder_{}.regression", j + 1),
            Partition::Scoring(j) => write!(f, "decoder_{}.scoring", j + 1),
        }
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    partitions: Vec<Partition>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, partition: Partition) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.partitions.push(partition);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn partition(&self, name: &str) -> Option<Partition> {
        self.index.get(name).map(|&i| self.partitions[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, Partition)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.partitions)
            .map(|((n, t), p)| (n.as_str(), t, *p))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks that each of the `k` decoders owns at least one regression and one scoring tensor.
    pub fn validate_decoders(&self, k: usize) -> Result<()> {
        for j in 0..k {
            for want in [Partition::Regression(j), Partition::Scoring(j)] {
                if !self.partitions.contains(&want) {
                    return Err(TensorError::UnknownParameter(format!("no parameters in partition {want}")));
                }
            }
        }
        if let Some(p) = self.partitions.iter().find(|p| p.decoder().is_some_and(|j| j >= k)) {
            return Err(TensorError::UnknownParameter(format!("partition {p} beyond {k} decoders")));
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the precision checkpoints store.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every store entry must be present with a matching shape.
    pub fn load_from(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let found: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = found
                .get(name.as_str())
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_from",
                    left: tensor.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            *tensor = (*src).clone();
        }
        Ok(())
    }
}

/// Uniform fan-in initialization, `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Gradients keyed by parameter name, in the owning store's order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    partitions: Vec<Partition>,
    index: HashMap<String, usize>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            names: store.names.clone(),
            tensors: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            partitions: store.partitions.clone(),
            index: store.index.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, Partition)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.partitions)
            .map(|((n, t), p)| (n.as_str(), t, *p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, Partition)> {
        self.names
            .iter()
            .zip(self.tensors.iter_mut())
            .zip(self.partitions.iter().copied())
            .map(|((n, t), p)| (n.as_str(), t, p))
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.scale_in_place(factor);
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
