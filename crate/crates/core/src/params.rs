//! Named parameter storage, deterministic initialization, and binding of
//! stored parameters onto a tape for one forward pass.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from hierarchical parameter name to value.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar learnables.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// L2 norm of every parameter, in storage order.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.l2_norm())).collect()
    }
}

/// Parameters placed on a tape: differentiable named leaves on a recording
/// tape, constants on an inference tape or when `trainable` is false.
pub struct Bound<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn bind(tape: &'t Tape<T>, params: &ParamSet<T>, trainable: bool) -> Result<Self> {
        let mut vars = IndexMap::with_capacity(params.len());
        for (name, value) in params.iter() {
            let v = if trainable {
                tape.param(name, value.clone())?
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Ok(Bound { tape, vars })
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<&Var<'t, T>> {
        self.vars.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

/// Joins a hierarchical prefix and a leaf name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded initializer that appends freshly drawn parameters to a set.
pub struct ParamBuilder<T: Scalar> {
    rng: ChaCha8Rng,
    params: ParamSet<T>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamSet::new(),
        }
    }

    pub fn finish(self) -> ParamSet<T> {
        self.params
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
    }

    /// Conv weight `[out, in_per_group, k, k]` drawn from `U(±1/sqrt(fan_in))`
    /// plus an optional zero bias.
    pub fn conv(&mut self, prefix: &str, out: usize, in_per_group: usize, k: usize, bias: bool) -> Result<()> {
        let bound = 1.0 / ((in_per_group * k * k) as f64).sqrt();
        let w = self.uniform(&[out, in_per_group, k, k], bound);
        self.params.insert(join(prefix, "w"), w)?;
        if bias {
            self.params.insert(join(prefix, "b"), Tensor::zeros(&[out]))?;
        }
        Ok(())
    }

    /// Zero conv weight and, optionally, zero bias.
    pub fn zero_conv(&mut self, prefix: &str, out: usize, in_per_group: usize, k: usize, bias: bool) -> Result<()> {
        self.params
            .insert(join(prefix, "w"), Tensor::zeros(&[out, in_per_group, k, k]))?;
        if bias {
            self.params.insert(join(prefix, "b"), Tensor::zeros(&[out]))?;
        }
        Ok(())
    }

    /// Layer-norm gain (ones) and offset (zeros).
    pub fn layer_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.params.insert(join(prefix, "g"), Tensor::ones(&[channels]))?;
        self.params.insert(join(prefix, "b"), Tensor::zeros(&[channels]))
    }

    /// EM bases `[k, d]`: unit-variance uniform draws, rows L2-normalized.
    pub fn bases(&mut self, name: &str, k: usize, d: usize) -> Result<()> {
        let mut t = self.uniform(&[k, d], 3f64.sqrt());
        for row in t.data_mut().chunks_mut(d) {
            let n = row
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            row.iter_mut().for_each(|v| *v = T::lit(v.as_f64() / n));
        }
        self.params.insert(name, t)
    }
}
