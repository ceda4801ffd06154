//! Named parameter storage and the small layer building blocks shared by
//! every part of the model.

use crate::error::{Error, Result};
use crate::numerics::{lit, Prng, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors. Registration order is the
/// canonical order for checkpoints and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Tape handle for a parameter; copied onto the tape on first use.
    pub fn var(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.bind(id.0, || self.tensors[id.0].clone())
    }

    /// Per-parameter gradients, zero for parameters never bound on `tape`.
    pub fn gradients(&self, tape: &Tape<T>, grads: &crate::numerics::Gradients<T>) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| match tape.bound(i) {
                Some(v) => grads.tensor(tape, v),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }

    pub fn replace_tensors(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::CheckpointShape {
                    name: self.names[i].clone(),
                    manifest: new.shape().to_vec(),
                    model: old.shape().to_vec(),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Weight initializer: truncated normal (clipped at two standard deviations)
/// for weights, zeros for biases, ones for normalization gains.
#[derive(Debug, Clone)]
pub struct Init {
    rng: Prng,
    std: f64,
}

pub const INIT_STD: f64 = 0.02;

impl Init {
    pub fn new(seed: u64) -> Self {
        Self::with_std(seed, INIT_STD)
    }

    pub fn with_std(seed: u64, std: f64) -> Self {
        Init {
            rng: Prng::new(seed),
            std,
        }
    }

    pub fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| lit(self.rng.truncated_normal(self.std, 2.0)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }
}

/// Fully connected layer `y = x W + b` with `W[d_in, d_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.weight(&[d_in, d_out]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.var(tape, self.w);
        let b = store.var(tape, self.b);
        tape.linear(x, w, Some(b))
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// Normalization epsilon; no value is prescribed for the model, so a
/// BERT-family constant is used.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, h: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[h], T::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[h]));
        LayerNorm { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = store.var(tape, self.gain);
        let b = store.var(tape, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_and_lookup() {
        let mut store = ParamStore::<f32>::default();
        let mut init = Init::new(0);
        let fc = Linear::new(&mut store, &mut init, "fc", 3, 2);
        let ln = LayerNorm::new(&mut store, "ln", 2);
        assert_eq!(store.names(), &["fc.weight", "fc.bias", "ln.gain", "ln.bias"]);
        assert_eq!(store.find("ln.gain"), Some(ln.gain));
        assert_eq!(store.get(fc.w).shape(), &[3, 2]);
        assert_eq!(store.numel(), 6 + 2 + 2 + 2);
        assert!(store.get(fc.b).data().iter().all(|&v| v == 0.0));
        assert!(store.get(ln.gain).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let a: Tensor<f32> = Init::new(5).weight(&[50, 50]);
        let b: Tensor<f32> = Init::new(5).weight(&[50, 50]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        let c: Tensor<f32> = Init::new(6).weight(&[50, 50]);
        assert_ne!(a, c);
    }

    #[test]
    fn binding_is_cached_per_tape() {
        let mut store = ParamStore::<f64>::default();
        let id = store.add("x", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let v1 = store.var(&mut tape, id);
        let v2 = store.var(&mut tape, id);
        assert_eq!(v1, v2);
        assert_eq!(tape.len(), 1);
    }
}
