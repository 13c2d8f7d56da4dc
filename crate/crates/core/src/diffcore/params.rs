use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Mixes a parameter name into a base seed (FNV-1a), so each parameter draws
/// from its own stream regardless of which other parameters exist.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Values drawn uniformly from `[-bound, bound]`.
pub fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                T::lit(rng.random_range(-bound..=bound))
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor. `decay` marks whether weight decay applies.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub decay: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(),
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds `grad` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.tensor.numel() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: p.tensor.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        for (g, &d) in p.tensor.grad_mut().iter_mut().zip(grad) {
            *g = *g + d;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.tensor.cast(), p.decay).expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2]), true).is_err());
        assert_eq!(s.id("a"), Some(ParamId(0)));
    }

    #[test]
    fn accumulate_and_zero() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[3]), true).unwrap();
        s.accumulate_grad(id, &[1.0, 2.0, 3.0]).unwrap();
        s.accumulate_grad(id, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.value(id).grad().unwrap(), &[2.0, 3.0, 4.0]);
        s.zero_grad();
        assert_eq!(s.value(id).grad().unwrap(), &[0.0; 3]);
        assert!(s.accumulate_grad(id, &[1.0]).is_err());
    }
}
