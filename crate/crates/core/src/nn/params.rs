use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Result, SimiError};

/// A trainable tensor plus its AdamW moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { value, grad: None, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// Named parameters in registration order, with the optimizer step count.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        self.insert_param(name, Param::new(value))
    }

    pub(crate) fn insert_param(&mut self, name: impl Into<String>, param: Param<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(SimiError::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.param(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| SimiError::UnknownParameter(name.into()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| SimiError::UnknownParameter(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Places every parameter on `graph`, as gradient-receiving leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if trainable { graph.param(p.value.clone()) } else { graph.constant(p.value.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Copies the gradients left on `graph` by a backward pass into the store.
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn pull_grads(&mut self, graph: &Graph<T>, bound: &BoundParams) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let var = bound.get(name)?;
            p.grad = Some(match graph.grad(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            });
        }
        Ok(())
    }

    /// Adds a freshly initialised parameter: Kaiming-uniform in
    /// `±sqrt(6 / fan_in)` for rank-4 weights, zeros otherwise.
    pub fn init_kaiming(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<()> {
        let value = if shape.len() == 4 {
            let bound = kaiming_bound(shape[1] * shape[2] * shape[3]);
            Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
        } else {
            Tensor::zeros(shape)
        };
        self.insert(name, value)
    }
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Deterministic initialisation of a parameter layout from `seed`.
pub fn init_layout<T: Real>(layout: &[(String, Vec<usize>)], seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in layout {
        store.init_kaiming(name, shape, &mut rng)?;
    }
    Ok(store)
}

/// Graph handles of the parameters bound by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| SimiError::UnknownParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(matches!(s.get("b"), Err(SimiError::UnknownParameter(_))));
    }

    #[test]
    fn kaiming_bound_and_zero_bias() {
        let layout = vec![("w".to_string(), vec![8, 5, 3, 3]), ("b".to_string(), vec![8])];
        let s = init_layout::<f64>(&layout, 11).unwrap();
        let bound = kaiming_bound(45);
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(s.get("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(s.num_parameters(), 8 * 45 + 8);
    }
}
