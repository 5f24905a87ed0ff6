use std::collections::{BTreeMap, HashMap};

use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter identifier `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{name}` shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape {
        name: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Named trainable tensors, iterated in identifier order.
///
/// Also carries the Adam moment estimates and step count so optimizer state
/// travels with the parameters it belongs to.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
    adam_steps: u64,
}

/// Parameters bound onto one tape as gradient-tracking leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|p| p.grad.as_deref())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    /// Register every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Register every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Add the tape gradients of bound leaves into the parameter gradients.
    /// Leaves the backward pass never reached count as zero.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, p) in self.params.iter_mut() {
            let slot = p.grad.get_or_insert_with(|| vec![0.0; p.value.len()]);
            if let Some(var) = bound.try_get(name) {
                if let Some(g) = tape.grad(var) {
                    for (s, x) in slot.iter_mut().zip(g) {
                        *s += x;
                    }
                }
            }
        }
    }

    /// Reset every gradient to zero.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            match p.grad.as_mut() {
                Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
                None => p.grad = Some(vec![0.0; p.value.len()]),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiply every gradient by `k`.
    pub fn scale_grads(&mut self, k: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for p in self.params.values_mut() {
                if let Some(g) = p.grad.as_mut() {
                    g.iter_mut().for_each(|x| *x *= k);
                }
            }
        }
        norm
    }

    /// One bias-corrected Adam update over every parameter.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<(), ParamError> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(ParamError::MissingGrad(name.clone()));
        }
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in self.params.values_mut() {
            let g = p.grad.as_ref().expect("checked above");
            let data = p.value.data_mut();
            for i in 0..data.len() {
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g[i];
                p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// `self <- coeff * self + (1 - coeff) * online`, elementwise.
    pub fn polyak_from(&mut self, online: &ParameterSet, coeff: f64) -> Result<(), ParamError> {
        for (name, p) in self.params.iter_mut() {
            let src = online
                .params
                .get(name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            let s = src.value.data();
            for (d, o) in p.value.data_mut().iter_mut().zip(s) {
                *d = coeff * *d + (1.0 - coeff) * o;
            }
        }
        Ok(())
    }

    /// Copy of the values only (no optimizer state, no gradients).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Replace values from `records`; every identifier must exist with a
    /// matching shape.
    pub fn load_values(&mut self, records: &BTreeMap<String, Tensor>) -> Result<(), ParamError> {
        for (name, p) in self.params.iter_mut() {
            let t = records
                .get(name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn from_records(records: BTreeMap<String, Tensor>) -> Self {
        Self {
            params: records
                .into_iter()
                .map(|(k, v)| (k, Parameter::new(v)))
                .collect(),
            adam_steps: 0,
        }
    }
}
