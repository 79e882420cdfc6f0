//! Dense row-major tensors and named parameter collections.

use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};

/// An n-dimensional array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero-size dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(shape_err!("item() on tensor of shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err!(
                    "stack: {:?} does not match {:?}",
                    t.shape,
                    first.shape
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// One named entry of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// `false` for non-trainable state such as batch-norm running statistics.
    pub requires_grad: bool,
}

/// Named model parameters in deterministic insertion order.
///
/// Cloning is a deep copy: the clone shares no storage with the original.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert_entry(name.into(), value, true)
    }

    /// Adds a non-trainable state tensor (skipped by optimizers and `param_count`).
    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert_entry(name.into(), value, false)
    }

    fn insert_entry(&mut self, name: String, value: Tensor, requires_grad: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                grad: None,
                requires_grad,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.param(name)?
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGrad(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry_at(&self, index: usize) -> Option<(&str, &Param)> {
        self.entries.get_index(index).map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry_at_mut(&mut self, index: usize) -> Option<(&str, &mut Param)> {
        self.entries
            .get_index_mut(index)
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grad` into the accumulator of entry `index`.
    pub fn accumulate_grad(&mut self, index: usize, grad: &Tensor) -> Result<()> {
        let (name, p) = self
            .entries
            .get_index_mut(index)
            .ok_or_else(|| Error::MissingParam(format!("#{index}")))?;
        if grad.shape() != p.value.shape() {
            return Err(shape_err!(
                "gradient {:?} for `{name}` of shape {:?}",
                grad.shape(),
                p.value.shape()
            ));
        }
        match &mut p.grad {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Whether every trainable value is bit-identical to `other`'s.
    pub fn values_bit_equal(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
