use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, IxDyn};
use rand::Rng;

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: ArrayD<T>,
    grad: ArrayD<T>,
}

/// Named parameters, each with a gradient buffer of identical shape.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State("duplicate parameter name"));
        }
        let id = ParamId(self.entries.len());
        let grad = ArrayD::zeros(value.raw_dim());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, grad });
        Ok(id)
    }

    /// Glorot-uniform `rows × cols` weight matrix.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| T::of(rng.random_range(-limit..limit)));
        self.add(name, w.into_dyn())
    }

    pub fn add_filled(&mut self, name: impl Into<String>, len: usize, value: f64) -> Result<ParamId> {
        self.add(name, Array1::from_elem(len, T::of(value)).into_dyn())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut ArrayD<T>, &ArrayD<T>) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad)
    }

    pub fn matrix(&self, id: ParamId) -> Result<ArrayView2<'_, T>> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape(format!("parameter `{}` is not a matrix", self.name(id))))
    }

    pub fn vector(&self, id: ParamId) -> Result<ArrayView1<'_, T>> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::shape(format!("parameter `{}` is not a vector", self.name(id))))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    /// Copy of all parameter values, in registration order.
    pub fn snapshot(&self) -> Vec<ArrayD<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[ArrayD<T>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::shape("snapshot parameter count differs"));
        }
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            if e.value.shape() != v.shape() {
                return Err(Error::shape(format!("snapshot shape differs for `{}`", e.name)));
            }
            e.value.assign(v);
        }
        Ok(())
    }

    /// Same parameters converted to another precision (gradients zeroed).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            let v = e.value.mapv(|x| U::of(x.to_f64().expect("finite")));
            out.add(e.name.clone(), v).expect("names already unique");
        }
        out
    }

    pub(crate) fn from_parts(parts: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, shape, data) in parts {
            let v = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|_| Error::shape(format!("tensor `{name}` data does not match its shape")))?;
            store.add(name, v)?;
        }
        Ok(store)
    }
}
