//! Flat registry of named trainable arrays.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("ParamStore::register", n, data.len()));
        }
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalars across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Locates a flat scalar coordinate as (array, offset).
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if flat < p.data.len() {
                return Some((ParamId(i), flat));
            }
            flat -= p.data.len();
        }
        None
    }

    /// A zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// `self += factor * other`, array by array.
    pub fn axpy(&mut self, factor: T, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v *= factor;
            }
        }
    }

    pub fn squared_norm(&self) -> T {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|&v| v * v)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Copies every array whose name also exists in `other`.
    pub fn copy_matching(&mut self, other: &Self) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(q) = other.params.iter().find(|q| q.name == p.name && q.shape == p.shape) {
                p.data.clone_from(&q.data);
                copied += 1;
            }
        }
        copied
    }
}

/// He-normal initialization for a layer with `fan_in` inputs.
pub fn he_normal<T: Real>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.register("a", &[2], vec![1.0, 2.0]).unwrap();
        assert!(store.register("a", &[1], vec![0.0]).is_err());
        assert!(store.register("b", &[3], vec![0.0]).is_err());
    }

    #[test]
    fn flat_coordinates() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", &[2], vec![1.0, 2.0]).unwrap();
        let b = store.register("b", &[1, 3], vec![3.0, 4.0, 5.0]).unwrap();
        assert_eq!(store.num_scalars(), 5);
        assert_eq!(store.locate(1), Some((a, 1)));
        assert_eq!(store.locate(2), Some((b, 0)));
        assert_eq!(store.locate(5), None);
        let grads = store.zeros_like();
        assert!(store.same_layout(&grads));
    }
}
