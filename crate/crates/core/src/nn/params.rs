use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;

pub type ParamId = usize;

/// A named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat, ordered collection of every learnable tensor in a network.
///
/// Registration order is deterministic, so two builds with the same seed
/// produce bit-identical stores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Param { name, shape, data });
        self.entries.len() - 1
    }

    pub(crate) fn push_constant(&mut self, name: String, shape: Vec<usize>, value: T) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape, vec![value; n])
    }

    /// He-normal initialisation for a leaky rectifier with the given slope.
    pub(crate) fn push_kaiming<R: Rng>(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        slope: f64,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.push(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id].data
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            data: self.entries.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id]
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
