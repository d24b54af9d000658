//! Named parameter registry.
//!
//! All learnable tensors live in one flat [`ParamSet`]; modules hold
//! [`ParamId`]s and bind them into a graph per forward pass. Creation
//! order is deterministic and doubles as the checkpoint serialization
//! order. Two optimizer groups exist: the toy backbone trains at a
//! much smaller step size than the aggregation layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Main,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<T>,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}");
        self.entries.push(ParamEntry {
            name,
            shape,
            values,
            group,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Binds the parameter into the graph, reusing the node when the
    /// same parameter is bound twice so fan-out grads accumulate.
    pub fn node(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        let e = &self.entries[id.0];
        g.bind_param(id.0, &e.shape, &e.values)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Flattens every parameter into one f64 vector (registry order).
    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for e in &self.entries {
            out.extend(e.values.iter().map(|v| v.to_f64()));
        }
        out
    }

    /// Overwrites all parameter values from a flat f64 vector.
    pub fn load_flat_f64(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::contract(format!(
                "flat vector has {} values, parameter set holds {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            for v in &mut e.values {
                *v = T::from_f64(flat[off]);
                off += 1;
            }
        }
        Ok(())
    }

    /// Converts the whole set to another precision.
    pub fn convert<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: e.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    group: e.group,
                })
                .collect(),
        }
    }
}

/// Seeded normal init. Values are drawn in f64 and converted so f32
/// and f64 instantiations see the same stream.
pub fn normal_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> Vec<T> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| T::from_f64(gauss(rng) * sigma)).collect()
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Vec<T> {
    vec![T::ZERO; shape.iter().product()]
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Vec<T> {
    vec![T::ONE; shape.iter().product()]
}

/// Box-Muller standard normal from two uniform draws; avoids any
/// distribution-crate sampling details so the stream is pinned by this
/// crate alone.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
