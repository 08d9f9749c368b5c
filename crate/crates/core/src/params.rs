//! Named parameter storage and its binding into autodiff graphs.

use std::borrow::Cow;
use std::collections::HashMap;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::tape::{Gradients, Graph, Mat, Var};

/// Ordered collection of named matrices. Insertion order is the
/// serialization and optimizer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Panics on unknown names; parameter layouts are fixed by construction.
    pub fn get(&self, name: &str) -> &Mat {
        &self.values[self.expect_id(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let id = self.expect_id(name);
        &mut self.values[id]
    }

    fn expect_id(&self, name: &str) -> usize {
        self.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Round every entry to the nearest f32 so a float32 checkpoint
    /// reproduces the in-memory model exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Weight `fan_in x fan_out` and zero bias `1 x fan_out`.
pub fn add_linear(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    store.insert(format!("{name}.w"), gaussian(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt()));
    store.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
}

pub fn add_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Array2::ones((1, dim)));
    store.insert(format!("{name}.b"), Array2::zeros((1, dim)));
}

/// A graph plus lazily created leaves for the parameters it touches.
pub struct Fwd<'a> {
    pub g: Graph<'a>,
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    vars: Vec<Option<Var>>,
}

fn always(_: &str) -> bool {
    true
}

fn never(_: &str) -> bool {
    false
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            trainable,
            vars: vec![None; store.len()],
        }
    }

    /// Every parameter receives gradients.
    pub fn training(store: &'a ParamStore) -> Self {
        Self::new(store, &always)
    }

    /// No parameter receives gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, &never)
    }

    pub fn p(&mut self, name: &str) -> Var {
        let id = self.store.expect_id(name);
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = self
            .g
            .leaf(Cow::Borrowed(&self.store.values[id]), (self.trainable)(name));
        self.vars[id] = Some(v);
        v
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.g.layer_norm(x, g, b)
    }

    /// Per-parameter gradients, `None` for parameters unused or frozen.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Mat>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}
