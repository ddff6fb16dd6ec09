//! Named parameter storage.

use std::collections::HashMap;

use rand::Rng;

use crate::diffmath::{Array, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered collection of named arrays. Order is insertion order and is the
/// order used by the optimizer and the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array, decay: bool) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.position(name)
            .map(|i| &self.params[i].value)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i].value),
            None => Err(Error::Internal(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn values(&self) -> Vec<Array> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Array]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Internal("parameter count changed".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim("set_values", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        Bound { store: self, vars }
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] registered on one tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Variables in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform in `±scale·√(3/fan_in)`, i.e. variance `scale²/fan_in`.
pub(crate) fn init_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array {
    let a = scale * (3.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Array::matrix(rows, cols, data).expect("init shape")
}

pub(crate) fn init_embedding<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array {
    let a = std * 3f64.sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Array::matrix(rows, cols, data).expect("init shape")
}
