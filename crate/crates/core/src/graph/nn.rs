//! Parameter storage, initialization, and common layer helpers.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{Arr, Tape, Var};

/// Named parameter set. Slots are stable for the life of the store; values are
/// reference-counted so tapes can alias them without copying.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Arr>>,
    decay: Vec<bool>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; `decay` controls whether weight decay applies.
    pub fn add(&mut self, name: &str, value: Arr, decay: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let slot = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.decay.push(decay);
        self.by_name.insert(name.to_string(), slot);
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn decays(&self, slot: usize) -> bool {
        self.decay[slot]
    }

    pub fn value(&self, slot: usize) -> &Arr {
        &self.values[slot]
    }

    pub(crate) fn rc_value(&self, slot: usize) -> &Rc<Arr> {
        &self.values[slot]
    }

    pub fn value_by_name(&self, name: &str) -> Option<&Arr> {
        self.slot(name).map(|s| self.value(s))
    }

    pub fn set_value(&mut self, slot: usize, value: Arr) {
        assert_eq!(self.values[slot].shape(), value.shape(), "parameter shape change");
        self.values[slot] = Rc::new(value);
    }

    pub fn update_in_place(&mut self, slot: usize, f: impl FnOnce(&mut Arr)) {
        f(Rc::make_mut(&mut self.values[slot]));
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Count of scalar parameters across slots matching a predicate.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| pred(n))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Bitwise fingerprint of parameters matching a predicate; used by freeze
    /// contracts to detect drift.
    pub fn fingerprint(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut bytes = Vec::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            if pred(n) {
                bytes.extend_from_slice(n.as_bytes());
                for x in v.iter() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        crate::archive::sha256_hex(&bytes)
    }

    pub fn to_archive(&self, archive: &mut Archive, prefix: &str) {
        for (n, v) in self.names.iter().zip(&self.values) {
            archive.insert_tensor(&format!("{prefix}{n}"), (**v).clone());
        }
    }

    /// Load all parameters from tensors named `prefix + name`; shapes must match.
    pub fn load_archive(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for i in 0..self.values.len() {
            let key = format!("{}{}", prefix, self.names[i]);
            let t = archive.tensor(&key)?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Archive(format!(
                    "tensor `{key}` shape {:?} != expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Rc::new(t.clone());
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

/// Box-Muller standard normal draw; keeps init independent of distribution
/// crates and identical across platforms.
pub fn randn(rng: &mut Rng) -> f32 {
    use rand::Rng as _;
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 > 1e-300 {
            return ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
        }
    }
}

pub fn randn_array(rng: &mut Rng, shape: &[usize], std: f32) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| randn(rng) * std).collect();
    Arr::from_shape_vec(shape.to_vec(), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(shape.to_vec())
}

/// Register a linear layer (fan-in scaled init) and return its slots.
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = (1.0 / in_dim as f32).sqrt();
        let w = store.add(&format!("{name}.w"), randn_array(rng, &[in_dim, out_dim], std), true);
        let b = store.add(&format!("{name}.b"), zeros(&[out_dim]), false);
        Self { w, b, in_dim, out_dim }
    }

    pub fn apply(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.add_bias(t.matmul(x, w), b)
    }
}

pub struct Conv1d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (1.0 / (cin * k) as f32).sqrt();
        let w = store.add(&format!("{name}.w"), randn_array(rng, &[cout, cin, k], std), true);
        let b = store.add(&format!("{name}.b"), zeros(&[cout]), false);
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv1d(x, w, b, self.stride, self.pad)
    }
}

pub struct ConvT1d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (1.0 / (cin * k) as f32).sqrt();
        let w = store.add(&format!("{name}.w"), randn_array(rng, &[cin, cout, k], std), true);
        let b = store.add(&format!("{name}.b"), zeros(&[cout]), false);
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv_transpose1d(x, w, b, self.stride, self.pad)
    }
}

pub struct LayerNorm {
    pub g: usize,
    pub b: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let g = store.add(&format!("{name}.g"), Arr::ones(vec![dim]), false);
        let b = store.add(&format!("{name}.b"), zeros(&[dim]), false);
        Self { g, b }
    }

    pub fn apply(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let g = t.param(store, self.g);
        let b = t.param(store, self.b);
        t.layer_norm(x, g, b, 1e-5)
    }
}

/// Convenience constructors for fixed-value arrays used in tests and inits.
pub fn arr1(v: &[f32]) -> Arr {
    Array1::from_vec(v.to_vec()).into_dyn()
}

pub fn arr2v(rows: usize, cols: usize, v: &[f32]) -> Arr {
    Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap().into_dyn()
}

pub fn arr3v(a: usize, b: usize, c: usize, v: &[f32]) -> Arr {
    Array3::from_shape_vec((a, b, c), v.to_vec()).unwrap().into_dyn()
}
