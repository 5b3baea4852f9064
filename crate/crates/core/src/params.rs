//! Named parameter layouts, seeded initialization and parameter stores.
//!
//! A [`ParamLayout`] is built once per architecture and hands out [`ParamId`]
//! handles. A [`ParamStore`] holds the tensors in layout order; binding it to
//! a [`Graph`] yields the `Var`s the forward pass reads through those handles.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule for one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain * sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
        gain: f64,
    },
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within a layout.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.specs.len();
        self.index.insert(name.clone(), id);
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(id)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.specs.iter().map(|s| numel(&s.shape)).sum()
    }

    /// Deterministic initialization. Every tensor draws from its own stream
    /// keyed by `(seed, name)`, so adding or removing parameters elsewhere
    /// leaves the rest bit-identical.
    pub fn init(&self, seed: u64) -> ParamStore<f32> {
        let tensors = self
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Const(v) => Tensor::full(&s.shape, v as f32),
                Init::He { fan_in, gain } => {
                    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                    let mut rng = param_rng(seed, &s.name);
                    Tensor::randn(&s.shape, std, &mut rng)
                }
            })
            .collect();
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }

    /// Fails unless `store` has exactly this layout's names and shapes.
    pub fn check(&self, store: &ParamStore<impl Element>) -> Result<()> {
        if store.len() != self.len() {
            return Err(Error::validation(format!(
                "parameter count mismatch: layout has {}, store has {}",
                self.len(),
                store.len()
            )));
        }
        for (spec, (name, t)) in self.specs.iter().zip(store.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::validation(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Parameter tensors in layout order, addressable by id or name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn from_named(pairs: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors) = pairs.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Number of scalars held.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copies every tensor of `src` whose name exists here with the same shape.
    /// Returns how many were copied.
    pub fn copy_matching(&mut self, src: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (name, t) in src.iter() {
            if let Some(dst) = self.by_name_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Places every tensor on `g`, as leaves when `trainable` or as constants.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// A parameter store bound to a graph.
#[derive(Clone, Debug)]
pub struct Bound<'g, T: Element = f32> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Element> Bound<'g, T> {
    /// Wraps vars already placed on a graph, in layout order.
    pub fn from_vars(vars: Vec<Var<'g, T>>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ParamLayout {
        let mut l = ParamLayout::new();
        l.add("a.weight", &[4, 3, 3, 3], Init::He { fan_in: 27, gain: 1.0 });
        l.add("a.bias", &[4], Init::Const(0.0));
        l.add("alpha", &[1], Init::Const(1.0));
        l
    }

    #[test]
    fn init_is_seed_deterministic_and_named() {
        let l = layout();
        let a = l.init(7);
        let b = l.init(7);
        let c = l.init(8);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.count(), 108 + 4 + 1);
        assert_eq!(l.count(), a.count());
        assert_eq!(a.by_name("alpha").unwrap().data(), &[1.0]);
        l.check(&a).unwrap();
    }

    #[test]
    fn per_name_streams_are_independent_of_order() {
        let mut other = ParamLayout::new();
        other.add("extra", &[5], Init::He { fan_in: 5, gain: 1.0 });
        other.add("a.weight", &[4, 3, 3, 3], Init::He { fan_in: 27, gain: 1.0 });
        let s1 = layout().init(3);
        let s2 = other.init(3);
        assert_eq!(s1.by_name("a.weight"), s2.by_name("a.weight"));
    }

    #[test]
    fn he_std_is_roughly_right() {
        let mut l = ParamLayout::new();
        l.add("w", &[20000], Init::He { fan_in: 50, gain: 1.0 });
        let s = l.init(1);
        let t = s.by_name("w").unwrap();
        let var = t.data().iter().map(|v| v * v).sum::<f32>() / t.len() as f32;
        assert!((var - 0.04).abs() < 0.004, "{var}");
    }

    #[test]
    fn check_rejects_mismatch() {
        let l = layout();
        let mut other = ParamLayout::new();
        other.add("a.weight", &[4, 3, 3, 3], Init::Const(0.0));
        assert!(l.check(&other.init(0)).unwrap_err().is_validation());
    }

    #[test]
    fn copy_matching_by_name_and_shape() {
        let l = layout();
        let src = l.init(1);
        let mut dst = l.init(2);
        dst.by_name_mut("a.bias").unwrap().data_mut()[0] = 9.0;
        assert_eq!(dst.copy_matching(&src), 3);
        assert_eq!(dst, src);
    }
}
