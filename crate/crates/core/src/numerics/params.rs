//! Parameter containers generic over their leaf type.
//!
//! Weight structs are written once as `Foo<T>`: `Foo<Tensor>` holds values,
//! `Foo<Var>` the same parameters bound to a [`Graph`]. [`ParamTree::try_map`]
//! walks the leaves with stable dotted names, which drives binding,
//! serialization and gradient updates alike.

use std::collections::BTreeMap;
use std::convert::Infallible;

use rand::Rng;

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait ParamTree<T> {
    type With<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<Self::With<U>, E>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::With<U> {
        match self.try_map::<U, Infallible>(prefix, &mut |n, t| Ok(f(n, t))) {
            Ok(v) => v,
            Err(e) => match e {},
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.map(prefix, &mut |n, t| f(n, t));
    }
}

/// Operations available once the leaves are concrete tensors.
pub trait TensorParams: ParamTree<Tensor> + Sized {
    /// Registers every leaf as a named parameter of `g`.
    fn bind(&self, g: &mut Graph, prefix: &str) -> Self::With<Var> {
        self.map(prefix, &mut |n, t| g.param(n, t.clone()))
    }

    fn named_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(prefix, &mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Replaces every leaf with the same-named, same-shaped tensor from `source`.
    fn load_named(
        &self,
        prefix: &str,
        source: &BTreeMap<String, Tensor>,
    ) -> Result<Self::With<Tensor>> {
        self.try_map(prefix, &mut |n, t| {
            let s = source.get(n).ok_or_else(|| Error::Format {
                format: "weights",
                detail: format!("missing tensor {n}"),
            })?;
            if s.shape() != t.shape() {
                return Err(Error::shape(
                    "load_named",
                    format!("{n}: {:?} vs {:?}", s.shape(), t.shape()),
                ));
            }
            Ok(s.clone())
        })
    }

    /// `leaf -= lr * grad` for every leaf whose name passes `trainable` and has a gradient.
    fn sgd_step(
        &self,
        prefix: &str,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Self::With<Tensor>> {
        self.try_map(prefix, &mut |n, t| match grads.get(n) {
            Some(g) if trainable(n) => t.zip_map(g, "sgd_step", |w, d| w - lr * d),
            _ => Ok(t.clone()),
        })
    }
}

impl<P: ParamTree<Tensor>> TensorParams for P {}

/// `y = x W + b`, `W: [D_in, D_out]`.
#[derive(Clone, Debug)]
pub struct LinearWeights<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> ParamTree<T> for LinearWeights<T> {
    type With<U> = LinearWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<LinearWeights<U>, E> {
        Ok(LinearWeights {
            weight: f(&join(prefix, "weight"), &self.weight)?,
            bias: f(&join(prefix, "bias"), &self.bias)?,
        })
    }
}

impl LinearWeights {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_in, d_out], std, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }
}

impl LinearWeights<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNormWeights<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl<T> ParamTree<T> for LayerNormWeights<T> {
    type With<U> = LayerNormWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<LayerNormWeights<U>, E> {
        Ok(LayerNormWeights {
            gamma: f(&join(prefix, "gamma"), &self.gamma)?,
            beta: f(&join(prefix, "beta"), &self.beta)?,
        })
    }
}

impl LayerNormWeights {
    /// Ones/zeros.
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

impl LayerNormWeights<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type With<U> = Vec<P::With<U>>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<Self::With<U>, E> {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.try_map(&join(prefix, &i.to_string()), f))
            .collect()
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for BTreeMap<usize, P> {
    type With<U> = BTreeMap<usize, P::With<U>>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<Self::With<U>, E> {
        self.iter()
            .map(|(k, p)| Ok((*k, p.try_map(&join(prefix, &k.to_string()), f)?)))
            .collect()
    }
}
