//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Every op stores a closure mapping the gradient of
//! its output to gradients of its parents.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{kernels, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients of one output with respect to every node it depends on.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Gradients of every named parameter. Parameters that did not influence
    /// the output are omitted.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported under `name` by [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.leaf(t);
        self.params.push((name.into(), v));
        v
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward: Some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from `out`, seeding with ones (the loss is the sum of `out`).
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let seed = Tensor::ones(self.shape(out));
        self.backward_with(out, seed)
    }

    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward", format!("seed {:?}", seed.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g)?;
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p.0] {
                        Some(acc) => acc.accumulate(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g| Ok(vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g| Ok(vec![g.clone(), g.scale(-1.0)])),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let value = av.mul(&bv)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |g| Ok(vec![g.mul(&bv)?, g.mul(&av)?])),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, vec![a], Box::new(move |g| Ok(vec![g.scale(c)])))
    }

    /// `x[L, D] + b[D]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2("add_row")?;
        if self.value(b).len() != d {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for width {d}", self.shape(b)),
            ));
        }
        let bshape = self.shape(b).to_vec();
        let bd = self.value(b).data().to_vec();
        let value = Tensor::from_fn(&[l, d], |i| self.value(x).data()[i] + bd[i % d]);
        Ok(self.push(
            value,
            vec![x, b],
            Box::new(move |g| {
                let mut gb = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Ok(vec![g.clone(), Tensor::new(&bshape, gb)?])
            }),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let value = kernels::matmul(&av, &bv)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |g| {
                let (ga, gb) = kernels::matmul_backward(&av, &bv, g)?;
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, vec![a], Box::new(|g| Ok(vec![g.transpose()?]))))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let orig = self.shape(a).to_vec();
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g| Ok(vec![g.clone().reshape(&orig)?])),
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = kernels::softmax_rows(self.value(a))?;
        let y = value.clone();
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g| Ok(vec![kernels::softmax_rows_backward(&y, g)?])),
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x).clone(), self.value(gamma).clone());
        let value = kernels::layer_norm(&xv, &gv, self.value(beta), eps)?;
        Ok(self.push(
            value,
            vec![x, gamma, beta],
            Box::new(move |g| {
                let (gx, gg, gb) = kernels::layer_norm_backward(&xv, &gv, eps, g)?;
                Ok(vec![gx, gg, gb])
            }),
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a).clone();
        let value = xv.map(kernels::gelu);
        self.push(
            value,
            vec![a],
            Box::new(move |g| {
                Ok(vec![g.zip_map(&xv, "gelu", |gv, x| {
                    gv * kernels::gelu_grad(x)
                })?])
            }),
        )
    }

    pub fn depthwise_conv3x3(&mut self, f: Var, k: Var) -> Result<Var> {
        let (fv, kv) = (self.value(f).clone(), self.value(k).clone());
        let value = kernels::depthwise_conv3x3(&fv, &kv)?;
        Ok(self.push(
            value,
            vec![f, k],
            Box::new(move |g| {
                let (gf, gk) = kernels::depthwise_conv3x3_backward(&fv, &kv, g)?;
                Ok(vec![gf, gk])
            }),
        ))
    }

    pub fn avg_pool2d(&mut self, f: Var, s: usize) -> Result<Var> {
        let shape = self.shape(f).to_vec();
        let value = kernels::avg_pool2d(self.value(f), s)?;
        Ok(self.push(
            value,
            vec![f],
            Box::new(move |g| Ok(vec![kernels::avg_pool2d_backward(&shape, s, g)?])),
        ))
    }

    pub fn resize_bilinear(&mut self, f: Var, h2: usize, w2: usize) -> Result<Var> {
        let shape = self.shape(f).to_vec();
        let value = kernels::resize_bilinear(self.value(f), h2, w2)?;
        Ok(self.push(
            value,
            vec![f],
            Box::new(move |g| Ok(vec![kernels::resize_bilinear_backward(&shape, g)?])),
        ))
    }

    pub fn rope2d(&mut self, x: Var, coords: &[(usize, usize)], base: f64) -> Result<Var> {
        let value = kernels::rope2d(self.value(x), coords, base)?;
        let coords = coords.to_vec();
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |g| Ok(vec![kernels::rope2d_backward(g, &coords, base)?])),
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2("cols")?;
        if start >= end || end > c {
            return Err(Error::shape("cols", format!("[{start}, {end}) of {c}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let value = Tensor::from_fn(&[r, w], |i| src[(i / w) * c + start + i % w]);
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g| {
                let mut out = Tensor::zeros(&[r, c]);
                let od = out.data_mut();
                for (i, &v) in g.data().iter().enumerate() {
                    od[(i / w) * c + start + i % w] = v;
                }
                Ok(vec![out])
            }),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(&[r, c], data)?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Box::new(move |g| {
                let mut outs: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(r * w)).collect();
                for i in 0..r {
                    let row = g.row(i);
                    let mut off = 0;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&row[off..off + w]);
                        off += w;
                    }
                }
                outs.into_iter()
                    .zip(&widths)
                    .map(|(o, &w)| Tensor::new(&[r, w], o))
                    .collect()
            }),
        ))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2("rows")?;
        if start >= end || end > r {
            return Err(Error::shape("rows", format!("[{start}, {end}) of {r}")));
        }
        let value = Tensor::new(
            &[end - start, c],
            self.value(a).data()[start * c..end * c].to_vec(),
        )?;
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g| {
                let mut out = Tensor::zeros(&[r, c]);
                out.data_mut()[start * c..end * c].copy_from_slice(g.data());
                Ok(vec![out])
            }),
        ))
    }

    /// Stacks matrices (or vectors, treated as single rows) with equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = *self.shape(parts[0]).last().unwrap();
        let mut shapes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if *t.shape().last().unwrap() != c || t.rank() > 2 {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} with width {c}", t.shape()),
                ));
            }
            shapes.push(t.shape().to_vec());
            data.extend_from_slice(t.data());
        }
        let total = data.len() / c;
        let value = Tensor::new(&[total, c], data)?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                shapes
                    .iter()
                    .map(|s| {
                        let n: usize = s.iter().product();
                        let t = Tensor::new(s, g.data()[off..off + n].to_vec());
                        off += n;
                        t
                    })
                    .collect()
            }),
        ))
    }

    /// `out[i] = a[index[i]]` row gather; repeated indices accumulate on the way back.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(&[index.len(), c], data)?;
        let index = index.to_vec();
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                Ok(vec![Tensor::new(&[r, c], out)?])
            }),
        ))
    }

    /// Column-wise mean of a matrix, as a `[1, C]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("mean_rows")?;
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in m.iter_mut().zip(self.value(a).row(i)) {
                *acc += v;
            }
        }
        for v in &mut m {
            *v /= r as f64;
        }
        let value = Tensor::new(&[1, c], m)?;
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g| {
                let inv = 1.0 / r as f64;
                Ok(vec![Tensor::from_fn(&[r, c], |i| g.data()[i % c] * inv)])
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a],
            Box::new(move |g| Ok(vec![Tensor::full(&shape, g.data()[0])])),
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits[N, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for [{n}x{c}]", targets.len()),
            ));
        }
        let probs = kernels::softmax_rows(self.value(logits))?;
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| probs.data()[i * c + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g| {
                let scale = g.data()[0] / n as f64;
                let mut out = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    out.data_mut()[i * c + t] -= 1.0;
                }
                Ok(vec![out.scale(scale)])
            }),
        ))
    }
}
