//! A small pre-norm ViT with hook points for slice-restoring adapters.
//!
//! Layer `l` computes, per slice, `x += Attn(LN1(x))`; when `l` carries an
//! adapter it then adds `SRA({LN1(x_j)})_i`, computed jointly over all slices
//! from the same normalized input the attention saw; finally
//! `x += MLP(LN2(x))`.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{join, ParamTree, TensorParams};
use crate::numerics::{AttentionWeights, Graph, LayerNormWeights, LinearWeights, Tensor, Var};
use crate::slice_restore::{FeatureMap, SraWeights};
use crate::slicer::{GridSpec, ImageBuffer};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub adapter_layers: BTreeSet<usize>,
    pub mlp_ratio: f64,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            input_size: 28,
            patch_size: 7,
            dim: 32,
            depth: 4,
            heads: 4,
            adapter_layers: BTreeSet::from([2, 3]),
            mlp_ratio: 4.0,
            channels: 3,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch {} does not divide input {}",
                self.patch_size, self.input_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if let Some(&l) = self.adapter_layers.iter().find(|&&l| l >= self.depth) {
            return Err(Error::Config(format!(
                "adapter layer {l} outside depth {}",
                self.depth
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config(
                "mlp_ratio gives an empty hidden layer".into(),
            ));
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct VitLayer<T = Tensor> {
    pub ln1: LayerNormWeights<T>,
    pub attn: AttentionWeights<T>,
    pub ln2: LayerNormWeights<T>,
    pub fc1: LinearWeights<T>,
    pub fc2: LinearWeights<T>,
}

impl<T> ParamTree<T> for VitLayer<T> {
    type With<U> = VitLayer<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<VitLayer<U>, E> {
        Ok(VitLayer {
            ln1: self.ln1.try_map(&join(prefix, "ln1"), f)?,
            attn: self.attn.try_map(&join(prefix, "attn"), f)?,
            ln2: self.ln2.try_map(&join(prefix, "ln2"), f)?,
            fc1: self.fc1.try_map(&join(prefix, "fc1"), f)?,
            fc2: self.fc2.try_map(&join(prefix, "fc2"), f)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct VitWeights<T = Tensor> {
    pub patch_proj: LinearWeights<T>,
    /// Learned positional embedding `[L, D]`.
    pub pos_embed: T,
    pub layers: Vec<VitLayer<T>>,
}

impl<T> ParamTree<T> for VitWeights<T> {
    type With<U> = VitWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<VitWeights<U>, E> {
        Ok(VitWeights {
            patch_proj: self.patch_proj.try_map(&join(prefix, "patch_proj"), f)?,
            pos_embed: f(&join(prefix, "pos_embed"), &self.pos_embed)?,
            layers: self.layers.try_map(&join(prefix, "layers"), f)?,
        })
    }
}

impl VitWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_std(cfg, INIT_STD, rng)
    }

    /// Gaussian projections with the given std, identity layer norms.
    pub fn init_with_std<R: Rng + ?Sized>(cfg: &VitConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.depth)
            .map(|_| {
                Ok(VitLayer {
                    ln1: LayerNormWeights::identity(d),
                    attn: AttentionWeights::init(d, cfg.heads, false, std, rng)?,
                    ln2: LayerNormWeights::identity(d),
                    fc1: LinearWeights::init(d, cfg.mlp_hidden(), std, rng),
                    fc2: LinearWeights::init(cfg.mlp_hidden(), d, std, rng),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_proj: LinearWeights::init(cfg.patch_dim(), d, std, rng),
            pos_embed: Tensor::randn(&[cfg.tokens(), d], std, rng),
            layers,
        })
    }

    /// Adapters for every configured layer, initialized as exact no-ops from their host layers.
    pub fn default_adapters(
        &self,
        cfg: &VitConfig,
        down_factor: usize,
    ) -> Result<BTreeMap<usize, SraWeights>> {
        cfg.adapter_layers
            .iter()
            .map(|&l| {
                Ok((
                    l,
                    SraWeights::from_host(&self.layers[l].ln1, &self.layers[l].attn, down_factor)?,
                ))
            })
            .collect()
    }
}

/// Flattens non-overlapping `p x p` patches (row, column, channel order) into `[L, p*p*C]`.
pub fn patchify(img: &ImageBuffer, cfg: &VitConfig) -> Result<Tensor> {
    let r = cfg.input_size;
    if img.height() != r || img.width() != r || img.channels() != cfg.channels {
        return Err(Error::shape(
            "patch_embed",
            format!(
                "{}x{}x{} image for input {r}x{r}x{}",
                img.height(),
                img.width(),
                img.channels(),
                cfg.channels
            ),
        ));
    }
    let (p, side, c) = (cfg.patch_size, cfg.grid_side(), cfg.channels);
    let mut data = Vec::with_capacity(r * r * c);
    for py in 0..side {
        for px in 0..side {
            for y in 0..p {
                for x in 0..p {
                    data.extend_from_slice(img.pixel(py * p + y, px * p + x));
                }
            }
        }
    }
    Tensor::new(&[side * side, p * p * c], data)
}

impl VitWeights<Var> {
    pub fn patch_embed(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let x = self.patch_proj.forward(g, patches)?;
        g.add(x, self.pos_embed)
    }

    /// Runs `layers` over every slice. `adapters` may only name layers inside
    /// the range; slices interact only through them.
    pub fn layers_forward(
        &self,
        g: &mut Graph,
        mut xs: Vec<Var>,
        grid: &GridSpec,
        spatial: (usize, usize),
        adapters: &BTreeMap<usize, SraWeights<Var>>,
        layers: Range<usize>,
    ) -> Result<Vec<Var>> {
        for l in layers {
            let layer = &self.layers[l];
            let normed = xs
                .iter()
                .map(|&x| layer.ln1.forward(g, x))
                .collect::<Result<Vec<_>>>()?;
            for (x, &h) in xs.iter_mut().zip(&normed) {
                let a = layer.attn.self_attention(g, h, None)?;
                *x = g.add(*x, a)?;
            }
            if let Some(sra) = adapters.get(&l) {
                let restored = sra.forward(g, &normed, grid, spatial)?;
                for (x, s) in xs.iter_mut().zip(restored) {
                    *x = g.add(*x, s)?;
                }
            }
            for x in xs.iter_mut() {
                let h = layer.ln2.forward(g, *x)?;
                let h = layer.fc1.forward(g, h)?;
                let h = g.gelu(h);
                let h = layer.fc2.forward(g, h)?;
                *x = g.add(*x, h)?;
            }
        }
        Ok(xs)
    }
}

fn check_adapters<T>(adapters: &BTreeMap<usize, T>, depth: usize) -> Result<()> {
    match adapters.keys().find(|&&l| l >= depth) {
        Some(l) => Err(Error::Config(format!(
            "adapter layer {l} outside depth {depth}"
        ))),
        None => Ok(()),
    }
}

pub fn patch_embed(img: &ImageBuffer, cfg: &VitConfig, w: &VitWeights) -> Result<FeatureMap> {
    let patches = patchify(img, cfg)?;
    let mut g = Graph::new();
    let pv = g.leaf(patches);
    let wv = w.bind(&mut g, "vit");
    let out = wv.patch_embed(&mut g, pv)?;
    FeatureMap::new(g.value(out).clone(), (cfg.grid_side(), cfg.grid_side()))
}

/// Encodes patch-embedded slices; `adapters = None` treats every slice independently.
pub fn encoder_forward(
    slices: &[FeatureMap],
    grid: &GridSpec,
    w: &VitWeights,
    adapters: Option<&BTreeMap<usize, SraWeights>>,
) -> Result<Vec<FeatureMap>> {
    let Some(first) = slices.first() else {
        return Err(Error::shape("encoder_forward", "no slices"));
    };
    if let Some(s) = slices
        .iter()
        .find(|s| s.spatial != first.spatial || s.dim() != first.dim())
    {
        return Err(Error::shape(
            "encoder_forward",
            format!("slice grid {:?} vs {:?}", s.spatial, first.spatial),
        ));
    }
    let empty = BTreeMap::new();
    let adapters = adapters.unwrap_or(&empty);
    check_adapters(adapters, w.layers.len())?;
    if !adapters.is_empty() && slices.len() != grid.slice_count() {
        return Err(Error::shape(
            "encoder_forward",
            format!("{} slices for a {}x{} grid", slices.len(), grid.m, grid.n),
        ));
    }
    let mut g = Graph::new();
    let xs: Vec<Var> = slices.iter().map(|s| g.leaf(s.tokens.clone())).collect();
    let wv = w.bind(&mut g, "vit");
    let av = adapters.map("adapters", &mut |n, t| g.param(n, t.clone()));
    let outs = wv.layers_forward(&mut g, xs, grid, first.spatial, &av, 0..w.layers.len())?;
    outs.into_iter()
        .map(|v| FeatureMap::new(g.value(v).clone(), first.spatial))
        .collect()
}
