//! The slice-restoring adapter: merge per-slice token grids into the
//! whole-image map, fuse it locally (3x3 depthwise conv) and globally
//! (downsample, rotary self-attention, upsample), then cut it back into slices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{join, ParamTree, TensorParams};
use crate::numerics::{grid_coords, AttentionWeights, Graph, LayerNormWeights, Tensor, Var};
use crate::slicer::GridSpec;

/// Tokens `[L, D]` with their `(H_t, W_t)` grid shape, `L = H_t * W_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tokens: Tensor,
    pub spatial: (usize, usize),
}

impl FeatureMap {
    pub fn new(tokens: Tensor, spatial: (usize, usize)) -> Result<Self> {
        let (l, _) = tokens.dims2("feature map")?;
        if spatial.0 * spatial.1 != l {
            return Err(Error::shape(
                "feature map",
                format!("{l} tokens for a {}x{} grid", spatial.0, spatial.1),
            ));
        }
        Ok(Self { tokens, spatial })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// The same data viewed as `[H_t, W_t, D]`.
    pub fn as_map(&self) -> Tensor {
        self.tokens
            .clone()
            .reshape(&[self.spatial.0, self.spatial.1, self.dim()])
            .expect("consistent feature map")
    }
}

#[derive(Clone, Debug)]
pub struct SraWeights<T = Tensor> {
    /// `[3, 3, D]` depthwise kernel of the local path.
    pub dw_kernel: T,
    /// Layer norm in front of the global attention.
    pub norm: LayerNormWeights<T>,
    /// Global-path attention; rotary by default.
    pub attn: AttentionWeights<T>,
    /// Spatial downsampling ratio of the global path.
    pub down_factor: usize,
}

impl<T> ParamTree<T> for SraWeights<T> {
    type With<U> = SraWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<SraWeights<U>, E> {
        Ok(SraWeights {
            dw_kernel: f(&join(prefix, "dw_kernel"), &self.dw_kernel)?,
            norm: self.norm.try_map(&join(prefix, "norm"), f)?,
            attn: self.attn.try_map(&join(prefix, "attn"), f)?,
            down_factor: self.down_factor,
        })
    }
}

pub const DEFAULT_DOWN_FACTOR: usize = 2;

impl SraWeights {
    /// Adapter that starts as an exact no-op: zero depthwise kernel, norm and
    /// Q/K/V copied from the host layer, zero output projection.
    pub fn from_host(
        norm: &LayerNormWeights,
        host: &AttentionWeights,
        down_factor: usize,
    ) -> Result<Self> {
        let d = host.dim();
        let w = Self {
            dw_kernel: Tensor::zeros(&[3, 3, d]),
            norm: norm.clone(),
            attn: AttentionWeights {
                wq: host.wq.clone(),
                wk: host.wk.clone(),
                wv: host.wv.clone(),
                wo: Tensor::zeros(&[d, d]),
                heads: host.heads,
                use_rope2d: true,
            },
            down_factor,
        };
        w.validate()?;
        Ok(w)
    }

    /// Fully random adapter (both paths active).
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        down_factor: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Self {
            dw_kernel: Tensor::randn(&[3, 3, dim], std, rng),
            norm: LayerNormWeights {
                gamma: Tensor::uniform(&[dim], 0.5, 1.5, rng),
                beta: Tensor::randn(&[dim], 0.1, rng),
            },
            attn: AttentionWeights::init(dim, heads, true, std, rng)?,
            down_factor,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let d = self.attn.dim();
        if self.dw_kernel.shape() != [3, 3, d] {
            return Err(Error::shape(
                "sra",
                format!("dw_kernel {:?} for dim {d}", self.dw_kernel.shape()),
            ));
        }
        if self.down_factor == 0 {
            return Err(Error::Config("down_factor must be positive".into()));
        }
        Ok(())
    }

    /// Zeroes both output paths so the adapter contributes exactly nothing.
    pub fn zeroed_outputs(&self) -> Self {
        let mut w = self.clone();
        w.dw_kernel = Tensor::zeros(self.dw_kernel.shape());
        w.attn.wo = Tensor::zeros(self.attn.wo.shape());
        w
    }
}

fn check_slices(
    spatials: impl Iterator<Item = (usize, usize)>,
    count: usize,
    grid: &GridSpec,
) -> Result<(usize, usize)> {
    if count != grid.slice_count() || count == 0 {
        return Err(Error::shape(
            "merge",
            format!("{count} slices for a {}x{} grid", grid.m, grid.n),
        ));
    }
    let mut first = None;
    for s in spatials {
        match first {
            None => first = Some(s),
            Some(f) if f != s => {
                return Err(Error::shape(
                    "merge",
                    format!("slice grids {f:?} and {s:?} differ"),
                ))
            }
            _ => {}
        }
    }
    Ok(first.unwrap())
}

/// For each row-major position of the `m*H_t x n*W_t` whole map, the row of
/// the slice-concatenated token matrix that lands there.
pub fn merge_index(grid: &GridSpec, spatial: (usize, usize)) -> Vec<usize> {
    let (ht, wt) = spatial;
    let (rows, cols) = (grid.m * ht, grid.n * wt);
    let mut index = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        for x in 0..cols {
            let k = (y / ht) * grid.n + x / wt;
            index.push(k * ht * wt + (y % ht) * wt + x % wt);
        }
    }
    index
}

/// The inverse permutation of [`merge_index`].
pub fn reslice_index(grid: &GridSpec, spatial: (usize, usize)) -> Vec<usize> {
    let fwd = merge_index(grid, spatial);
    let mut inv = vec![0; fwd.len()];
    for (pos, &src) in fwd.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

/// Places slice `k = row * n + col` at block `(row, col)` of a `[m*H_t, n*W_t, D]` map.
pub fn merge(slices: &[FeatureMap], grid: &GridSpec) -> Result<Tensor> {
    let spatial = check_slices(slices.iter().map(|s| s.spatial), slices.len(), grid)?;
    let d = slices[0].dim();
    if slices.iter().any(|s| s.dim() != d) {
        return Err(Error::shape("merge", "slices disagree on feature width"));
    }
    let stacked: Vec<&[f64]> = slices
        .iter()
        .flat_map(|s| (0..s.len()).map(move |i| s.tokens.row(i)))
        .collect();
    let mut data = Vec::with_capacity(stacked.len() * d);
    for src in merge_index(grid, spatial) {
        data.extend_from_slice(stacked[src]);
    }
    Tensor::new(&[grid.m * spatial.0, grid.n * spatial.1, d], data)
}

/// Cuts a whole map back into row-major slices of `spatial` tokens.
pub fn reslice(
    whole: &Tensor,
    grid: &GridSpec,
    spatial: (usize, usize),
) -> Result<Vec<FeatureMap>> {
    let (h, w, d) = whole.dims3("reslice")?;
    if h != grid.m * spatial.0 || w != grid.n * spatial.1 {
        return Err(Error::shape(
            "reslice",
            format!(
                "{h}x{w} map for {}x{} slices of {:?}",
                grid.m, grid.n, spatial
            ),
        ));
    }
    let l = spatial.0 * spatial.1;
    let inv = reslice_index(grid, spatial);
    inv.chunks(l)
        .map(|idx| {
            let mut data = Vec::with_capacity(l * d);
            for &pos in idx {
                data.extend_from_slice(&whole.data()[pos * d..(pos + 1) * d]);
            }
            FeatureMap::new(Tensor::new(&[l, d], data)?, spatial)
        })
        .collect()
}

impl SraWeights<Var> {
    /// `Up(SelfAttn(LN(Down(F))))` on a `[H, W, D]` map.
    pub fn global_fuse(&self, g: &mut Graph, map: Var) -> Result<Var> {
        let (h, w, d) = g.value(map).dims3("global_fuse")?;
        let f = self.down_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Precondition(format!(
                "down_factor {f} does not divide the {h}x{w} map"
            )));
        }
        let (h2, w2) = (h / f, w / f);
        let down = g.resize_bilinear(map, h2, w2)?;
        let tokens = g.reshape(down, &[h2 * w2, d])?;
        let normed = self.norm.forward(g, tokens)?;
        let coords = grid_coords(h2, w2);
        let attended = self.attn.self_attention(g, normed, Some(&coords))?;
        let small = g.reshape(attended, &[h2, w2, d])?;
        g.resize_bilinear(small, h, w)
    }

    pub fn local_fuse(&self, g: &mut Graph, map: Var) -> Result<Var> {
        g.depthwise_conv3x3(map, self.dw_kernel)
    }

    /// Local plus global fusion of the whole map.
    pub fn capture(&self, g: &mut Graph, map: Var) -> Result<Var> {
        let local = self.local_fuse(g, map)?;
        let global = self.global_fuse(g, map)?;
        g.add(local, global)
    }

    /// Merge, capture and reslice the `[L, D]` token matrices of all slices.
    pub fn forward(
        &self,
        g: &mut Graph,
        slices: &[Var],
        grid: &GridSpec,
        spatial: (usize, usize),
    ) -> Result<Vec<Var>> {
        let shapes: Vec<_> = slices
            .iter()
            .map(|&s| g.value(s).dims2("sra"))
            .collect::<Result<_>>()?;
        if shapes.iter().any(|&(l, _)| l != spatial.0 * spatial.1) {
            return Err(Error::shape(
                "sra",
                format!("slice token counts {shapes:?} for grid {spatial:?}"),
            ));
        }
        check_slices(
            std::iter::repeat_n(spatial, slices.len()),
            slices.len(),
            grid,
        )?;
        let d = shapes[0].1;
        let stacked = if slices.len() == 1 {
            slices[0]
        } else {
            g.concat_rows(slices)?
        };
        let whole = g.gather_rows(stacked, &merge_index(grid, spatial))?;
        let map = g.reshape(whole, &[grid.m * spatial.0, grid.n * spatial.1, d])?;
        let fused = self.capture(g, map)?;
        let flat = g.reshape(fused, &[grid.slice_count() * spatial.0 * spatial.1, d])?;
        let back = g.gather_rows(flat, &reslice_index(grid, spatial))?;
        let l = spatial.0 * spatial.1;
        (0..slices.len())
            .map(|k| g.rows(back, k * l, (k + 1) * l))
            .collect()
    }
}

fn eval_map(
    w: &SraWeights,
    map: &Tensor,
    f: impl Fn(&SraWeights<Var>, &mut Graph, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = g.leaf(map.clone());
    let wv = w.bind(&mut g, "sra");
    let out = f(&wv, &mut g, m)?;
    Ok(g.value(out).clone())
}

pub fn local_fuse(map: &Tensor, w: &SraWeights) -> Result<Tensor> {
    crate::numerics::depthwise_conv3x3(map, &w.dw_kernel)
}

pub fn global_fuse(map: &Tensor, w: &SraWeights) -> Result<Tensor> {
    eval_map(w, map, |wv, g, m| wv.global_fuse(g, m))
}

pub fn capture(map: &Tensor, w: &SraWeights) -> Result<Tensor> {
    eval_map(w, map, |wv, g, m| wv.capture(g, m))
}

/// `reslice(capture(merge(slices)))`.
pub fn sra_forward(
    slices: &[FeatureMap],
    grid: &GridSpec,
    w: &SraWeights,
) -> Result<Vec<FeatureMap>> {
    let spatial = check_slices(slices.iter().map(|s| s.spatial), slices.len(), grid)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = slices.iter().map(|s| g.leaf(s.tokens.clone())).collect();
    let wv = w.bind(&mut g, "sra");
    let outs = wv.forward(&mut g, &vars, grid, spatial)?;
    outs.into_iter()
        .map(|v| FeatureMap::new(g.value(v).clone(), spatial))
        .collect()
}
