use rand::Rng;

use crate::error::{Error, Result};

use super::kernels::{self, ROPE_BASE};
use super::params::{join, ParamTree};
use super::{Graph, Tensor, Var};

/// Bias-free multi-head attention projections, each `[D, D]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T = Tensor> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub heads: usize,
    pub use_rope2d: bool,
}

impl<T> ParamTree<T> for AttentionWeights<T> {
    type With<U> = AttentionWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<AttentionWeights<U>, E> {
        Ok(AttentionWeights {
            wq: f(&join(prefix, "wq"), &self.wq)?,
            wk: f(&join(prefix, "wk"), &self.wk)?,
            wv: f(&join(prefix, "wv"), &self.wv)?,
            wo: f(&join(prefix, "wo"), &self.wo)?,
            heads: self.heads,
            use_rope2d: self.use_rope2d,
        })
    }
}

impl AttentionWeights {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        use_rope2d: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Self {
            wq: Tensor::randn(&[dim, dim], std, rng),
            wk: Tensor::randn(&[dim, dim], std, rng),
            wv: Tensor::randn(&[dim, dim], std, rng),
            wo: Tensor::randn(&[dim, dim], std, rng),
            heads,
            use_rope2d,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if t.shape() != [d, d] {
                return Err(Error::shape(
                    "attention",
                    format!("{name} is {:?}, expected [{d}, {d}]", t.shape()),
                ));
            }
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide dim {d}",
                self.heads
            )));
        }
        if self.use_rope2d && !(d / self.heads).is_multiple_of(4) {
            return Err(Error::Config(format!(
                "rope2d needs head dim divisible by 4, got {}",
                d / self.heads
            )));
        }
        Ok(())
    }
}

/// Row-major `(row, col)` coordinates of an `h x w` token grid.
pub fn grid_coords(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect()
}

impl AttentionWeights<Var> {
    /// Self-attention over `x[L, D]`. `coords` is required exactly when RoPE is on.
    pub fn self_attention(
        &self,
        g: &mut Graph,
        x: Var,
        coords: Option<&[(usize, usize)]>,
    ) -> Result<Var> {
        self.attend(g, x, x, coords)
    }

    /// Queries from `q[Lq, D]` attend over `kv[L, D]`. Never rotary.
    pub fn cross_attention(&self, g: &mut Graph, q: Var, kv: Var) -> Result<Var> {
        if self.use_rope2d {
            return Err(Error::Config(
                "cross-attention does not take rotary coordinates".into(),
            ));
        }
        self.attend(g, q, kv, None)
    }

    fn attend(
        &self,
        g: &mut Graph,
        q_in: Var,
        kv_in: Var,
        coords: Option<&[(usize, usize)]>,
    ) -> Result<Var> {
        let d = g.shape(self.wq)[0];
        let (_, dq) = g.value(q_in).dims2("attention")?;
        let (l, dkv) = g.value(kv_in).dims2("attention")?;
        if dq != d || dkv != d {
            return Err(Error::shape(
                "attention",
                format!("inputs of width {dq}/{dkv} for dim {d}"),
            ));
        }
        let coords = match (self.use_rope2d, coords) {
            (true, Some(c)) if c.len() == l => Some(c),
            (true, Some(c)) => {
                return Err(Error::shape(
                    "attention",
                    format!("{} coords for {l} tokens", c.len()),
                ))
            }
            (true, None) => {
                return Err(Error::Config(
                    "rope2d attention needs token coordinates".into(),
                ))
            }
            (false, _) => None,
        };
        let dh = d / self.heads;
        let q = g.matmul(q_in, self.wq)?;
        let k = g.matmul(kv_in, self.wk)?;
        let v = g.matmul(kv_in, self.wv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut qh = g.cols(q, h * dh, (h + 1) * dh)?;
            let mut kh = g.cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.cols(v, h * dh, (h + 1) * dh)?;
            if let Some(c) = coords {
                qh = g.rope2d(qh, c, ROPE_BASE)?;
                kh = g.rope2d(kh, c, ROPE_BASE)?;
            }
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores)?;
            outs.push(g.matmul(probs, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.matmul(joined, self.wo)
    }
}

/// Self-attention on concrete tensors.
pub fn mhsa(x: &Tensor, w: &AttentionWeights, coords: Option<&[(usize, usize)]>) -> Result<Tensor> {
    use super::params::TensorParams;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = w.bind(&mut g, "attn");
    let out = wv.self_attention(&mut g, xv, coords)?;
    Ok(g.value(out).clone())
}

pub fn cross_attention(q: &Tensor, kv: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    use super::params::TensorParams;
    let mut g = Graph::new();
    let (qv, kvv) = (g.leaf(q.clone()), g.leaf(kv.clone()));
    let wv = w.bind(&mut g, "attn");
    let out = wv.cross_attention(&mut g, qv, kvv)?;
    Ok(g.value(out).clone())
}

/// Per-head attention probabilities `[Lq, L]` for queries `q` over `kv`.
pub fn attention_probs(
    q: &Tensor,
    kv: &Tensor,
    w: &AttentionWeights,
    coords: Option<&[(usize, usize)]>,
) -> Result<Vec<Tensor>> {
    let d = w.dim();
    let dh = d / w.heads;
    let qp = kernels::matmul(q, &w.wq)?;
    let kp = kernels::matmul(kv, &w.wk)?;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..w.heads)
        .map(|h| {
            let take = |t: &Tensor| {
                let rows = t.shape()[0];
                Tensor::from_fn(&[rows, dh], |i| t.data()[(i / dh) * d + h * dh + i % dh])
            };
            let (mut qh, mut kh) = (take(&qp), take(&kp));
            if let (true, Some(c)) = (w.use_rope2d, coords) {
                qh = kernels::rope2d(&qh, c, ROPE_BASE)?;
                kh = kernels::rope2d(&kh, c, ROPE_BASE)?;
            }
            let s = kernels::matmul(&qh, &kh.transpose()?)?.scale(scale);
            kernels::softmax_rows(&s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rope_attention_requires_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = AttentionWeights::init(8, 2, true, 0.3, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        assert!(matches!(mhsa(&x, &w, None), Err(Error::Config(_))));
        let c = grid_coords(1, 3);
        assert!(mhsa(&x, &w, Some(&c)).is_ok());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(AttentionWeights::init(6, 4, false, 0.1, &mut rng).is_err());
    }

    #[test]
    fn cross_attention_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = AttentionWeights::init(4, 1, false, 0.3, &mut rng).unwrap();
        let q = Tensor::zeros(&[2, 4]);
        let kv = Tensor::zeros(&[3, 5]);
        assert!(matches!(
            cross_attention(&q, &kv, &w),
            Err(Error::Shape { .. })
        ));
    }
}
