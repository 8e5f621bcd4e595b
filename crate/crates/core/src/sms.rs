//! Self-mining sampler: compresses a token grid by letting its own
//! `S x S`-average-pooled tokens attend back over the full grid.
//!
//! ```text
//! Q0 = pool(P)
//! Q1 = Q0 + CrossAttn(LN_q(Q0), LN_kv(P))
//! Q2 = Q1 + FFN(LN_ffn(Q1))
//! out = LN_out(Q2)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{join, ParamTree, TensorParams};
use crate::numerics::{
    attention_probs, kernels, AttentionWeights, Graph, LayerNormWeights, LinearWeights, Tensor, Var,
};
use crate::slice_restore::FeatureMap;

pub const FFN_RATIO: usize = 4;

#[derive(Clone, Debug)]
pub struct SmsWeights<T = Tensor> {
    /// Pooling kernel `S`.
    pub pool: usize,
    pub q_norm: LayerNormWeights<T>,
    pub kv_norm: LayerNormWeights<T>,
    pub cross: AttentionWeights<T>,
    pub ffn_norm: LayerNormWeights<T>,
    pub ffn1: LinearWeights<T>,
    pub ffn2: LinearWeights<T>,
    pub out_norm: LayerNormWeights<T>,
}

impl<T> ParamTree<T> for SmsWeights<T> {
    type With<U> = SmsWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<SmsWeights<U>, E> {
        Ok(SmsWeights {
            pool: self.pool,
            q_norm: self.q_norm.try_map(&join(prefix, "q_norm"), f)?,
            kv_norm: self.kv_norm.try_map(&join(prefix, "kv_norm"), f)?,
            cross: self.cross.try_map(&join(prefix, "cross"), f)?,
            ffn_norm: self.ffn_norm.try_map(&join(prefix, "ffn_norm"), f)?,
            ffn1: self.ffn1.try_map(&join(prefix, "ffn1"), f)?,
            ffn2: self.ffn2.try_map(&join(prefix, "ffn2"), f)?,
            out_norm: self.out_norm.try_map(&join(prefix, "out_norm"), f)?,
        })
    }
}

impl SmsWeights {
    /// Gaussian projections, identity norms.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        pool: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if pool == 0 {
            return Err(Error::Config("pool kernel must be positive".into()));
        }
        Ok(Self {
            pool,
            q_norm: LayerNormWeights::identity(dim),
            kv_norm: LayerNormWeights::identity(dim),
            cross: AttentionWeights::init(dim, heads, false, std, rng)?,
            ffn_norm: LayerNormWeights::identity(dim),
            ffn1: LinearWeights::init(dim, FFN_RATIO * dim, std, rng),
            ffn2: LinearWeights::init(FFN_RATIO * dim, dim, std, rng),
            out_norm: LayerNormWeights::identity(dim),
        })
    }

    pub fn output_tokens(&self, spatial: (usize, usize)) -> Result<usize> {
        check_pool(spatial, self.pool)?;
        Ok((spatial.0 / self.pool) * (spatial.1 / self.pool))
    }
}

fn check_pool(spatial: (usize, usize), s: usize) -> Result<()> {
    if s == 0 || !spatial.0.is_multiple_of(s) || !spatial.1.is_multiple_of(s) {
        return Err(Error::Precondition(format!(
            "pool kernel {s} does not divide the {}x{} token grid",
            spatial.0, spatial.1
        )));
    }
    Ok(())
}

impl SmsWeights<Var> {
    pub fn pool_queries(&self, g: &mut Graph, tokens: Var, spatial: (usize, usize)) -> Result<Var> {
        check_pool(spatial, self.pool)?;
        let d = g.value(tokens).dims2("pool_queries")?.1;
        let map = g.reshape(tokens, &[spatial.0, spatial.1, d])?;
        let pooled = g.avg_pool2d(map, self.pool)?;
        let l = (spatial.0 / self.pool) * (spatial.1 / self.pool);
        g.reshape(pooled, &[l, d])
    }

    pub fn forward(&self, g: &mut Graph, tokens: Var, spatial: (usize, usize)) -> Result<Var> {
        let q0 = self.pool_queries(g, tokens, spatial)?;
        let qn = self.q_norm.forward(g, q0)?;
        let kvn = self.kv_norm.forward(g, tokens)?;
        let attended = self.cross.cross_attention(g, qn, kvn)?;
        let q1 = g.add(q0, attended)?;
        let h = self.ffn_norm.forward(g, q1)?;
        let h = self.ffn1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ffn2.forward(g, h)?;
        let q2 = g.add(q1, h)?;
        self.out_norm.forward(g, q2)
    }
}

/// Average-pools the token grid; the result keeps its `(H/S, W/S)` grid shape.
pub fn pool_queries(p: &FeatureMap, s: usize) -> Result<FeatureMap> {
    check_pool(p.spatial, s)?;
    let pooled = kernels::avg_pool2d(&p.as_map(), s)?;
    let spatial = (p.spatial.0 / s, p.spatial.1 / s);
    FeatureMap::new(pooled.reshape(&[spatial.0 * spatial.1, p.dim()])?, spatial)
}

pub fn sms_forward(p: &FeatureMap, w: &SmsWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.leaf(p.tokens.clone());
    let wv = w.bind(&mut g, "sms");
    let out = wv.forward(&mut g, t, p.spatial)?;
    Ok(g.value(out).clone())
}

/// Per-head cross-attention probabilities `[Lq, L]` of the sampler on `p`.
pub fn sampler_attention(p: &FeatureMap, w: &SmsWeights) -> Result<Vec<Tensor>> {
    let q0 = pool_queries(p, w.pool)?;
    let qn = kernels::layer_norm(
        &q0.tokens,
        &w.q_norm.gamma,
        &w.q_norm.beta,
        crate::numerics::params::LN_EPS,
    )?;
    let kvn = kernels::layer_norm(
        &p.tokens,
        &w.kv_norm.gamma,
        &w.kv_norm.beta,
        crate::numerics::params::LN_EPS,
    )?;
    attention_probs(&qn, &kvn, &w.cross, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_identity_and_counts() {
        let p = FeatureMap::new(Tensor::from_fn(&[16 * 16, 2], |i| i as f64), (16, 16)).unwrap();
        assert_eq!(pool_queries(&p, 1).unwrap(), p);
        assert_eq!(pool_queries(&p, 2).unwrap().len(), 64);
        let p24 = FeatureMap::new(Tensor::zeros(&[24 * 24, 1]), (24, 24)).unwrap();
        assert_eq!(pool_queries(&p24, 3).unwrap().len(), 64);
        assert!(pool_queries(&p24, 5).is_err());
    }

    #[test]
    fn single_query_attends_over_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = SmsWeights::init(8, 2, 2, 0.5, &mut rng).unwrap();
        let p = FeatureMap::new(Tensor::randn(&[4, 8], 1.0, &mut rng), (2, 2)).unwrap();
        assert_eq!(sms_forward(&p, &w).unwrap().shape(), &[1, 8]);
        for probs in sampler_attention(&p, &w).unwrap() {
            assert_eq!(probs.shape(), &[1, 4]);
            assert!((probs.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_gives_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = SmsWeights::init(8, 2, 2, 0.5, &mut rng).unwrap();
        let tok: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let p = FeatureMap::new(Tensor::from_fn(&[16, 8], |i| tok[i % 8]), (4, 4)).unwrap();
        let out = sms_forward(&p, &w).unwrap();
        assert_eq!(out.shape(), &[4, 8]);
        for i in 1..4 {
            for (a, b) in out.row(i).iter().zip(out.row(0)) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }
}
