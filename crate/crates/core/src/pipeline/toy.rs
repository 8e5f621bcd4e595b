//! Toy predictor for the benchmark: a linear head over mean-pooled assembled
//! tokens, trained by full-batch gradient descent on identification items.
//!
//! The encoder stays frozen, so everything before the first adapter layer is
//! computed once per image. Two variants are trained from the same start:
//! with adapters active, and with adapters removed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PipelineConfig, PipelineWeights};
use crate::assembler::SeparatorSet;
use crate::entitygrid::corpus::{load_corpus, render_item};
use crate::entitygrid::eval::{evaluate, probe_positions, EvalReport};
use crate::entitygrid::qa::{QAItem, Task, OPTION_LABELS};
use crate::error::{Error, Result};
use crate::numerics::params::{join, ParamTree, TensorParams};
use crate::numerics::{Graph, LinearWeights, Tensor, Var};
use crate::slice_restore::{FeatureMap, SraWeights};
use crate::slicer::{slice_image, GridSpec};
use crate::sms::SmsWeights;
use crate::vit::{encoder_forward, patch_embed, VitWeights};

const MAX_HALVINGS: usize = 30;

/// Linear classifier over the label vocabulary of the identification task.
#[derive(Clone, Debug)]
pub struct ToyHeadWeights<T = Tensor> {
    pub labels: Vec<String>,
    pub linear: LinearWeights<T>,
}

impl<T> ParamTree<T> for ToyHeadWeights<T> {
    type With<U> = ToyHeadWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<ToyHeadWeights<U>, E> {
        Ok(ToyHeadWeights {
            labels: self.labels.clone(),
            linear: self.linear.try_map(&join(prefix, "linear"), f)?,
        })
    }
}

impl ToyHeadWeights {
    /// Zero weights, so an untrained head scores every option equally.
    pub fn zeros(dim: usize, labels: Vec<String>) -> Self {
        let c = labels.len();
        Self {
            labels,
            linear: LinearWeights {
                weight: Tensor::zeros(&[dim, c]),
                bias: Tensor::zeros(&[c]),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Initial step size; halved whenever a step would raise the loss.
    pub lr: f64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            seed: 0,
            lr: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training loss before each epoch's step, plus the final loss.
    pub loss: Vec<f64>,
    pub final_lr: f64,
    pub halvings: usize,
}

impl TrainLog {
    pub fn decreased(&self) -> bool {
        matches!((self.loss.first(), self.loss.last()), (Some(a), Some(b)) if b < a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub with_sra: EvalReport,
    pub zero_sra: EvalReport,
    pub with_sra_training: TrainLog,
    pub zero_sra_training: TrainLog,
    pub train_items: usize,
    pub eval_items: usize,
    /// Size of the label vocabulary the head classifies over.
    pub classes: usize,
    /// Whether the adapter variant's D1 is at least the baseline's; recorded, not enforced.
    pub direction_holds: Option<bool>,
    pub options: ToyOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Variant {
    WithSra,
    ZeroSra,
}

#[derive(Clone, Debug)]
struct ToyParams<T = Tensor> {
    adapters: BTreeMap<usize, SraWeights<T>>,
    sms: SmsWeights<T>,
    seps: SeparatorSet<T>,
    head: ToyHeadWeights<T>,
}

impl<T> ParamTree<T> for ToyParams<T> {
    type With<U> = ToyParams<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<ToyParams<U>, E> {
        Ok(ToyParams {
            adapters: self.adapters.try_map(&join(prefix, "adapters"), f)?,
            sms: self.sms.try_map(&join(prefix, "sms"), f)?,
            seps: self.seps.try_map(&join(prefix, "seps"), f)?,
            head: self.head.try_map(&join(prefix, "head"), f)?,
        })
    }
}

/// Frozen encoder work for one image.
struct Sample {
    grid: GridSpec,
    spatial: (usize, usize),
    lowres: Tensor,
    /// Slice tokens entering the first adapter layer.
    mid: Vec<Tensor>,
    /// Slice tokens after the full encoder without adapters.
    plain: Vec<Tensor>,
    target: usize,
}

fn run_layers(
    vit: &VitWeights,
    xs: &[Tensor],
    grid: &GridSpec,
    spatial: (usize, usize),
    layers: std::ops::Range<usize>,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
    let wv = vit.map("", &mut |_, t| g.leaf(t.clone()));
    let outs = wv.layers_forward(&mut g, vars, grid, spatial, &BTreeMap::new(), layers)?;
    Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
}

fn prepare(
    item: &QAItem,
    r: usize,
    cfg: &PipelineConfig,
    w: &PipelineWeights,
    labels: &[String],
    first_adapter: usize,
) -> Result<Sample> {
    let answer = item
        .answer_text()
        .ok_or_else(|| Error::Precondition(format!("{}: bad answer", item.image_id)))?;
    let target = labels.iter().position(|l| l == answer).ok_or_else(|| {
        Error::Precondition(format!(
            "{}: answer {answer:?} not in vocabulary",
            item.image_id
        ))
    })?;
    let img = render_item(item, r)?;
    let sliced = slice_image(&img, cfg.base(), cfg.max_slices)?;
    let low = patch_embed(&sliced.lowres, &cfg.vit, &w.vit)?;
    let lowres = encoder_forward(&[low], &GridSpec::fixed(cfg.base(), 1, 1), &w.vit, None)?
        .remove(0)
        .tokens;
    let embedded: Vec<FeatureMap> = sliced
        .slices
        .iter()
        .map(|s| patch_embed(s, &cfg.vit, &w.vit))
        .collect::<Result<_>>()?;
    let spatial = embedded[0].spatial;
    let tokens: Vec<Tensor> = embedded.into_iter().map(|f| f.tokens).collect();
    let depth = w.vit.layers.len();
    let mid = run_layers(&w.vit, &tokens, &sliced.grid, spatial, 0..first_adapter)?;
    let plain = run_layers(&w.vit, &mid, &sliced.grid, spatial, first_adapter..depth)?;
    Ok(Sample {
        grid: sliced.grid,
        spatial,
        lowres,
        mid,
        plain,
        target,
    })
}

struct Model<'a> {
    cfg: &'a PipelineConfig,
    vit: &'a VitWeights,
    first_adapter: usize,
    variant: Variant,
}

impl Model<'_> {
    /// Logits `[1, C]` for one sample, recorded on `g`.
    fn logits(&self, g: &mut Graph, p: &ToyParams<Var>, s: &Sample) -> Result<Var> {
        let slices: Vec<Var> = match self.variant {
            Variant::ZeroSra => s.plain.iter().map(|t| g.leaf(t.clone())).collect(),
            Variant::WithSra => {
                let xs = s.mid.iter().map(|t| g.leaf(t.clone())).collect();
                let wv = self.vit.map("", &mut |_, t| g.leaf(t.clone()));
                wv.layers_forward(
                    g,
                    xs,
                    &s.grid,
                    s.spatial,
                    &p.adapters,
                    self.first_adapter..self.vit.layers.len(),
                )?
            }
        };
        let low = g.leaf(s.lowres.clone());
        let low = p.sms.forward(g, low, s.spatial)?;
        let sampled = slices
            .into_iter()
            .map(|x| p.sms.forward(g, x, s.spatial))
            .collect::<Result<Vec<_>>>()?;
        let (seq, _) = p
            .seps
            .assemble(g, low, &sampled, &s.grid, self.cfg.use_separators)?;
        let pooled = g.mean_rows(seq)?;
        p.head.linear.forward(g, pooled)
    }

    fn loss_and_grads(
        &self,
        params: &ToyParams,
        samples: &[Sample],
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let per: Vec<(f64, BTreeMap<String, Tensor>)> = samples
            .par_iter()
            .map(|s| {
                let mut g = Graph::new();
                let p = params.bind(&mut g, "");
                let logits = self.logits(&mut g, &p, s)?;
                let loss = g.softmax_cross_entropy(logits, &[s.target])?;
                let grads = g.backward(loss)?;
                Ok((g.value(loss).data()[0], grads.named()))
            })
            .collect::<Result<_>>()?;
        let n = samples.len() as f64;
        let mut total = 0.0;
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        for (l, grads) in per {
            total += l;
            for (name, gr) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.accumulate(&gr)?,
                    None => {
                        sum.insert(name, gr);
                    }
                }
            }
        }
        let avg = sum
            .into_iter()
            .map(|(k, v)| (k, v.scale(1.0 / n)))
            .collect();
        Ok((total / n, avg))
    }

    fn predict(
        &self,
        params: &ToyParams,
        samples: &[Sample],
        items: &[&QAItem],
    ) -> Result<BTreeMap<String, String>> {
        let logits: Vec<Tensor> = samples
            .par_iter()
            .map(|s| {
                let mut g = Graph::new();
                let p = params.bind(&mut g, "");
                let l = self.logits(&mut g, &p, s)?;
                Ok(g.value(l).clone())
            })
            .collect::<Result<_>>()?;
        let labels = &params.head.labels;
        Ok(items
            .iter()
            .zip(logits)
            .map(|(item, l)| {
                let score = |o: &String| {
                    labels
                        .iter()
                        .position(|x| x == o)
                        .map_or(f64::NEG_INFINITY, |i| l.data()[i])
                };
                let mut best = 0;
                for (i, o) in item.options.iter().enumerate() {
                    if score(o) > score(&item.options[best]) {
                        best = i;
                    }
                }
                (item.image_id.clone(), OPTION_LABELS[best].to_string())
            })
            .collect())
    }

    fn train(
        &self,
        mut params: ToyParams,
        samples: &[Sample],
        opts: &ToyOptions,
    ) -> Result<(ToyParams, TrainLog)> {
        let name = match self.variant {
            Variant::WithSra => "with-adapter",
            Variant::ZeroSra => "zero-adapter",
        };
        let check = |loss: f64, epoch: usize, lr: f64| {
            if loss.is_finite() {
                Ok(())
            } else {
                Err(Error::Divergence(format!(
                    "{name} loss {loss} at epoch {epoch} with step {lr}"
                )))
            }
        };
        let (mut loss, mut grads) = self.loss_and_grads(&params, samples)?;
        check(loss, 0, opts.lr)?;
        let mut log = TrainLog {
            loss: vec![loss],
            final_lr: opts.lr,
            halvings: 0,
        };
        let mut lr = opts.lr;
        'epochs: for epoch in 1..=opts.epochs {
            for _ in 0..=MAX_HALVINGS {
                let cand = params.sgd_step("", &grads, lr, &|_| true)?;
                let (cl, cg) = self.loss_and_grads(&cand, samples)?;
                if cl.is_finite() && cl <= loss {
                    (params, loss, grads) = (cand, cl, cg);
                    log.loss.push(loss);
                    continue 'epochs;
                }
                lr /= 2.0;
                log.halvings += 1;
            }
            check(loss, epoch, lr)?;
            // no step size decreases the loss any further
            break;
        }
        log.final_lr = lr;
        Ok((params, log))
    }
}

/// Splits by probe position: alternate items per position are held out,
/// unless some position would be left without training or evaluation items.
fn split<'a>(items: &[&'a QAItem]) -> (Vec<&'a QAItem>, Vec<&'a QAItem>) {
    let mut by_pos: BTreeMap<u8, Vec<&QAItem>> = BTreeMap::new();
    for &i in items {
        by_pos.entry(i.probe_position).or_default().push(i);
    }
    if by_pos.len() < 9 || by_pos.values().any(|v| v.len() < 2) {
        return (items.to_vec(), items.to_vec());
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for v in by_pos.values() {
        for (k, &i) in v.iter().enumerate() {
            if k % 2 == 0 {
                train.push(i);
            } else {
                held.push(i);
            }
        }
    }
    (train, held)
}

/// Trains and evaluates both variants on the identification items of a corpus rendered at base `r`.
pub fn toy_train_eval(
    items: &[QAItem],
    r: usize,
    cfg: &PipelineConfig,
    opts: &ToyOptions,
) -> Result<ToyReport> {
    cfg.validate()?;
    if cfg.base() != r {
        return Err(Error::Config(format!(
            "pipeline base {} differs from corpus base {r}",
            cfg.base()
        )));
    }
    let ident: Vec<&QAItem> = items
        .iter()
        .filter(|i| i.task == Task::Identification)
        .collect();
    if ident.is_empty() {
        return Err(Error::Precondition(
            "corpus has no identification items".into(),
        ));
    }
    let labels: Vec<String> = ident
        .iter()
        .flat_map(|i| i.options.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (train, held) = split(&ident);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weights = PipelineWeights::init(cfg, rand::Rng::random(&mut rng))?;
    let depth = weights.vit.layers.len();
    let first_adapter = weights.adapters.keys().next().copied().unwrap_or(depth);
    let prep = |set: &[&QAItem]| -> Result<Vec<Sample>> {
        set.par_iter()
            .map(|i| prepare(i, r, cfg, &weights, &labels, first_adapter))
            .collect()
    };
    let train_s = prep(&train)?;
    let held_s = prep(&held)?;
    let start = ToyParams {
        adapters: weights.adapters.clone(),
        sms: weights.sms.clone(),
        seps: weights.seps.clone(),
        head: ToyHeadWeights::zeros(cfg.vit.dim, labels.clone()),
    };

    let run = |variant| -> Result<(EvalReport, TrainLog)> {
        let mut params = start.clone();
        if variant == Variant::ZeroSra {
            params.adapters.clear();
        }
        let model = Model {
            cfg,
            vit: &weights.vit,
            first_adapter,
            variant,
        };
        let (trained, log) = model.train(params, &train_s, opts)?;
        let preds = model.predict(&trained, &held_s, &held)?;
        let owned: Vec<QAItem> = held.iter().map(|&i| i.clone()).collect();
        Ok((evaluate(&preds, &owned, &probe_positions(&owned))?, log))
    };
    let (with_sra, with_log) = run(Variant::WithSra)?;
    let (zero_sra, zero_log) = run(Variant::ZeroSra)?;
    let direction_holds = with_sra.d1.zip(zero_sra.d1).map(|(a, b)| a >= b);
    Ok(ToyReport {
        with_sra,
        zero_sra,
        with_sra_training: with_log,
        zero_sra_training: zero_log,
        train_items: train.len(),
        eval_items: held.len(),
        classes: labels.len(),
        direction_holds,
        options: *opts,
    })
}

/// [`toy_train_eval`] on a corpus directory with the toy configuration at the corpus base.
pub fn toy_run_dir(corpus: &Path, opts: &ToyOptions) -> Result<ToyReport> {
    let (manifest, items) = load_corpus(corpus)?;
    let r = manifest.config.r;
    toy_train_eval(&items, r, &PipelineConfig::toy(r)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entitygrid::corpus::{generate_items, CorpusConfig};
    use crate::entitygrid::eval::constant_oracle;

    fn corpus(per_cell: usize) -> Vec<QAItem> {
        let cfg = CorpusConfig {
            tasks: vec![Task::Identification],
            ..CorpusConfig::new(28, per_cell, 3)
        };
        generate_items(&cfg).unwrap()
    }

    #[test]
    fn untrained_is_constant_choice() {
        let items = corpus(2);
        let opts = ToyOptions {
            epochs: 0,
            ..ToyOptions::default()
        };
        let rep = toy_train_eval(&items, 28, &PipelineConfig::toy(28).unwrap(), &opts).unwrap();
        assert_eq!(rep.with_sra, rep.zero_sra);
        assert_eq!(rep.with_sra_training.loss.len(), 1);
        assert!((rep.with_sra_training.loss[0] - (rep.classes as f64).ln()).abs() < 1e-12);
        let refs: Vec<&QAItem> = items.iter().collect();
        let held: Vec<QAItem> = split(&refs).1.into_iter().cloned().collect();
        let constant = evaluate(&constant_oracle(&held), &held, &probe_positions(&held)).unwrap();
        assert_eq!(rep.with_sra, constant);
    }

    #[test]
    fn loss_is_monotone() {
        let items = corpus(2);
        let few: Vec<QAItem> = items.into_iter().take(10).collect();
        let opts = ToyOptions {
            epochs: 8,
            seed: 4,
            lr: 2.0,
        };
        let rep = toy_train_eval(&few, 28, &PipelineConfig::toy(28).unwrap(), &opts).unwrap();
        let l = &rep.with_sra_training.loss;
        assert!(l.windows(2).all(|w| w[1] <= w[0]), "{l:?}");
        assert!(rep.with_sra_training.decreased());
    }
}
