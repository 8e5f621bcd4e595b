//! Image to assembled visual token sequence.
//!
//! The low-resolution view runs through the plain encoder, the slices through
//! the encoder with restore adapters; every view is then compressed by the
//! shared sampler and the results are joined with separators.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembler::{self, assemble, AssembledSequence, SeparatorSet};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::numerics::params::{join, ParamTree, TensorParams};
use crate::numerics::tnsr::{self, DType};
use crate::numerics::Tensor;
use crate::slice_restore::{FeatureMap, SraWeights, DEFAULT_DOWN_FACTOR};
use crate::slicer::{slice_image, GridSpec, ImageBuffer};
use crate::sms::{sms_forward, SmsWeights};
use crate::vit::{encoder_forward, patch_embed, VitConfig, VitWeights, INIT_STD};

pub mod toy;

pub use toy::{toy_train_eval, ToyHeadWeights, ToyOptions, ToyReport};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub vit: VitConfig,
    /// Cap `M` on the slice count.
    pub max_slices: usize,
    /// Sampler pooling kernel `S`.
    pub sms_pool: usize,
    pub sms_heads: usize,
    pub sra_down_factor: usize,
    pub use_separators: bool,
}

impl PipelineConfig {
    /// Small configuration for base resolution `r`: patch `r/4`, `M = 4`.
    pub fn toy(r: usize) -> Result<Self> {
        if r < 4 || !r.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "toy base resolution {r} must be a positive multiple of 4"
            )));
        }
        let vit = VitConfig {
            input_size: r,
            patch_size: r / 4,
            ..VitConfig::default()
        };
        let cfg = Self {
            vit,
            max_slices: 4,
            sms_pool: 2,
            sms_heads: 4,
            sra_down_factor: DEFAULT_DOWN_FACTOR,
            use_separators: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn base(&self) -> usize {
        self.vit.input_size
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let side = self.vit.grid_side();
        if self.sms_pool == 0 || !side.is_multiple_of(self.sms_pool) {
            return Err(Error::Config(format!(
                "sampler pool {} does not divide token grid {side}",
                self.sms_pool
            )));
        }
        if self.max_slices == 0 {
            return Err(Error::Config("max_slices must be positive".into()));
        }
        if !self.vit.adapter_layers.is_empty()
            && (self.sra_down_factor == 0 || !side.is_multiple_of(self.sra_down_factor))
        {
            return Err(Error::Config(format!(
                "adapter down factor {} does not divide token grid {side}",
                self.sra_down_factor
            )));
        }
        Ok(())
    }

    /// Tokens per view after the sampler.
    pub fn view_tokens(&self) -> usize {
        let s = self.vit.grid_side() / self.sms_pool;
        s * s
    }

    /// Closed-form sequence length for a `height x width` input.
    pub fn sequence_len(&self, height: usize, width: usize) -> Result<usize> {
        let grid = crate::slicer::compute_grid(height, width, self.base(), self.max_slices)?;
        let l = self.view_tokens();
        Ok(assembler::count_tokens(&grid, l, l, self.use_separators))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineWeights<T = Tensor> {
    pub vit: VitWeights<T>,
    pub adapters: BTreeMap<usize, SraWeights<T>>,
    pub sms: SmsWeights<T>,
    pub seps: SeparatorSet<T>,
}

impl<T> ParamTree<T> for PipelineWeights<T> {
    type With<U> = PipelineWeights<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<PipelineWeights<U>, E> {
        Ok(PipelineWeights {
            vit: self.vit.try_map(&join(prefix, "vit"), f)?,
            adapters: self.adapters.try_map(&join(prefix, "adapters"), f)?,
            sms: self.sms.try_map(&join(prefix, "sms"), f)?,
            seps: self.seps.try_map(&join(prefix, "seps"), f)?,
        })
    }
}

impl PipelineWeights {
    /// Random encoder, sampler and separators; adapters start as exact no-ops.
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vit = VitWeights::init(&cfg.vit, &mut rng)?;
        let adapters = vit.default_adapters(&cfg.vit, cfg.sra_down_factor)?;
        let sms = SmsWeights::init(cfg.vit.dim, cfg.sms_heads, cfg.sms_pool, INIT_STD, &mut rng)?;
        let seps = SeparatorSet::init(cfg.vit.dim, INIT_STD, &mut rng);
        Ok(Self {
            vit,
            adapters,
            sms,
            seps,
        })
    }

    /// Same weights with every adapter contributing zero.
    pub fn with_zeroed_adapters(&self) -> Self {
        Self {
            adapters: self
                .adapters
                .iter()
                .map(|(&l, a)| (l, a.zeroed_outputs()))
                .collect(),
            ..self.clone()
        }
    }

    /// Writes the weights as a float32 tensor manifest directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        tnsr::write_manifest_dir(dir, &self.named_tensors(""), DType::Float32)
    }

    /// Loads weights shaped for `cfg` from a tensor manifest directory.
    pub fn load(cfg: &PipelineConfig, dir: &Path) -> Result<Self> {
        let template = Self::init(cfg, 0)?;
        template.load_named("", &tnsr::read_manifest_dir(dir)?)
    }
}

/// Writes `config.json` and a weights directory for a freshly initialized pipeline.
pub fn init_to_dir(
    cfg: &PipelineConfig,
    seed: u64,
    config_path: &Path,
    weights_dir: &Path,
) -> Result<()> {
    let w = PipelineWeights::init(cfg, seed)?;
    write_json(config_path, cfg)?;
    w.save(weights_dir)
}

/// Encoder features for the low-resolution view and every slice, before the sampler.
pub fn encode_views(
    img: &ImageBuffer,
    cfg: &PipelineConfig,
    w: &PipelineWeights,
) -> Result<(FeatureMap, Vec<FeatureMap>, GridSpec)> {
    cfg.validate()?;
    let sliced = slice_image(img, cfg.base(), cfg.max_slices)?;
    let embedded: Vec<FeatureMap> = sliced
        .slices
        .par_iter()
        .map(|s| patch_embed(s, &cfg.vit, &w.vit))
        .collect::<Result<_>>()?;
    let low = patch_embed(&sliced.lowres, &cfg.vit, &w.vit)?;
    let low = encoder_forward(&[low], &GridSpec::fixed(cfg.base(), 1, 1), &w.vit, None)?.remove(0);
    let slices = encoder_forward(&embedded, &sliced.grid, &w.vit, Some(&w.adapters))?;
    Ok((low, slices, sliced.grid))
}

/// Encodes an image into its assembled token sequence.
pub fn encode(
    img: &ImageBuffer,
    cfg: &PipelineConfig,
    w: &PipelineWeights,
) -> Result<AssembledSequence> {
    let (low, slices, grid) = encode_views(img, cfg, w)?;
    let low = sms_forward(&low, &w.sms)?;
    let slices: Vec<Tensor> = slices
        .par_iter()
        .map(|s| sms_forward(s, &w.sms))
        .collect::<Result<_>>()?;
    assemble(&low, &slices, &grid, &w.seps, cfg.use_separators)
}
