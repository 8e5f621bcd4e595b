//! Corpus generation, persistence and regeneration.
//!
//! A corpus directory holds `images/<image_id>.ppm`, `corpus.jsonl` and
//! `manifest.json`. Every item depends only on the corpus seed, its task,
//! its probe position and its index, so generation parallelizes freely.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::entities::{catalog, pool, EntityKind, EntitySpec};
use super::qa::{gen_qa, sample_entities, QAItem, Task};
use super::render::{check_layout, placement, render_image, Placement};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_json, write_json};
use crate::slicer::{pnm, ImageBuffer};

pub const GENERATOR: &str = "entitygrid";
pub const GENERATOR_VERSION: u32 = 1;
pub const DEFAULT_R: usize = 224;
pub const DEFAULT_PER_CELL: usize = 100;
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_ATTEMPTS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub r: usize,
    /// Items per task per probe position.
    pub per_cell: usize,
    pub seed: u64,
    pub tasks: Vec<Task>,
    /// Restricts the entity pool; `None` uses every kind.
    #[serde(default)]
    pub kinds: Option<Vec<EntityKind>>,
}

impl CorpusConfig {
    pub fn new(r: usize, per_cell: usize, seed: u64) -> Self {
        Self {
            r,
            per_cell,
            seed,
            tasks: Task::ALL.to_vec(),
            kinds: None,
        }
    }

    pub fn pool(&self) -> Vec<EntitySpec> {
        pool(self.kinds.as_deref(), self.r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator: String,
    pub version: u32,
    pub config: CorpusConfig,
    pub counts: BTreeMap<Task, usize>,
    pub items: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of item `k` at probe position `p` for `task`, on retry `attempt`.
pub fn item_seed(corpus_seed: u64, task: Task, p: u8, k: usize, attempt: u64) -> u64 {
    let mut h = splitmix(corpus_seed);
    for v in [task as u64, p as u64, k as u64, attempt] {
        h = splitmix(h ^ v);
    }
    h
}

pub fn image_id(task: Task, p: u8, k: usize) -> String {
    format!("{}-p{p}-{k:05}", task.name())
}

fn entities_of(item: &QAItem, r: usize) -> Result<Vec<(EntitySpec, Placement)>> {
    let cat = catalog();
    item.entities
        .iter()
        .map(|e| {
            let spec = cat.iter().find(|c| c.id == e.id).ok_or_else(|| {
                Error::Generation(format!("unknown entity id {} in {}", e.id, item.image_id))
            })?;
            Ok((spec.clone(), placement(e.position, r)?))
        })
        .collect()
}

fn generate_one(
    cfg: &CorpusConfig,
    pool: &[EntitySpec],
    task: Task,
    p: u8,
    k: usize,
) -> Result<QAItem> {
    let id = image_id(task, p, k);
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = item_seed(cfg.seed, task, p, k, attempt);
        let draw = sample_entities(seed, task, pool, Some(p), cfg.r)?;
        let item = gen_qa(task, &draw, pool, seed, cfg.r, &id)?;
        let ents = entities_of(&item, cfg.r)?;
        let refs: Vec<_> = ents.iter().map(|(e, pl)| (e, *pl)).collect();
        match check_layout(&refs, cfg.r) {
            Ok(_) => return Ok(item),
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Generation(format!("{id}: no valid layout"))))
}

/// All items in task, position, index order.
pub fn generate_items(cfg: &CorpusConfig) -> Result<Vec<QAItem>> {
    if cfg.r < 2 {
        return Err(Error::Config(format!(
            "base resolution {} too small",
            cfg.r
        )));
    }
    let pool = cfg.pool();
    let keys: Vec<(Task, u8, usize)> = cfg
        .tasks
        .iter()
        .flat_map(|&t| (1..=9u8).flat_map(move |p| (0..cfg.per_cell).map(move |k| (t, p, k))))
        .collect();
    keys.par_iter()
        .map(|&(t, p, k)| generate_one(cfg, &pool, t, p, k))
        .collect()
}

/// Re-renders the image of an item from its entity references.
pub fn render_item(item: &QAItem, r: usize) -> Result<ImageBuffer> {
    let ents = entities_of(item, r)?;
    let refs: Vec<_> = ents.iter().map(|(e, p)| (e, *p)).collect();
    render_image(&refs, r)
}

pub fn item_ppm(item: &QAItem, r: usize) -> Result<Vec<u8>> {
    Ok(pnm::encode(&render_item(item, r)?))
}

pub fn corpus_jsonl(items: &[QAItem]) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn manifest(cfg: &CorpusConfig, items: &[QAItem]) -> CorpusManifest {
    let mut counts = BTreeMap::new();
    for i in items {
        *counts.entry(i.task).or_insert(0) += 1;
    }
    CorpusManifest {
        generator: GENERATOR.into(),
        version: GENERATOR_VERSION,
        config: cfg.clone(),
        counts,
        items: items.len(),
    }
}

/// Generates and writes a corpus under `dir`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<CorpusManifest> {
    let items = generate_items(cfg)?;
    items
        .par_iter()
        .try_for_each(|item| atomic_write(&dir.join(&item.image), &item_ppm(item, cfg.r)?))?;
    atomic_write(&dir.join(CORPUS_FILE), corpus_jsonl(&items)?.as_bytes())?;
    let m = manifest(cfg, &items);
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let m: CorpusManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.generator != GENERATOR || m.version != GENERATOR_VERSION {
        return Err(Error::Format {
            format: "corpus manifest",
            detail: format!(
                "generator {} v{} is not {GENERATOR} v{GENERATOR_VERSION}",
                m.generator, m.version
            ),
        });
    }
    Ok(m)
}

/// Rebuilds the corpus described by `manifest` into `out`.
pub fn regenerate(manifest: &CorpusManifest, out: &Path) -> Result<CorpusManifest> {
    write_corpus(out, &manifest.config)
}

pub fn load_items(dir: &Path) -> Result<Vec<QAItem>> {
    let text = std::fs::read_to_string(dir.join(CORPUS_FILE))
        .map_err(|e| Error::file(dir.join(CORPUS_FILE), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<QAItem>)> {
    Ok((read_manifest(dir)?, load_items(dir)?))
}
