//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero
//! exit if any criterion fails. Built with `harness = false`.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use hires_core::assembler::count_tokens;
use hires_core::entitygrid::corpus::{
    corpus_jsonl, item_ppm, manifest, read_manifest, regenerate, CorpusManifest,
};
use hires_core::entitygrid::eval::{evaluate, perfect_oracle, probe_positions, EvalReport};
use hires_core::entitygrid::render::boundary_positions;
use hires_core::entitygrid::{
    generate_items, write_corpus, CorpusConfig, Task, CENTER_POSITIONS, EDGE_POSITIONS,
};
use hires_core::gradsuite::{self, COMPOSED, PRIMITIVES};
use hires_core::numerics::Tensor;
use hires_core::pipeline::{toy_train_eval, PipelineConfig, ToyOptions};
use hires_core::slice_restore::{merge, reslice, FeatureMap};
use hires_core::slicer::{compute_grid, extract_slices, stitch_slices, GridSpec};
use hires_core::sms::pool_queries;
use hires_core::vit::{encoder_forward, VitConfig, VitWeights};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tokens_per_slice(base: usize, s: usize) -> usize {
    let side = base / 14;
    let p = FeatureMap::new(Tensor::zeros(&[side * side, 4]), (side, side)).unwrap();
    pool_queries(&p, s).unwrap().len()
}

fn token_counts() -> Outcome {
    let grid = GridSpec::fixed(1, 4, 4);
    let cases = [
        (224, 2, 1088),
        (224, 4, 272),
        (224, 8, 68),
        (336, 2, 2448),
        (336, 3, 1088),
    ];
    let mut bad = Vec::new();
    for (base, s, want) in cases {
        let l = tokens_per_slice(base, s);
        let got = count_tokens(&grid, l, l, false);
        if got != want {
            bad.push(format!("{base}/S={s}: {got} != {want}"));
        }
    }
    let l = tokens_per_slice(336, 4);
    let anomaly = count_tokens(&grid, l, l, false);
    let note = format!("336/S=4 gives {anomaly} ({l} per slice), not 512");
    if bad.is_empty() {
        outcome(anomaly == 612, format!("5 rows exact; {note}"))
    } else {
        outcome(false, bad.join(", "))
    }
}

fn slicing_rule() -> Outcome {
    let mut bad = Vec::new();
    for ((h, w), want) in [
        ((896, 896), (4, 4, false)),
        ((448, 448), (4, 4, true)),
        ((100, 300), (2, 4, true)),
    ] {
        let g = compute_grid(h, w, 224, 16).unwrap();
        if (g.m, g.n, g.quadrupled) != want {
            bad.push(format!("{h}x{w} -> {}x{} q={}", g.m, g.n, g.quadrupled));
        }
    }
    let mut r = rng(2);
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..=2400), r.random_range(1..=2400));
        let g = compute_grid(h, w, 224, 16).unwrap();
        bad.extend(
            grid_rule_violations(h, w, 224, 16, &g)
                .into_iter()
                .map(|v| format!("{h}x{w}: {v}")),
        );
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "3 examples + 50 random".to_string()
        } else {
            bad.join("; ")
        },
    )
}

fn metric_reproduction() -> Outcome {
    let mut acc = [None; 9];
    for p in EDGE_POSITIONS {
        acc[p as usize - 1] = Some(0.5819);
    }
    for p in CENTER_POSITIONS {
        acc[p as usize - 1] = Some(0.6624);
    }
    let rep = EvalReport::from_position_accuracies(acc).unwrap();
    let (d1, d2a) = (rep.d1.unwrap(), rep.d2_abs.unwrap());
    let reference_ok = (d1 - 0.8784).abs() <= 5e-4 && (d2a - 0.1215).abs() <= 5e-4;
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let table: [Option<f64>; 9] = std::array::from_fn(|_| Some(r.random_range(0.0..=1.0)));
        let rep = EvalReport::from_position_accuracies(table).unwrap();
        if let (Some(d1), Some(d2)) = (rep.d1, rep.d2) {
            worst = worst.max((d2 - (d1 - 1.0)).abs() / (f64::EPSILON * d1.abs().max(1.0)));
        }
    }
    outcome(
        reference_ok && worst <= 4.0,
        format!("D1 {d1:.5}, |D2| {d2a:.5}; identity within {worst:.1} ulp over 1000 tables"),
    )
}

fn structural_inverses() -> Outcome {
    let mut failures = 0;
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let (m, n) = (r.random_range(1..=4), r.random_range(1..=4));
        let spatial = (r.random_range(1..=4), r.random_range(1..=4));
        let d = r.random_range(1..=6);
        let grid = GridSpec::fixed(r.random_range(1..=16), m, n);
        let whole = Tensor::randn(&[m * spatial.0, n * spatial.1, d], 1.0, &mut r);
        let back = merge(&reslice(&whole, &grid, spatial).unwrap(), &grid).unwrap();
        let x = random_slices(&grid, spatial, d, seed + 1000);
        let again = reslice(&merge(&x, &grid).unwrap(), &grid, spatial).unwrap();
        let canvas = random_image(m * grid.r, n * grid.r, 3, seed + 2000);
        let stitched = stitch_slices(&extract_slices(&canvas, &grid).unwrap(), &grid).unwrap();
        let ok = back.bit_eq(&whole)
            && x.iter()
                .zip(&again)
                .all(|(a, b)| a.tokens.bit_eq(&b.tokens))
            && stitched == canvas;
        failures += usize::from(!ok);
    }
    outcome(failures == 0, format!("{failures} of 100 seeds differ"))
}

fn zero_adapter_identity() -> Outcome {
    let cfg = VitConfig::default();
    let w = VitWeights::init_with_std(&cfg, 0.3, &mut rng(5)).unwrap();
    let adapters = w.default_adapters(&cfg, 2).unwrap();
    let side = cfg.grid_side();
    let mut failures = 0;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let grid = GridSpec::fixed(cfg.input_size, r.random_range(1..=3), r.random_range(1..=3));
        let x = random_slices(&grid, (side, side), cfg.dim, seed + 50);
        let with = encoder_forward(&x, &grid, &w, Some(&adapters)).unwrap();
        let without = encoder_forward(&x, &grid, &w, None).unwrap();
        failures += usize::from(
            !with
                .iter()
                .zip(&without)
                .all(|(a, b)| a.tokens.bit_eq(&b.tokens)),
        );
    }
    outcome(failures == 0, format!("{failures} of 20 slice sets differ"))
}

fn gradient_verification() -> Outcome {
    let seeds = gradsuite::seeds(0, 20);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failed = Vec::new();
    for op in gradsuite::all_ops() {
        let checks: Vec<_> = seeds
            .par_iter()
            .map(|&s| gradsuite::check_op(op, s, 1e-5))
            .collect();
        for c in checks {
            match c {
                Ok(c) => {
                    let e = worst.entry(op).or_insert(0.0);
                    *e = e.max(c.max_rel_error);
                    if !c.passed {
                        failed.push(format!("{op}@{}: {:.2e}", c.seed, c.max_rel_error));
                    }
                }
                Err(e) => failed.push(format!("{op}: {e}")),
            }
        }
    }
    let tier = |ops: &[&str]| {
        ops.iter()
            .filter_map(|o| worst.get(o))
            .cloned()
            .fold(0.0, f64::max)
    };
    let detail = format!(
        "{} primitives max {:.1e} (< 1e-6), {} composed max {:.1e} (< 1e-4), 20 seeds",
        PRIMITIVES.len(),
        tier(&PRIMITIVES),
        COMPOSED.len(),
        tier(&COMPOSED)
    );
    if failed.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; failing: {}", failed.join(", ")))
    }
}

fn cross_slice_flow() -> Outcome {
    let flow = (0..10)
        .map(cross_slice_change)
        .fold(f64::INFINITY, f64::min);
    let bands: Vec<(f64, f64)> = (0..10).map(local_band_changes).collect();
    let inside = bands.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
    let outside = bands.iter().map(|b| b.1).fold(0.0, f64::max);
    outcome(
        flow > 1e-6 && inside > 0.0 && outside == 0.0,
        format!("global min change {flow:.2e}; local-only change beyond band {outside:e}"),
    )
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the jsonl plus every rendered PPM, in item order.
fn corpus_digest(cfg: &CorpusConfig) -> (String, Vec<hires_core::entitygrid::QAItem>) {
    let items = generate_items(cfg).unwrap();
    let image_hashes: Vec<Vec<u8>> = items
        .par_iter()
        .map(|i| Sha256::digest(item_ppm(i, cfg.r).unwrap()).to_vec())
        .collect();
    let mut h = Sha256::new();
    h.update(corpus_jsonl(&items).unwrap().as_bytes());
    for ih in &image_hashes {
        h.update(ih);
    }
    (hex(&h.finalize()), items)
}

fn benchmark_determinism() -> Outcome {
    let cfg = CorpusConfig::new(224, 100, 0);
    let (first, items) = corpus_digest(&cfg);
    let m: CorpusManifest =
        serde_json::from_str(&serde_json::to_string(&manifest(&cfg, &items)).unwrap()).unwrap();
    let (second, _) = corpus_digest(&m.config);

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let small = CorpusConfig::new(56, 2, 11);
    write_corpus(&a, &small).unwrap();
    regenerate(&read_manifest(&a).unwrap(), &b).unwrap();
    let same_on_disk = std::fs::read_dir(&a)
        .unwrap()
        .chain(std::fs::read_dir(a.join("images")).unwrap())
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .all(|p| {
            std::fs::read(&p).unwrap()
                == std::fs::read(b.join(p.strip_prefix(&a).unwrap())).unwrap()
        });

    let geometry = boundary_positions(224) == EDGE_POSITIONS.to_vec();
    let rep = evaluate(&perfect_oracle(&items), &items, &probe_positions(&items)).unwrap();
    let oracle = rep.d1 == Some(1.0) && rep.d2 == Some(0.0);
    let tasks_ok = Task::ALL
        .iter()
        .all(|t| items.iter().filter(|i| i.task == *t).count() == 900);
    outcome(
        first == second && same_on_disk && geometry && oracle && tasks_ok,
        format!(
            "{} items, digest {}..., on-disk regeneration {}, edge set {:?}, perfect D1 {:?} D2 {:?}",
            items.len(),
            &first[..16],
            if same_on_disk { "identical" } else { "DIFFERS" },
            boundary_positions(224),
            rep.d1,
            rep.d2
        ),
    )
}

fn toy_sanity() -> Outcome {
    let r = 28;
    let cfg = PipelineConfig::toy(r).unwrap();
    let (mut decreased, mut emitted, mut direction) = (0, 0, 0);
    for seed in 0..10u64 {
        let corpus = CorpusConfig {
            tasks: vec![Task::Identification],
            ..CorpusConfig::new(r, 4, seed)
        };
        let items = generate_items(&corpus).unwrap();
        let opts = ToyOptions {
            seed,
            ..ToyOptions::default()
        };
        let Ok(rep) = toy_train_eval(&items, r, &cfg, &opts) else {
            continue;
        };
        decreased +=
            usize::from(rep.with_sra_training.decreased() && rep.zero_sra_training.decreased());
        emitted += usize::from(rep.with_sra.items > 0 && rep.zero_sra.items > 0);
        direction += usize::from(rep.direction_holds == Some(true));
    }
    outcome(
        decreased >= 9 && emitted == 10,
        format!(
            "loss decreased in {decreased}/10 runs, reports in {emitted}/10; with-SRA D1 >= zero-SRA D1 in {direction}/10 (expected direction, non-blocking)"
        ),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "token-count reproduction",
            Duration::from_secs(1),
            token_counts,
        ),
        ("slicing-rule suite", Duration::from_secs(1), slicing_rule),
        (
            "metric reproduction",
            Duration::from_secs(1),
            metric_reproduction,
        ),
        (
            "structural inverses",
            Duration::from_secs(10),
            structural_inverses,
        ),
        (
            "zero-adapter identity",
            Duration::from_secs(10),
            zero_adapter_identity,
        ),
        (
            "gradient verification",
            Duration::from_secs(120),
            gradient_verification,
        ),
        (
            "cross-slice flow witness",
            Duration::from_secs(5),
            cross_slice_flow,
        ),
        (
            "benchmark determinism and geometry",
            Duration::from_secs(30),
            benchmark_determinism,
        ),
        (
            "toy end-to-end sanity",
            Duration::from_secs(300),
            toy_sanity,
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let pass = o.pass && took < *budget;
        failed += usize::from(!pass);
        println!(
            "{} {}. {name} ({:.2}s, budget {}s): {}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            budget.as_secs(),
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
