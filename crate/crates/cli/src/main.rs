use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hires_core::assembler::count_tokens;
use hires_core::entitygrid::corpus::{load_corpus, write_corpus, CorpusConfig};
use hires_core::entitygrid::eval::{
    constant_oracle, evaluate, parse_predictions, perfect_oracle, probe_positions, EvalReport,
};
use hires_core::entitygrid::Task;
use hires_core::gradsuite::{self, OpCheck};
use hires_core::io::write_json;
use hires_core::numerics::tnsr::{self, DType};
use hires_core::pipeline::toy::toy_run_dir;
use hires_core::pipeline::{encode, init_to_dir, PipelineConfig, PipelineWeights, ToyOptions};
use hires_core::slicer::{compute_grid, lowres_view, pnm, slice_image, GridSpec};
use hires_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hires",
    version,
    about = "High-resolution slicing, encoding and EntityGrid benchmark tools"
)]
struct Cli {
    /// Human-readable output instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "HIRES_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Slice grid for an image size.
    Grid {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        base: usize,
        #[arg(long, default_value_t = 16)]
        max_slices: usize,
    },
    /// Cut an image into slices and write them with grid.json.
    Slice {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        base: usize,
        #[arg(long, default_value_t = 16)]
        max_slices: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the low-resolution view of an image.
    Lowres {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        base: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a pipeline config and freshly initialized weights.
    Init {
        /// Toy configuration at this base resolution.
        #[arg(long, default_value_t = 28)]
        base: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Encode an image into its assembled token sequence.
    Encode {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::Float32)]
        dtype: Precision,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[command(flatten)]
        seed: SeedArg,
        /// Number of seeds derived from --seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Generate an EntityGrid corpus.
    BenchGen {
        #[arg(long, default_value_t = 224)]
        r: usize,
        #[arg(long, default_value_t = 100)]
        per_cell: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Comma-separated subset of identification,position,counting.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a corpus.
    BenchEval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "predictions")]
        oracle: Option<Oracle>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the toy head with and without adapters.
    ToyRun {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequence length for a slice grid.
    Tokens {
        /// Rows and columns, e.g. 4,4.
        #[arg(long, value_parser = parse_grid)]
        grid: (usize, usize),
        #[arg(long)]
        per_slice: usize,
        #[arg(long)]
        global: usize,
        #[arg(long)]
        separators: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Float32,
    Float64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Perfect,
    Constant,
}

/// Result of a command: JSON for stdout, text for `--pretty`, and whether it succeeded.
struct Output {
    json: Value,
    text: String,
    ok: bool,
}

impl Output {
    fn json(json: Value) -> Self {
        let text = serde_json::to_string_pretty(&json).unwrap_or_default();
        Self {
            json,
            text,
            ok: true,
        }
    }
}

fn report_text(r: &EvalReport) -> String {
    let mut s = String::from("position  accuracy\n");
    for (i, a) in r.per_position.iter().enumerate() {
        let a = a.map_or("-".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!("{:>8}  {a}\n", i + 1));
    }
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    s.push_str(&format!(
        "edge {:.4}  center {:.4}  mean {:.4}  std {:.4}\nD1 {}  D2 {}  |D2| {}\n",
        r.acc_edge,
        r.acc_center,
        r.acc_mean,
        r.acc_std,
        opt(r.d1),
        opt(r.d2),
        opt(r.d2_abs)
    ));
    s
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (m, n) = s.split_once(',').ok_or("expected rows,cols")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(m)?, num(n)?))
}

fn tensor_dtype(p: Precision) -> DType {
    match p {
        Precision::Float32 => DType::Float32,
        Precision::Float64 => DType::Float64,
    }
}

fn slice_names(grid: &GridSpec) -> Vec<String> {
    (0..grid.m)
        .flat_map(|i| (0..grid.n).map(move |j| format!("slice_{i}_{j}.ppm")))
        .collect()
}

fn gradcheck(op: Option<String>, eps: f64, seed: u64, seeds: usize) -> Result<Output> {
    let ops: Vec<String> = match op {
        Some(op) => vec![op],
        None => gradsuite::all_ops().into_iter().map(String::from).collect(),
    };
    let seed_list = gradsuite::seeds(seed, seeds.max(1));
    let mut rows: Vec<OpCheck> = Vec::new();
    for op in &ops {
        let checks = seed_list
            .iter()
            .map(|&s| gradsuite::check_op(op, s, eps))
            .collect::<Result<Vec<_>>>()?;
        if let Some(worst) = checks
            .into_iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        {
            rows.push(worst);
        }
    }
    let ok = rows.iter().all(|r| r.passed);
    let mut text = format!(
        "{:<24} {:>12} {:>10}  status\n",
        "op", "max_rel_err", "threshold"
    );
    for r in &rows {
        let status = if r.passed { "ok" } else { "FAIL" };
        text.push_str(&format!(
            "{:<24} {:>12.3e} {:>10.0e}  {status}\n",
            r.op, r.max_rel_error, r.threshold
        ));
    }
    let json =
        json!({ "eps": eps, "seeds": seed_list.len(), "passed": ok, "results": to_value(&rows)? });
    Ok(Output { json, text, ok })
}

fn run(command: Command) -> Result<Output> {
    match command {
        Command::Grid {
            height,
            width,
            base,
            max_slices,
        } => Ok(Output::json(to_value(&compute_grid(
            height, width, base, max_slices,
        )?)?)),
        Command::Slice {
            image,
            base,
            max_slices,
            out,
        } => {
            let img = pnm::read(&image)?;
            let sliced = slice_image(&img, base, max_slices)?;
            let names = slice_names(&sliced.grid);
            for (name, s) in names.iter().zip(&sliced.slices) {
                pnm::write(&out.join(name), s)?;
            }
            write_json(&out.join("grid.json"), &sliced.grid)?;
            Ok(Output::json(
                json!({ "grid": to_value(&sliced.grid)?, "slices": names }),
            ))
        }
        Command::Lowres { image, base, out } => {
            let low = lowres_view(&pnm::read(&image)?, base)?;
            pnm::write(&out, &low)?;
            Ok(Output::json(
                json!({ "height": low.height(), "width": low.width(), "out": out }),
            ))
        }
        Command::Init {
            base,
            seed,
            config,
            weights,
        } => {
            let cfg = PipelineConfig::toy(base)?;
            init_to_dir(&cfg, seed.seed, &config, &weights)?;
            Ok(Output::json(
                json!({ "config": config, "weights": weights, "seed": seed.seed }),
            ))
        }
        Command::Encode {
            image,
            config,
            weights,
            out,
            layout,
            dtype,
        } => {
            let cfg = PipelineConfig::read(&config)?;
            let w = PipelineWeights::load(&cfg, &weights)?;
            let seq = encode(&pnm::read(&image)?, &cfg, &w)?;
            tnsr::write(&out, &seq.tokens, tensor_dtype(dtype))?;
            write_json(&layout, &seq.layout)?;
            Ok(Output::json(
                json!({ "shape": seq.tokens.shape(), "total": seq.layout.total }),
            ))
        }
        Command::Gradcheck {
            op,
            all: _,
            eps,
            seed,
            seeds,
        } => gradcheck(op, eps, seed.seed, seeds),
        Command::BenchGen {
            r,
            per_cell,
            seed,
            tasks,
            out,
        } => {
            let mut cfg = CorpusConfig::new(r, per_cell, seed.seed);
            if let Some(tasks) = tasks {
                cfg.tasks = tasks
                    .iter()
                    .map(|t| t.parse::<Task>())
                    .collect::<Result<_>>()?;
            }
            Ok(Output::json(to_value(&write_corpus(&out, &cfg)?)?))
        }
        Command::BenchEval {
            corpus,
            predictions,
            oracle,
            out,
        } => {
            let (_, items) = load_corpus(&corpus)?;
            let preds: BTreeMap<String, String> = match (predictions, oracle) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::File {
                        path: p.clone(),
                        source: e,
                    })?;
                    parse_predictions(&text)?
                }
                (None, Some(Oracle::Perfect)) => perfect_oracle(&items),
                (None, Some(Oracle::Constant)) => constant_oracle(&items),
                (None, None) => {
                    return Err(Error::Config(
                        "either --predictions or --oracle is required".into(),
                    ))
                }
            };
            let report = evaluate(&preds, &items, &probe_positions(&items))?;
            write_json(&out, &report)?;
            Ok(Output {
                json: to_value(&report)?,
                text: report_text(&report),
                ok: true,
            })
        }
        Command::ToyRun {
            corpus,
            epochs,
            seed,
            lr,
            out,
        } => {
            let opts = ToyOptions {
                epochs,
                seed: seed.seed,
                lr,
            };
            let rep = toy_run_dir(&corpus, &opts)?;
            write_json(&out.join("with_sra.json"), &rep.with_sra)?;
            write_json(&out.join("zero_sra.json"), &rep.zero_sra)?;
            write_json(&out.join("summary.json"), &rep)?;
            let text = format!(
                "with adapters\n{}\nwithout adapters\n{}\nfinal loss {:.4} / {:.4}\n",
                report_text(&rep.with_sra),
                report_text(&rep.zero_sra),
                rep.with_sra_training
                    .loss
                    .last()
                    .copied()
                    .unwrap_or(f64::NAN),
                rep.zero_sra_training
                    .loss
                    .last()
                    .copied()
                    .unwrap_or(f64::NAN),
            );
            Ok(Output {
                json: to_value(&rep)?,
                text,
                ok: true,
            })
        }
        Command::Tokens {
            grid,
            per_slice,
            global,
            separators,
        } => {
            let (m, n) = grid;
            if m == 0 || n == 0 {
                return Err(Error::Config(format!("grid {m},{n} must be positive")));
            }
            let count = count_tokens(&GridSpec::fixed(1, m, n), global, per_slice, separators);
            Ok(Output {
                json: json!(count),
                text: format!("{count}\n"),
                ok: true,
            })
        }
    }
}

fn emit(out: &Output, pretty: bool) {
    if pretty {
        print!("{}", out.text.trim_end());
        println!();
    } else {
        println!("{}", out.json);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("hires: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(out) => {
            emit(&out, cli.pretty);
            if out.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("hires: {e}");
            ExitCode::FAILURE
        }
    }
}
