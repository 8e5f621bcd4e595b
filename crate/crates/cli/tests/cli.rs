use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hires(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hires"))
        .args(args)
        .env_remove("HIRES_SEED")
        .output()
        .expect("spawn hires")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tokens_for_full_grid() {
    let out = hires(&[
        "tokens",
        "--grid",
        "4,4",
        "--per-slice",
        "64",
        "--global",
        "64",
    ]);
    assert_eq!(stdout_json(&out), 1088);
}

#[test]
fn grid_for_square_image() {
    let g = stdout_json(&hires(&[
        "grid",
        "--height",
        "448",
        "--width",
        "448",
        "--base",
        "224",
        "--max-slices",
        "16",
    ]));
    assert_eq!(g["m"], 4);
    assert_eq!(g["n"], 4);
    assert_eq!(g["quadrupled"], true);
}

#[test]
fn perfect_oracle_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let report = dir.path().join("report.json");
    let gen = stdout_json(&hires(&[
        "bench-gen",
        "--r",
        "28",
        "--per-cell",
        "1",
        "--seed",
        "3",
        "--out",
        s(&corpus),
    ]));
    assert_eq!(gen["items"], 27);
    assert!(corpus.join("manifest.json").is_file());
    assert!(corpus.join("corpus.jsonl").is_file());

    let r = stdout_json(&hires(&[
        "bench-eval",
        "--corpus",
        s(&corpus),
        "--oracle",
        "perfect",
        "--out",
        s(&report),
    ]));
    assert_eq!(r["d1"], 1.0);
    assert_eq!(r["d2"], 0.0);
    let on_disk: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(on_disk, r);
}

#[test]
fn predictions_file_is_scored() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    stdout_json(&hires(&[
        "bench-gen",
        "--r",
        "28",
        "--per-cell",
        "1",
        "--tasks",
        "counting",
        "--out",
        s(&corpus),
    ]));
    let jsonl = std::fs::read_to_string(corpus.join("corpus.jsonl")).unwrap();
    let preds: String = jsonl
        .lines()
        .map(|l| {
            let item: Value = serde_json::from_str(l).unwrap();
            format!(
                "{{\"image_id\":{},\"option\":{}}}\n",
                item["image_id"], item["answer"]
            )
        })
        .collect();
    let p = dir.path().join("p.jsonl");
    std::fs::write(&p, preds).unwrap();
    let r = stdout_json(&hires(&[
        "bench-eval",
        "--corpus",
        s(&corpus),
        "--predictions",
        s(&p),
        "--out",
        s(&dir.path().join("r.json")),
    ]));
    assert_eq!(r["acc_mean"], 1.0);

    // one missing prediction fails the whole evaluation
    let short: String = std::fs::read_to_string(&p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&p, short).unwrap();
    let out = hires(&[
        "bench-eval",
        "--corpus",
        s(&corpus),
        "--predictions",
        s(&p),
        "--out",
        s(&dir.path().join("r2.json")),
    ]);
    assert!(!out.status.success());
    assert!(!dir.path().join("r2.json").exists());
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hires"));
        cmd.args([
            "bench-gen",
            "--r",
            "28",
            "--per-cell",
            "1",
            "--tasks",
            "identification",
            "--out",
            s(&out),
        ]);
        cmd.env_remove("HIRES_SEED");
        if let Some(e) = env {
            cmd.env("HIRES_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out.join("corpus.jsonl")).unwrap()
    };
    let env7 = run("a", Some("7"), None);
    assert_eq!(env7, run("b", None, Some("7")));
    assert_ne!(env7, run("c", None, None));
}

#[test]
fn slice_lowres_and_encode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 56x56 gradient image
    let mut ppm = b"P6\n56 56\n255\n".to_vec();
    ppm.extend((0..56 * 56 * 3).map(|i| (i * 7 % 256) as u8));
    std::fs::write(d.join("img.ppm"), ppm).unwrap();

    let sl = stdout_json(&hires(&[
        "slice",
        "--image",
        s(&d.join("img.ppm")),
        "--base",
        "28",
        "--max-slices",
        "4",
        "--out",
        s(&d.join("slices")),
    ]));
    assert_eq!(sl["grid"]["m"], 2);
    assert_eq!(sl["grid"]["n"], 2);
    assert!(d.join("slices/grid.json").is_file());
    assert!(d.join("slices/slice_1_1.ppm").is_file());

    let low = stdout_json(&hires(&[
        "lowres",
        "--image",
        s(&d.join("img.ppm")),
        "--base",
        "28",
        "--out",
        s(&d.join("low.ppm")),
    ]));
    assert_eq!(low["width"], 28);
    assert!(std::fs::read(d.join("low.ppm"))
        .unwrap()
        .starts_with(b"P6\n28 28\n255\n"));

    stdout_json(&hires(&[
        "init",
        "--base",
        "28",
        "--config",
        s(&d.join("cfg.json")),
        "--weights",
        s(&d.join("w")),
    ]));
    let enc = stdout_json(&hires(&[
        "encode",
        "--image",
        s(&d.join("img.ppm")),
        "--config",
        s(&d.join("cfg.json")),
        "--weights",
        s(&d.join("w")),
        "--out",
        s(&d.join("seq.tnsr")),
        "--layout",
        s(&d.join("layout.json")),
    ]));
    let layout: Value =
        serde_json::from_slice(&std::fs::read(d.join("layout.json")).unwrap()).unwrap();
    assert_eq!(enc["total"], layout["total"]);
    assert_eq!(enc["shape"][0], layout["total"]);
    assert!(d.join("seq.tnsr").is_file());
}

#[test]
fn gradcheck_single_op() {
    let r = stdout_json(&hires(&[
        "gradcheck",
        "--op",
        "softmax_rows",
        "--seed",
        "2",
    ]));
    assert_eq!(r["passed"], true);
    assert_eq!(r["results"][0]["op"], "softmax_rows");
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ppm");
    let out_file = dir.path().join("low.ppm");
    let out = hires(&[
        "lowres",
        "--image",
        s(&missing),
        "--base",
        "28",
        "--out",
        s(&out_file),
    ]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    assert!(out.stdout.is_empty());
    assert!(!out_file.exists());

    assert!(!hires(&["tokens", "--grid", "4,4", "--bogus"])
        .status
        .success());
    assert!(!hires(&["gradcheck", "--op", "no_such_op"]).status.success());
    assert!(
        !hires(&["grid", "--height", "0", "--width", "10", "--base", "224"])
            .status
            .success()
    );
}
