//! Helpers for driving the `adet` binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;
use std::time::{Duration, Instant};

use serde_json::Value;

pub const SMOKE_BUDGET: Duration = Duration::from_secs(60);
pub const SMOKE_EMBEDDINGS: usize = 12;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn mini_dataset() -> PathBuf {
    fixtures_dir().join("mini_mvtec")
}

pub fn adet(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_adet"))
        .args(args)
        .output()
        .expect("adet runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs one verb against `out`, with the dataset and any extra overrides.
pub fn verb(verb: &str, out: &Path, sets: &[&str]) -> Output {
    let root = format!("dataset.root={}", mini_dataset().display());
    let mut args = vec![verb, "--out", out.to_str().unwrap(), "--set", &root];
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    adet(&args)
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_slice(
        &std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())),
    )
    .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Drops the fields a report lists under `wall_clock_fields`.
pub fn without_wall_clock(mut v: Value) -> Value {
    let fields: Vec<String> = v["wall_clock_fields"]
        .as_array()
        .map(|a| {
            a.iter()
                .filter_map(|f| f.as_str().map(String::from))
                .collect()
        })
        .unwrap_or_default();
    if let Some(obj) = v.as_object_mut() {
        for f in fields {
            obj.remove(&f);
        }
    }
    v
}

/// Loss history with the per-epoch timings removed.
pub fn history_without_wall_clock(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Kind {
    Int,
    Num,
    Str,
    Bool,
    Arr,
    Obj,
    OptNum,
}

fn check_keys(v: &Value, keys: &[(&str, Kind)], what: &str) -> Result<(), String> {
    for &(k, kind) in keys {
        let f = v.get(k).ok_or_else(|| format!("{what}: missing `{k}`"))?;
        let ok = match kind {
            Kind::Int => f.is_u64(),
            Kind::Num => f.is_number(),
            Kind::Str => f.is_string(),
            Kind::Bool => f.is_boolean(),
            Kind::Arr => f.is_array(),
            Kind::Obj => f.is_object(),
            Kind::OptNum => f.is_number() || f.is_null(),
        };
        if !ok {
            return Err(format!("{what}: `{k}` has the wrong type: {f}"));
        }
    }
    Ok(())
}

/// Checks the documented keys and types of the three JSON reports.
pub fn check_report_schemas(out: &Path) -> Result<(), String> {
    use Kind::*;
    let train = read_json(&out.join("train_report.json"));
    check_keys(
        &train,
        &[
            ("seed", Int),
            ("split_seed", Int),
            ("train_fraction", Num),
            ("encoder_config_id", Str),
            ("embedding_dim", Int),
            ("head_config", Obj),
            ("head_parameters", Int),
            ("train", Obj),
            ("class_weight", Num),
            ("train_samples", Obj),
            ("initial_loss", Num),
            ("final_loss", OptNum),
            ("eval", Obj),
            ("wall_clock_fields", Arr),
        ],
        "train_report",
    )?;
    check_keys(
        &train["eval"],
        &[
            ("sample_count", Int),
            ("average_auroc", OptNum),
            ("overall_auroc", OptNum),
        ],
        "train_report.eval",
    )?;

    let eval = read_json(&out.join("eval_report.json"));
    check_keys(
        &eval,
        &[
            ("seed", Int),
            ("split_seed", Int),
            ("train_fraction", Num),
            ("encoder_config_id", Str),
            ("threshold", Num),
            ("sample_count", Int),
            ("categories", Obj),
            ("average_auroc", OptNum),
            ("overall_auroc", OptNum),
            ("confusion", Obj),
            ("images", Arr),
            ("wall_clock_fields", Arr),
        ],
        "eval_report",
    )?;
    for (name, c) in eval["categories"].as_object().unwrap() {
        check_keys(
            c,
            &[
                ("auroc", OptNum),
                ("degenerate", Bool),
                ("normal", Int),
                ("anomalous", Int),
                ("confusion", Obj),
            ],
            &format!("eval_report.categories.{name}"),
        )?;
    }
    check_keys(
        &eval["confusion"],
        &[("tp", Int), ("fp", Int), ("tn", Int), ("fn", Int)],
        "eval_report.confusion",
    )?;
    for img in eval["images"].as_array().unwrap() {
        check_keys(
            img,
            &[
                ("id", Str),
                ("category", Str),
                ("label", Int),
                ("logit", Num),
                ("probability", Num),
                ("predicted", Int),
                ("annotation", Str),
            ],
            "eval_report.images[]",
        )?;
    }

    let bench = read_json(&out.join("bench_report.json"));
    check_keys(
        &bench,
        &[
            ("seed", Int),
            ("encoder_config_id", Str),
            ("input_resolution", Int),
            ("embedding_dim", Int),
            ("warmup", Int),
            ("iterations", Int),
            ("durations_ms", Arr),
            ("p50_ms", Num),
            ("p90_ms", Num),
            ("p95_ms", Num),
            ("max_ms", Num),
            ("mean_ms", Num),
            ("parameters", Obj),
            ("parameters_millions", Str),
            ("wall_clock_fields", Arr),
        ],
        "bench_report",
    )?;
    let p = &bench["parameters"];
    check_keys(
        p,
        &[("encoder", Int), ("head", Int), ("total", Int)],
        "bench_report.parameters",
    )?;
    let (e, h, t) = (
        p["encoder"].as_u64().unwrap(),
        p["head"].as_u64().unwrap(),
        p["total"].as_u64().unwrap(),
    );
    if e + h != t {
        return Err(format!("bench_report: {e} + {h} != {t}"));
    }
    Ok(())
}

pub const PIPELINE: [&str; 5] = ["init-encoder", "embed", "train", "eval", "bench"];
const BENCH_SETS: [&str; 2] = ["bench.warmup=1", "bench.iterations=3"];

fn run_pipeline(out: &Path) -> Result<(), String> {
    for v in PIPELINE {
        let o = verb(v, out, &BENCH_SETS);
        if !o.status.success() {
            return Err(format!(
                "`adet {v}` exited with {:?}: {}",
                o.status.code(),
                stderr(&o)
            ));
        }
    }
    Ok(())
}

/// Full pipeline twice on the mini dataset with tiny-test random weights;
/// checks exit status, report schemas, embedding count and that the two
/// runs agree byte for byte outside wall-clock fields.
pub fn pipeline_smoke() -> Result<String, String> {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let elapsed = start.elapsed();

    check_report_schemas(a.path())?;
    let emb = adet_core::checkpoint::TensorContainer::read(&a.path().join("embeddings.kair"))
        .map_err(|e| e.to_string())?;
    if emb.tensors.len() != SMOKE_EMBEDDINGS {
        return Err(format!(
            "{} embeddings, expected {SMOKE_EMBEDDINGS}",
            emb.tensors.len()
        ));
    }
    for file in ["encoder.kair", "embeddings.kair", "head.kair"] {
        let (x, y) = (
            std::fs::read(a.path().join(file)).unwrap(),
            std::fs::read(b.path().join(file)).unwrap(),
        );
        if x != y {
            return Err(format!("{file} differs between runs"));
        }
    }
    for file in ["train_report.json", "eval_report.json", "bench_report.json"] {
        let x = without_wall_clock(read_json(&a.path().join(file)));
        let y = without_wall_clock(read_json(&b.path().join(file)));
        if x != y {
            return Err(format!(
                "{file} differs between runs outside wall-clock fields"
            ));
        }
    }
    let history = a.path().join("loss_history.jsonl");
    if history_without_wall_clock(&history)
        != history_without_wall_clock(&b.path().join("loss_history.jsonl"))
    {
        return Err("loss_history.jsonl differs between runs".into());
    }
    if elapsed >= SMOKE_BUDGET {
        return Err(format!(
            "two pipeline runs took {elapsed:?}, budget {SMOKE_BUDGET:?}"
        ));
    }
    let avg = read_json(&a.path().join("eval_report.json"))["average_auroc"].clone();
    Ok(format!(
        "{} exit 0 twice, {SMOKE_EMBEDDINGS} embeddings, reports schema-valid, reruns identical (eval average AUROC {avg}, {:.1?})",
        PIPELINE.join(" -> "),
        elapsed
    ))
}
