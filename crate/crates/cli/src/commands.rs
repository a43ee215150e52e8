//! The four pipeline verbs plus `init-encoder`. Every output file is
//! written atomically, and only after all inputs have been validated.

use std::path::{Path, PathBuf};

use adet_core::checkpoint::{write_atomic, Metadata, TensorContainer};
use adet_core::dataset::DecodedImage;
use adet_core::dataset::{load_sample, scan_dataset, stratified_split, ClassCounts, Split};
use adet_core::embeddings::{EmbeddingRecord, EmbeddingSet};
use adet_core::encoder::{encode, pool_embedding, preprocess_image, EncoderConfig, EncoderWeights};
use adet_core::head::{head_forward, HeadConfig, HeadWeights};
use adet_core::metrics::{
    build_eval_report, latency_bench, BenchReport, EvalReport, ParameterCounts, ScoredSample,
};
use adet_core::trainer::{train_head, EpochRecord, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Classify, CliError, ExitKind, Result};

pub const WALL_CLOCK_HISTORY: &str = "loss_history.wall_ms";

fn require(path: &Path, what: &'static str, kind: ExitKind) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing {
            kind,
            what,
            path: path.to_path_buf(),
        })
    }
}

fn read_container(path: &Path, what: &'static str) -> Result<TensorContainer> {
    require(path, what, ExitKind::Weights)?;
    TensorContainer::read(path).or_exit(ExitKind::Weights, || format!("reading {}", path.display()))
}

fn write_container(c: &TensorContainer, path: &Path) -> Result<()> {
    c.write(path)
        .or_exit(ExitKind::Weights, || format!("writing {}", path.display()))
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes).or_exit(ExitKind::Weights, || format!("writing {}", path.display()))
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Core {
        kind: ExitKind::Config,
        context: format!("creating {}", cfg.output_dir.display()),
        source: adet_core::Error::Io {
            context: "output directory".into(),
            source: e,
        },
    })
}

/// Loads the encoder container and checks it holds the configured encoder.
fn load_encoder(cfg: &RunConfig) -> Result<(EncoderConfig, EncoderWeights)> {
    let path = cfg.encoder_path();
    let container = read_container(&path, "encoder container")?;
    let (stored, weights) = EncoderWeights::from_container(&container)
        .or_exit(ExitKind::Weights, || format!("loading {}", path.display()))?;
    let wanted = cfg.encoder_config()?;
    if stored != wanted {
        return Err(CliError::Core {
            kind: ExitKind::Weights,
            context: format!("loading {}", path.display()),
            source: adet_core::Error::Weights {
                name: adet_core::encoder::META_ENCODER_CONFIG.into(),
                reason: format!(
                    "container holds encoder `{}`, config asks for `{}`",
                    stored.name, wanted.name
                ),
            },
        });
    }
    Ok((stored, weights))
}

fn embed_image(
    image: &DecodedImage,
    config: &EncoderConfig,
    weights: &EncoderWeights,
    pooling: adet_core::encoder::Pooling,
) -> adet_core::Result<Vec<f32>> {
    let x = preprocess_image(
        image,
        config.input_resolution,
        config.pixel_mean,
        config.pixel_std,
    )?;
    let features = encode(&x, config, weights)?;
    Ok(pool_embedding(&features, pooling)?.0)
}

/// Writes a seeded random encoder container for the configured encoder.
pub fn init_encoder(cfg: &RunConfig) -> Result<PathBuf> {
    let config = cfg.encoder_config()?;
    let weights = EncoderWeights::random(&config, cfg.seed)
        .or_exit(ExitKind::Weights, || "initializing encoder".into())?;
    ensure_output_dir(cfg)?;
    let path = cfg.encoder_path();
    write_container(&weights.to_container(&config), &path)?;
    println!(
        "wrote {} ({} encoder, {} parameters, seed {})",
        path.display(),
        config.name,
        config.parameter_count(),
        cfg.seed
    );
    Ok(path)
}

pub fn embed(cfg: &RunConfig) -> Result<PathBuf> {
    let root = cfg
        .dataset
        .root
        .as_deref()
        .ok_or_else(|| CliError::Config("dataset.root is required".into()))?;
    if !root.is_dir() {
        return Err(CliError::Missing {
            kind: ExitKind::Data,
            what: "dataset root",
            path: root.to_path_buf(),
        });
    }
    let (config, weights) = load_encoder(cfg)?;
    let manifest = scan_dataset(root, cfg.dataset.layout)
        .or_exit(ExitKind::Data, || format!("scanning {}", root.display()))?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    if manifest.is_empty() {
        return Err(CliError::Core {
            kind: ExitKind::Data,
            context: format!("scanning {}", root.display()),
            source: adet_core::Error::DegenerateData("dataset contains no images".into()),
        });
    }
    let manifest = stratified_split(&manifest, cfg.dataset.train_fraction, cfg.seed)
        .or_exit(ExitKind::Data, || "splitting dataset".into())?;
    let samples: Vec<_> = manifest.samples().collect();
    let pooling = cfg.encoder.pooling;
    let vectors = samples
        .par_iter()
        .map(|s| {
            let sample = load_sample(s)
                .or_exit(ExitKind::Data, || format!("loading {}", s.path.display()))?;
            embed_image(&sample.image, &config, &weights, pooling)
                .or_exit(ExitKind::Weights, || {
                    format!("encoding {}/{}", s.category, s.id)
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let records = samples
        .iter()
        .map(|s| EmbeddingRecord {
            id: s.id.clone(),
            category: s.category.clone(),
            label: s.label,
            split: s.split,
        })
        .collect();
    let dim = pooling.embedding_dim(&config);
    let mut set = EmbeddingSet::new(dim, records, vectors.concat())
        .or_exit(ExitKind::Data, || "assembling embeddings".into())?;
    set.encoder_config_id = Some(config.name.clone());
    set.pooling = Some(pooling);
    set.split_seed = manifest.split_seed;
    set.train_fraction = manifest.train_fraction;

    ensure_output_dir(cfg)?;
    let path = cfg.embeddings_path();
    let container = set
        .to_container()
        .or_exit(ExitKind::Data, || "serializing embeddings".into())?;
    write_container(&container, &path)?;
    println!(
        "wrote {} ({} samples, d = {dim})",
        path.display(),
        set.len()
    );
    Ok(path)
}

fn load_embeddings(cfg: &RunConfig) -> Result<EmbeddingSet> {
    let path = cfg.embeddings_path();
    let container = read_container(&path, "embedding set")?;
    EmbeddingSet::from_container(&container)
        .or_exit(ExitKind::Weights, || format!("loading {}", path.display()))
}

fn class_counts(labels: &[u8]) -> ClassCounts {
    let anomalous = labels.iter().filter(|&&y| y == 1).count();
    ClassCounts {
        normal: labels.len() - anomalous,
        anomalous,
    }
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub sample_count: usize,
    pub average_auroc: Option<f64>,
    pub overall_auroc: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub split_seed: Option<u64>,
    pub train_fraction: Option<f64>,
    pub encoder_config_id: Option<String>,
    pub embedding_dim: usize,
    pub head_config: HeadConfig,
    pub head_parameters: u64,
    pub train: TrainConfig,
    pub class_weight: f64,
    pub train_samples: ClassCounts,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    /// Scores on the eval split with the trained head; absent when the
    /// split has no samples.
    pub eval: Option<EvalSummary>,
    pub wall_clock_fields: Vec<String>,
}

/// Scores the eval split of `set` with `head`.
fn evaluate(set: &EmbeddingSet, head: &HeadWeights, threshold: f64) -> Result<Option<EvalReport>> {
    let idx = set.indices(Split::Eval);
    if idx.is_empty() {
        return Ok(None);
    }
    let (x, _) = set
        .gather(&idx)
        .or_exit(ExitKind::Data, || "selecting eval split".into())?;
    let logits =
        head_forward(&x, head).or_exit(ExitKind::Weights, || "scoring eval split".into())?;
    let scored: Vec<ScoredSample> = idx
        .iter()
        .zip(&logits)
        .map(|(&i, &logit)| {
            let r = &set.records[i];
            ScoredSample {
                id: r.id.clone(),
                category: r.category.clone(),
                label: r.label,
                logit,
            }
        })
        .collect();
    Ok(Some(build_eval_report(&scored, threshold)))
}

pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    if !cfg.embeddings_path().is_file() && cfg.dataset.root.is_some() {
        embed(cfg)?;
    }
    let set = load_embeddings(cfg)?;
    let idx = set.indices(Split::Train);
    if idx.is_empty() {
        return Err(CliError::Core {
            kind: ExitKind::Data,
            context: "selecting train split".into(),
            source: adet_core::Error::DegenerateData("the train split is empty".into()),
        });
    }
    let (x, y) = set
        .gather(&idx)
        .or_exit(ExitKind::Data, || "selecting train split".into())?;
    let head_config = cfg.head_config(set.dim);
    let train_cfg = cfg.train_config();
    let outcome = train_head(&x, &y, &head_config, &train_cfg).or_exit(ExitKind::Data, || {
        let c = class_counts(&y);
        format!(
            "training on {} normal / {} anomalous samples",
            c.normal, c.anomalous
        )
    })?;

    let eval = evaluate(&set, &outcome.weights, cfg.eval.threshold)?.map(|r| EvalSummary {
        sample_count: r.sample_count,
        average_auroc: r.average_auroc,
        overall_auroc: r.overall_auroc,
    });
    let report = TrainReport {
        seed: cfg.seed,
        split_seed: set.split_seed,
        train_fraction: set.train_fraction,
        encoder_config_id: set.encoder_config_id.clone(),
        embedding_dim: set.dim,
        head_parameters: outcome.weights.parameter_count(),
        head_config,
        train: train_cfg,
        class_weight: outcome.class_weight,
        train_samples: class_counts(&y),
        initial_loss: outcome.initial_loss,
        final_loss: outcome.history.last().map(|r| r.mean_loss),
        eval,
        wall_clock_fields: vec![WALL_CLOCK_HISTORY.into()],
    };

    let mut history = Vec::new();
    for rec in &outcome.history {
        history.extend(serde_json::to_vec::<EpochRecord>(rec).expect("records serialize"));
        history.push(b'\n');
    }
    let mut metadata = Metadata::new();
    outcome.weights.write_metadata(&mut metadata);
    metadata.insert("seed".into(), cfg.seed.to_string());
    if let Some(id) = &set.encoder_config_id {
        metadata.insert(
            adet_core::encoder::META_ENCODER_CONFIG_ID.into(),
            id.clone(),
        );
    }
    let head = TensorContainer::new(outcome.weights.to_tensor_map(), metadata);

    ensure_output_dir(cfg)?;
    write_container(&head, &cfg.head_path())?;
    let hist_path = cfg.output_dir.join("loss_history.jsonl");
    write_atomic(&hist_path, &history).or_exit(ExitKind::Weights, || {
        format!("writing {}", hist_path.display())
    })?;
    write_json(&report, &cfg.output_dir.join("train_report.json"))?;
    println!(
        "trained {} epochs: loss {:.4} -> {:.4}; eval AUROC {}",
        outcome.history.len(),
        report.initial_loss,
        report.final_loss.unwrap_or(report.initial_loss),
        report
            .eval
            .as_ref()
            .and_then(|e| e.average_auroc)
            .map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(report)
}

fn load_head(cfg: &RunConfig, dim: usize) -> Result<HeadWeights> {
    let path = cfg.head_path();
    let container = read_container(&path, "head container")?;
    let head = HeadWeights::from_container(&container)
        .or_exit(ExitKind::Weights, || format!("loading {}", path.display()))?;
    if head.config.input_dim != dim {
        return Err(CliError::Core {
            kind: ExitKind::Weights,
            context: format!("loading {}", path.display()),
            source: adet_core::Error::Weights {
                name: adet_core::head::META_HEAD_CONFIG.into(),
                reason: format!(
                    "head expects d = {}, embeddings have d = {dim}",
                    head.config.input_dim
                ),
            },
        });
    }
    Ok(head)
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub seed: u64,
    pub split_seed: Option<u64>,
    pub train_fraction: Option<f64>,
    pub encoder_config_id: Option<String>,
    #[serde(flatten)]
    pub report: EvalReport,
    pub wall_clock_fields: Vec<String>,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalOutput> {
    let set = load_embeddings(cfg)?;
    let head = load_head(cfg, set.dim)?;
    let report = evaluate(&set, &head, cfg.eval.threshold)?.ok_or_else(|| CliError::Core {
        kind: ExitKind::Data,
        context: "selecting eval split".into(),
        source: adet_core::Error::DegenerateData("the eval split is empty".into()),
    })?;
    for (name, c) in &report.categories {
        if c.degenerate {
            eprintln!(
                "warning: category `{name}` has a single class in the eval split; AUROC undefined"
            );
        }
    }
    let out = EvalOutput {
        seed: cfg.seed,
        split_seed: set.split_seed,
        train_fraction: set.train_fraction,
        encoder_config_id: set.encoder_config_id.clone(),
        report,
        wall_clock_fields: vec![],
    };
    ensure_output_dir(cfg)?;
    write_json(&out, &cfg.output_dir.join("eval_report.json"))?;
    for (name, c) in &out.report.categories {
        println!(
            "{name}: AUROC {}",
            c.auroc.map_or("degenerate".into(), |a| format!("{a:.4}"))
        );
    }
    println!(
        "average AUROC {}",
        out.report
            .average_auroc
            .map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct BenchOutput {
    pub seed: u64,
    pub encoder_config_id: String,
    pub input_resolution: usize,
    pub embedding_dim: usize,
    #[serde(flatten)]
    pub report: BenchReport,
}

/// Deterministic test card: a colour gradient with a diagonal stripe.
fn bench_image(size: usize) -> DecodedImage {
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let stripe = if (x + y) % 16 < 2 { 255 } else { 0 };
            pixels.extend([
                (x * 255 / size.max(1)) as u8,
                (y * 255 / size.max(1)) as u8,
                stripe,
            ]);
        }
    }
    DecodedImage {
        width: size,
        height: size,
        channels: 3,
        pixels,
    }
}

/// Times preprocessing, encoding, pooling and scoring of one image.
pub fn bench(cfg: &RunConfig) -> Result<BenchOutput> {
    let (config, weights) = load_encoder(cfg)?;
    let pooling = cfg.encoder.pooling;
    let dim = pooling.embedding_dim(&config);
    let head = load_head(cfg, dim)?;
    let image = bench_image(config.input_resolution);
    let run = || -> adet_core::Result<f32> {
        let e = embed_image(&image, &config, &weights, pooling)?;
        let x = adet_core::Tensor::new(vec![1, dim], e)?;
        Ok(head_forward(&x, &head)?[0])
    };
    run().or_exit(ExitKind::Weights, || "benchmark dry run".into())?;
    let report = latency_bench(run, cfg.bench.warmup, cfg.bench.iterations)
        .or_exit(ExitKind::Config, || "benchmark".into())?
        .with_parameters(ParameterCounts::new(
            config.parameter_count(),
            head.parameter_count(),
        ));
    let out = BenchOutput {
        seed: cfg.seed,
        encoder_config_id: config.name.clone(),
        input_resolution: config.input_resolution,
        embedding_dim: dim,
        report,
    };
    ensure_output_dir(cfg)?;
    write_json(&out, &cfg.output_dir.join("bench_report.json"))?;
    println!(
        "{} iterations: p50 {:.3} ms, p95 {:.3} ms, max {:.3} ms; parameters {}M",
        out.report.iterations,
        out.report.p50_ms,
        out.report.p95_ms,
        out.report.max_ms,
        out.report.parameters_millions.as_deref().unwrap_or("?")
    );
    Ok(out)
}
