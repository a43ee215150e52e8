//! Image-level AUROC, confusion counts, parameter accounting and the latency
//! harness.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorMap;
use crate::error::{Error, Result};
use crate::head::AnomalyScore;

/// Probability that a random positive outranks a random negative, ties
/// counting one half (the Mann–Whitney statistic normalized by `P·N`).
///
/// Computed from midranks after one sort, which gives exactly the pair
/// count: every rank sum is a multiple of ½ and the single division is the
/// only rounding step.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auroc", "labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateData("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::DegenerateData("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateData(format!(
            "AUROC needs both classes (positives: {pos}, negatives: {neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of positives, kept integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j, midrank (i+1+j)/2
        let twice_mid = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2·R₊ − P(P+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Predicts anomalous iff `probability ≥ threshold`.
pub fn confusion_at_threshold(probabilities: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Total element count of the tensors whose names start with `prefix`.
pub fn count_parameters(tensors: &TensorMap, prefix: &str) -> u64 {
    tensors
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub encoder: u64,
    pub head: u64,
    pub total: u64,
}

impl ParameterCounts {
    pub fn new(encoder: u64, head: u64) -> Self {
        Self {
            encoder,
            head,
            total: encoder + head,
        }
    }

    /// Total in millions with two decimals, e.g. `"11.53"`.
    pub fn total_millions(&self) -> String {
        format!("{:.2}", self.total as f64 / 1e6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub iterations: usize,
    /// Timed iterations only, in milliseconds.
    pub durations_ms: Vec<f64>,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    pub parameters: Option<ParameterCounts>,
    pub parameters_millions: Option<String>,
    /// Fields holding wall-clock measurements; excluded when comparing runs.
    pub wall_clock_fields: Vec<String>,
}

/// Nearest-rank percentile: the `⌈p·n/100⌉`-th smallest value.
pub fn nearest_rank(sorted: &[f64], percent: u32) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let n = sorted.len();
    let rank = (percent as usize * n).div_ceil(100).clamp(1, n);
    sorted[rank - 1]
}

impl BenchReport {
    pub fn from_durations(warmup: usize, durations_ms: Vec<f64>) -> Result<Self> {
        if durations_ms.is_empty() {
            return Err(Error::Config(
                "benchmark needs at least one iteration".into(),
            ));
        }
        let mut sorted = durations_ms.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            warmup,
            iterations: durations_ms.len(),
            p50_ms: nearest_rank(&sorted, 50),
            p90_ms: nearest_rank(&sorted, 90),
            p95_ms: nearest_rank(&sorted, 95),
            max_ms: *sorted.last().unwrap(),
            mean_ms: durations_ms.iter().sum::<f64>() / durations_ms.len() as f64,
            durations_ms,
            parameters: None,
            parameters_millions: None,
            wall_clock_fields: [
                "durations_ms",
                "p50_ms",
                "p90_ms",
                "p95_ms",
                "max_ms",
                "mean_ms",
            ]
            .map(String::from)
            .to_vec(),
        })
    }

    pub fn with_parameters(mut self, counts: ParameterCounts) -> Self {
        self.parameters_millions = Some(counts.total_millions());
        self.parameters = Some(counts);
        self
    }
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Runs `warmup` discarded calls, then `iterations` calls each timed with
/// the monotonic clock. Benchmarks in one process never overlap.
pub fn latency_bench<T>(
    mut runner: impl FnMut() -> T,
    warmup: usize,
    iterations: usize,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Config(
            "benchmark needs at least one iteration".into(),
        ));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    for _ in 0..warmup {
        std::hint::black_box(runner());
    }
    let mut durations = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        std::hint::black_box(runner());
        durations.push(start.elapsed().as_secs_f64() * 1e3);
    }
    BenchReport::from_durations(warmup, durations)
}

/// One scored image in an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub category: String,
    pub label: u8,
    pub logit: f32,
    pub probability: f32,
    pub predicted: u8,
    /// `"<true> - <predicted>"`, 0 = normal, 1 = anomalous.
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    /// `None` when the category has a single class.
    pub auroc: Option<f64>,
    pub degenerate: bool,
    pub normal: usize,
    pub anomalous: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub sample_count: usize,
    pub categories: BTreeMap<String, CategoryResult>,
    /// Arithmetic mean of the non-degenerate per-category AUROCs.
    pub average_auroc: Option<f64>,
    /// AUROC over all images pooled together.
    pub overall_auroc: Option<f64>,
    pub confusion: Confusion,
    pub images: Vec<ImageResult>,
}

/// Input row for [`build_eval_report`].
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub id: String,
    pub category: String,
    pub label: u8,
    pub logit: f32,
}

/// Scores every sample, per category and pooled. AUROC is computed on
/// logits; thresholding uses probabilities.
pub fn build_eval_report(samples: &[ScoredSample], threshold: f64) -> EvalReport {
    let images: Vec<ImageResult> = samples
        .iter()
        .map(|s| {
            let score = AnomalyScore::from_logit(s.logit);
            let predicted = u8::from(score.probability as f64 >= threshold);
            ImageResult {
                id: s.id.clone(),
                category: s.category.clone(),
                label: s.label,
                logit: s.logit,
                probability: score.probability,
                predicted,
                annotation: format!("{} - {}", s.label, predicted),
            }
        })
        .collect();

    let mut by_cat: BTreeMap<&str, Vec<&ImageResult>> = BTreeMap::new();
    for r in &images {
        by_cat.entry(r.category.as_str()).or_default().push(r);
    }
    let eval = |rows: &[&ImageResult]| {
        let logits: Vec<f64> = rows.iter().map(|r| r.logit as f64).collect();
        let probs: Vec<f64> = rows.iter().map(|r| r.probability as f64).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        (
            auroc(&logits, &labels).ok(),
            confusion_at_threshold(&probs, &labels, threshold),
            labels,
        )
    };
    let categories: BTreeMap<String, CategoryResult> = by_cat
        .iter()
        .map(|(cat, rows)| {
            let (a, confusion, labels) = eval(rows);
            let anomalous = labels.iter().filter(|&&y| y == 1).count();
            (
                cat.to_string(),
                CategoryResult {
                    auroc: a,
                    degenerate: a.is_none(),
                    normal: labels.len() - anomalous,
                    anomalous,
                    confusion,
                },
            )
        })
        .collect();
    let valid: Vec<f64> = categories.values().filter_map(|c| c.auroc).collect();
    let average_auroc = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    let all: Vec<&ImageResult> = images.iter().collect();
    let (overall_auroc, confusion, _) = eval(&all);
    EvalReport {
        threshold,
        sample_count: images.len(),
        categories,
        average_auroc,
        overall_auroc,
        confusion,
        images,
    }
}
