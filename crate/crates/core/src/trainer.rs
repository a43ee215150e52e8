//! Supervised training of the score head on frozen embeddings.
//!
//! The objective is the class-weighted binary cross-entropy on logits,
//!
//! ```text
//! L = −(1/N) Σ [ w·y·log σ(s) + (1−y)·log(1−σ(s)) ]
//!   =  (1/N) Σ [ w·y·softplus(−s) + (1−y)·softplus(s) ]
//! ```
//!
//! where `w = #negatives / #positives` multiplies positive samples only. The
//! second form is what is evaluated, so saturated logits never produce NaN.
//! Parameters are updated with bias-corrected Adam; there is no schedule,
//! weight decay or early stopping.

use std::time::Instant;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::fisher_yates;
use crate::error::{Error, Result};
use crate::head::{self, head_init, HeadConfig, HeadWeights, LinearLayer};
use crate::ops::sigmoid_f64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Replaces the negative/positive ratio as the positive-class weight.
    pub class_weight_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 35,
            learning_rate: 1e-2,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            class_weight_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if let Some(w) = self.class_weight_override {
            if !(w > 0.0 && w.is_finite()) {
                return bad("class_weight_override must be a positive finite number");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Ratio of negative to positive labels.
pub fn class_weight(labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::DegenerateData("labels must be 0 or 1".into()));
    }
    if pos == 0 {
        return Err(Error::DegenerateData(
            "no positive samples; class weight is undefined".into(),
        ));
    }
    if neg == 0 {
        return Err(Error::DegenerateData(
            "no negative samples; class weight would be zero".into(),
        ));
    }
    Ok(neg as f64 / pos as f64)
}

/// Logits, labels and the positive-class weight for one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    logits: &'a [f32],
    labels: &'a [u8],
    pos_weight: f64,
}

impl<'a> LossBatch<'a> {
    pub fn new(logits: &'a [f32], labels: &'a [u8], pos_weight: f64) -> Result<Self> {
        if logits.len() != labels.len() {
            return Err(Error::dim("loss", "labels", logits.len(), labels.len()));
        }
        if logits.is_empty() {
            return Err(Error::DegenerateData("empty loss batch".into()));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::DegenerateData("labels must be 0 or 1".into()));
        }
        if pos_weight.is_nan() || pos_weight <= 0.0 {
            return Err(Error::Config(format!(
                "positive weight must be > 0, got {pos_weight}"
            )));
        }
        Ok(Self {
            logits,
            labels,
            pos_weight,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn wbce_loss(batch: &LossBatch) -> f64 {
    let sum: f64 = batch
        .logits
        .iter()
        .zip(batch.labels)
        .map(|(&s, &y)| {
            let s = s as f64;
            if y == 1 {
                batch.pos_weight * softplus(-s)
            } else {
                softplus(s)
            }
        })
        .sum();
    sum / batch.len() as f64
}

/// `∂L/∂sᵢ = (1/N)·[w·yᵢ·(σ(sᵢ) − 1) + (1 − yᵢ)·σ(sᵢ)]`.
pub fn wbce_grad_logits(batch: &LossBatch) -> Vec<f32> {
    let n = batch.len() as f64;
    batch
        .logits
        .iter()
        .zip(batch.labels)
        .map(|(&s, &y)| {
            let p = sigmoid_f64(s as f64);
            let g = if y == 1 {
                batch.pos_weight * (p - 1.0)
            } else {
                p
            };
            (g / n) as f32
        })
        .collect()
}

/// Gradients for every head tensor, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub layers: Vec<LinearLayer>,
}

impl HeadGradients {
    pub fn params(&self) -> impl Iterator<Item = &[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
    }
}

/// Reverse-mode gradients of `Σₙ grad_logits[n] · logit[n]` with respect to
/// every head parameter. The ReLU subgradient at 0 is 0.
pub fn head_backward(
    batch: &Tensor,
    weights: &HeadWeights,
    grad_logits: &[f32],
) -> Result<HeadGradients> {
    let trace = head::forward_trace(batch, weights)?;
    let n = batch.shape()[0];
    if grad_logits.len() != n {
        return Err(Error::dim(
            "head_backward",
            "grad_logits",
            n,
            grad_logits.len(),
        ));
    }
    let mut grad = grad_logits.to_vec(); // N × out, row-major
    let mut out_dim = 1;
    let mut layers = Vec::with_capacity(weights.layers.len());
    for (i, layer) in weights.layers.iter().enumerate().rev() {
        let x = &trace.inputs[i];
        let in_dim = x.shape()[1];
        let xd = x.data();

        let mut dw = vec![0.0f32; out_dim * in_dim];
        let mut db = vec![0.0f32; out_dim];
        for s in 0..n {
            let xs = &xd[s * in_dim..(s + 1) * in_dim];
            for o in 0..out_dim {
                let g = grad[s * out_dim + o];
                db[o] += g;
                if g != 0.0 {
                    for (d, &xv) in dw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xs) {
                        *d += g * xv;
                    }
                }
            }
        }
        layers.push(LinearLayer {
            weight: Tensor::new(vec![out_dim, in_dim], dw)?,
            bias: Tensor::new(vec![out_dim], db)?,
        });

        if i > 0 {
            let w = layer.weight.data();
            let pre = trace.pre[i - 1].data();
            let mut prev = vec![0.0f32; n * in_dim];
            for s in 0..n {
                let dst = &mut prev[s * in_dim..(s + 1) * in_dim];
                for o in 0..out_dim {
                    let g = grad[s * out_dim + o];
                    for (d, &wv) in dst.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *d += g * wv;
                    }
                }
                for (d, &p) in dst.iter_mut().zip(&pre[s * in_dim..(s + 1) * in_dim]) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            grad = prev;
            out_dim = in_dim;
        }
    }
    layers.reverse();
    Ok(HeadGradients { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates per parameter tensor, plus the step
/// counter `t` (number of completed updates).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a [T]>) -> Self
    where
        T: 'a,
    {
        let m: Vec<Vec<T>> = params
            .into_iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// t ← t + 1
/// m ← β₁·m + (1 − β₁)·g
/// v ← β₂·v + (1 − β₂)·g²
/// θ ← θ − α · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
/// ```
pub fn adam_step<'p, 'g, T: Float + 'p + 'g>(
    params: impl IntoIterator<Item = &'p mut [T]>,
    grads: impl IntoIterator<Item = &'g [T]>,
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    let c = |x: f64| T::from(x).expect("f64 converts to float type");
    let (lr, b1, b2, eps) = (
        c(config.learning_rate),
        c(config.beta1),
        c(config.beta2),
        c(config.epsilon),
    );
    let t = state.t + 1;
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let bc1 = T::one() - b1.powi(exp);
    let bc2 = T::one() - b2.powi(exp);
    let mut count = 0;
    for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let (Some(m), Some(v)) = (state.m.get_mut(k), state.v.get_mut(k)) else {
            return Err(Error::dim("adam_step", "state tensors", k, k + 1));
        };
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::dim(
                "adam_step",
                format!("tensor {k}"),
                p.len(),
                g.len(),
            ));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        count += 1;
    }
    if count != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            "parameter tensors",
            state.m.len(),
            count,
        ));
    }
    state.t = t;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Wall-clock time of the epoch; not part of determinism checks.
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: HeadWeights,
    pub history: Vec<EpochRecord>,
    pub class_weight: f64,
    /// Full-data loss of the initial weights.
    pub initial_loss: f64,
}

/// Trains a freshly initialized head.
///
/// Initialization uses `seed`; each epoch visits the samples in an order
/// produced by Fisher–Yates on a ChaCha8 stream seeded with `seed` (stream
/// 1), then updates once per mini-batch. An epoch's loss is the
/// sample-weighted mean of its mini-batch losses.
pub fn train_head(
    embeddings: &Tensor,
    labels: &[u8],
    head_config: &HeadConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::dim(
            "train_head",
            "embeddings",
            format!("[{}, d]", labels.len()),
            format!("{:?}", embeddings.shape()),
        ));
    }
    let weight_w = match config.class_weight_override {
        Some(w) => {
            class_weight(labels)?;
            w
        }
        None => class_weight(labels)?,
    };

    let mut weights = head_init(head_config, config.seed)?;
    let initial_loss = wbce_loss(&LossBatch::new(
        &head::head_forward(embeddings, &weights)?,
        labels,
        weight_w,
    )?);

    let adam = config.adam();
    let mut state = AdamState::<f32>::zeros_like(weights.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let n = labels.len();
    let d = embeddings.shape()[1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        fisher_yates(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            let mut yb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(&embeddings.data()[i * d..(i + 1) * d]);
                yb.push(labels[i]);
            }
            let xb = Tensor::new(vec![chunk.len(), d], xb)?;
            let logits = head::head_forward(&xb, &weights)?;
            let batch = LossBatch::new(&logits, &yb, weight_w)?;
            loss_sum += wbce_loss(&batch) * chunk.len() as f64;
            let grads = head_backward(&xb, &weights, &wbce_grad_logits(&batch))?;
            adam_step(weights.params_mut(), grads.params(), &mut state, &adam)?;
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome {
        weights,
        history,
        class_weight: weight_w,
        initial_loss,
    })
}
