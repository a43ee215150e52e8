//! Anomaly score head: a stack of fully connected layers with ReLU between
//! them and a single output logit.
//!
//! No activation follows the last layer. The sigmoid is applied by the loss
//! and by inference reporting, which keeps negative logits meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Metadata, TensorContainer, TensorMap};
use crate::error::{Error, Result};
use crate::ops::{self, sigmoid_f64};
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "head.";
pub const META_HEAD_CONFIG: &str = "head_config";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    /// Widths of the `N_l − 1` hidden layers.
    pub hidden_dims: Vec<usize>,
}

impl HeadConfig {
    /// Two fully connected layers, hidden width `d`.
    pub fn mvtec(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![input_dim],
        }
    }

    /// Three fully connected layers, hidden widths `d` and `d / 2`.
    pub fn visa(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![input_dim, (input_dim / 2).max(1)],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `[d, hidden..., 1]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend(&self.hidden_dims);
        d.push(1);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> u64 {
        self.dims()
            .windows(2)
            .map(|w| (w[0] * w[1] + w[1]) as u64)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `out × in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub config: HeadConfig,
    pub layers: Vec<LinearLayer>,
}

/// The head's output for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub logit: f32,
    pub probability: f32,
}

impl AnomalyScore {
    pub fn from_logit(logit: f32) -> Self {
        Self {
            logit,
            probability: sigmoid_f64(logit as f64) as f32,
        }
    }
}

/// Seeded initialization: weights uniform in `±√(1/fan_in)`, biases zero.
pub fn head_init(config: &HeadConfig, seed: u64) -> Result<HeadWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config
        .dims()
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt() as f32;
            Ok(LinearLayer {
                weight: Tensor::from_fn(&[fan_out, fan_in], |_| rng.random_range(-bound..=bound))?,
                bias: Tensor::zeros(&[fan_out])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadWeights {
        config: config.clone(),
        layers,
    })
}

impl HeadWeights {
    pub fn new(config: HeadConfig, layers: Vec<LinearLayer>) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        if layers.len() != dims.len() - 1 {
            return Err(Error::Weights {
                name: "head".into(),
                reason: format!("expected {} layers, found {}", dims.len() - 1, layers.len()),
            });
        }
        for (i, (l, w)) in layers.iter().zip(dims.windows(2)).enumerate() {
            if l.weight.shape() != [w[1], w[0]] {
                return Err(Error::Weights {
                    name: format!("{HEAD_PREFIX}layers.{i}.weight"),
                    reason: format!(
                        "expected [{}, {}], found {:?}",
                        w[1],
                        w[0],
                        l.weight.shape()
                    ),
                });
            }
            if l.bias.shape() != [w[1]] {
                return Err(Error::Weights {
                    name: format!("{HEAD_PREFIX}layers.{i}.bias"),
                    reason: format!("expected [{}], found {:?}", w[1], l.bias.shape()),
                });
            }
        }
        Ok(Self { config, layers })
    }

    pub fn parameter_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.weight.numel() + l.bias.numel()) as u64)
            .sum()
    }

    /// Flattened views of every parameter tensor, in layer order
    /// (weight then bias).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
    }

    pub fn params(&self) -> impl Iterator<Item = &[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
    }

    /// `head.layers.{i}.weight` / `head.layers.{i}.bias`.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            m.insert(format!("{HEAD_PREFIX}layers.{i}.weight"), l.weight.clone());
            m.insert(format!("{HEAD_PREFIX}layers.{i}.bias"), l.bias.clone());
        }
        m
    }

    pub fn write_metadata(&self, meta: &mut Metadata) {
        meta.insert(
            META_HEAD_CONFIG.into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let text = c
            .metadata
            .get(META_HEAD_CONFIG)
            .ok_or_else(|| Error::Weights {
                name: META_HEAD_CONFIG.into(),
                reason: "container metadata has no head config".into(),
            })?;
        let config: HeadConfig = serde_json::from_str(text)?;
        let n = config.num_layers();
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let get = |part: &str| {
                let name = format!("{HEAD_PREFIX}layers.{i}.{part}");
                c.tensors.get(&name).cloned().ok_or(Error::Weights {
                    name,
                    reason: "missing".into(),
                })
            };
            layers.push(LinearLayer {
                weight: get("weight")?,
                bias: get("bias")?,
            });
        }
        let extra = c
            .tensors
            .keys()
            .filter(|k| k.starts_with(HEAD_PREFIX))
            .count();
        if extra != 2 * n {
            return Err(Error::Weights {
                name: HEAD_PREFIX.into(),
                reason: format!("expected {} head tensors, found {extra}", 2 * n),
            });
        }
        Self::new(config, layers)
    }
}

/// Pre- and post-activation values of every layer, kept for backprop.
pub(crate) struct ForwardTrace {
    /// `inputs[i]` is the input to layer `i` (after ReLU for `i > 0`).
    pub inputs: Vec<Tensor>,
    /// `pre[i]` is layer `i`'s output before ReLU (hidden layers only).
    pub pre: Vec<Tensor>,
    pub logits: Tensor,
}

pub(crate) fn forward_trace(batch: &Tensor, weights: &HeadWeights) -> Result<ForwardTrace> {
    if batch.rank() != 2 {
        return Err(Error::dim("head_forward", "batch rank", 2, batch.rank()));
    }
    if batch.shape()[1] != weights.config.input_dim {
        return Err(Error::dim(
            "head_forward",
            "embedding dim (axis 1)",
            weights.config.input_dim,
            batch.shape()[1],
        ));
    }
    let last = weights.layers.len() - 1;
    let mut inputs = Vec::with_capacity(weights.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut x = batch.clone();
    for (i, l) in weights.layers.iter().enumerate() {
        let y = ops::linear(&x, &l.weight, Some(&l.bias))?;
        inputs.push(x);
        if i == last {
            return Ok(ForwardTrace {
                inputs,
                pre,
                logits: y,
            });
        }
        x = y.map(ops::relu);
        pre.push(y);
    }
    unreachable!("head has at least one layer")
}

/// Logits for an `N × d` batch of embeddings.
pub fn head_forward(batch: &Tensor, weights: &HeadWeights) -> Result<Vec<f32>> {
    Ok(forward_trace(batch, weights)?.logits.into_data())
}

/// Stacks embedding vectors into an `N × d` tensor.
pub fn stack_embeddings(rows: &[&[f32]]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || d == 0 {
        return Err(Error::DegenerateData("empty embedding batch".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::dim("stack_embeddings", "embedding dim", d, r.len()));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), d], data)
}
