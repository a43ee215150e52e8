//! Cached encoder outputs: one vector per sample, stored as container
//! entries `emb.000000`, `emb.000001`, … with sample ids, labels and split
//! assignments in the `embedding_set` metadata key.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Metadata, TensorContainer, TensorMap};
use crate::dataset::Split;
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const META_EMBEDDING_SET: &str = "embedding_set";
const ENTRY_PREFIX: &str = "emb.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub category: String,
    pub label: u8,
    pub split: Split,
}

/// Everything in the metadata key except the vectors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetHeader {
    dim: usize,
    count: usize,
    encoder_config_id: Option<String>,
    pooling: Option<Pooling>,
    split_seed: Option<u64>,
    train_fraction: Option<f64>,
    samples: Vec<EmbeddingRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
    /// Row-major `records.len() × dim`.
    pub vectors: Vec<f32>,
    pub encoder_config_id: Option<String>,
    pub pooling: Option<Pooling>,
    pub split_seed: Option<u64>,
    pub train_fraction: Option<f64>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if vectors.len() != records.len() * dim {
            return Err(Error::dim(
                "embedding set",
                "vectors",
                records.len() * dim,
                vectors.len(),
            ));
        }
        if records.iter().any(|r| r.label > 1) {
            return Err(Error::DegenerateData("labels must be 0 or 1".into()));
        }
        Ok(Self {
            dim,
            records,
            vectors,
            encoder_config_id: None,
            pooling: None,
            split_seed: None,
            train_fraction: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Indices of the samples assigned to `split`, in stored order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// The `|indices| × dim` matrix and labels for the given rows.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        if indices.is_empty() {
            return Err(Error::DegenerateData("no samples selected".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.vector(i));
        }
        let labels = indices.iter().map(|&i| self.records[i].label).collect();
        Ok((Tensor::new(vec![indices.len(), self.dim], data)?, labels))
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut tensors = TensorMap::new();
        for i in 0..self.len() {
            tensors.insert(
                format!("{ENTRY_PREFIX}{i:06}"),
                Tensor::new(vec![self.dim], self.vector(i).to_vec())?,
            );
        }
        let header = SetHeader {
            dim: self.dim,
            count: self.len(),
            encoder_config_id: self.encoder_config_id.clone(),
            pooling: self.pooling,
            split_seed: self.split_seed,
            train_fraction: self.train_fraction,
            samples: self.records.clone(),
        };
        let mut metadata = Metadata::new();
        metadata.insert(META_EMBEDDING_SET.into(), serde_json::to_string(&header)?);
        Ok(TensorContainer::new(tensors, metadata))
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let bad = |reason: String| Error::Weights {
            name: META_EMBEDDING_SET.into(),
            reason,
        };
        let text = c
            .metadata
            .get(META_EMBEDDING_SET)
            .ok_or_else(|| bad("container is not an embedding set".into()))?;
        let h: SetHeader = serde_json::from_str(text)?;
        if h.count != h.samples.len() || c.tensors.len() != h.count {
            return Err(bad(format!(
                "header lists {} samples and count {}, container holds {} tensors",
                h.samples.len(),
                h.count,
                c.tensors.len()
            )));
        }
        let mut vectors = Vec::with_capacity(h.count * h.dim);
        for i in 0..h.count {
            let name = format!("{ENTRY_PREFIX}{i:06}");
            let t = c.tensors.get(&name).ok_or_else(|| Error::Weights {
                name: name.clone(),
                reason: "missing".into(),
            })?;
            if t.shape() != [h.dim] {
                return Err(Error::Weights {
                    name,
                    reason: format!("expected shape [{}], found {:?}", h.dim, t.shape()),
                });
            }
            vectors.extend_from_slice(t.data());
        }
        let mut set = Self::new(h.dim, h.samples, vectors)?;
        set.encoder_config_id = h.encoder_config_id;
        set.pooling = h.pooling;
        set.split_seed = h.split_seed;
        set.train_fraction = h.train_fraction;
        Ok(set)
    }
}
