//! Frozen hybrid conv/transformer image encoder.
//!
//! Graph: a two-convolution stem (total stride 4), a run of inverted-residual
//! conv stages, a run of windowed-attention transformer stages, and a neck of
//! two convolutions each followed by a channel LayerNorm. Consecutive stages
//! are joined by a patch-merging block whose depthwise convolution carries
//! the stage's downsampling stride.
//!
//! Every convolution that upstream follows with a BatchNorm is stored with
//! the BatchNorm folded into its weight and bias (`<name>.c.weight`,
//! `<name>.c.bias`). The full naming scheme is listed in `docs/weights.md`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Metadata, TensorContainer, TensorMap};
use crate::dataset::DecodedImage;
use crate::error::{Error, Result};
use crate::ops::{self, Activation, Conv2dParams};
use crate::tensor::Tensor;

/// Container-name prefix for encoder tensors.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const META_ENCODER_CONFIG: &str = "encoder_config";
pub const META_ENCODER_CONFIG_ID: &str = "encoder_config_id";

const TRANSFORMER_NORM_EPS: f32 = 1e-5;
const NECK_NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageKind {
    /// Inverted-residual blocks: 1×1 expand, 3×3 depthwise, 1×1 project.
    Conv { expand_ratio: usize },
    /// Windowed self-attention blocks with a learned relative-offset bias,
    /// a depthwise 3×3 local convolution, and an MLP.
    Attention {
        num_heads: usize,
        window_size: usize,
        mlp_ratio: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub dim: usize,
    pub depth: usize,
    #[serde(flatten)]
    pub kind: StageKind,
    /// Stride of the patch-merging block that leads into the next stage.
    /// `None` on the last stage, which has no merging block.
    pub downsample_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub name: String,
    /// Square input side `S` in pixels.
    pub input_resolution: usize,
    pub stages: Vec<StageConfig>,
    /// Channels `C_e` of the output feature map.
    pub out_channels: usize,
    /// Per-channel normalization on 0..=255 pixel values.
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

const SAM_PIXEL_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
const SAM_PIXEL_STD: [f32; 3] = [58.395, 57.12, 57.375];

impl EncoderConfig {
    /// CI-sized config: S = 64, R = 16, C_e = 32, two conv blocks followed by
    /// two transformer blocks.
    pub fn tiny_test() -> Self {
        Self {
            name: "tiny-test".into(),
            input_resolution: 64,
            stages: vec![
                StageConfig {
                    dim: 16,
                    depth: 2,
                    kind: StageKind::Conv { expand_ratio: 4 },
                    downsample_stride: Some(2),
                },
                StageConfig {
                    dim: 24,
                    depth: 1,
                    kind: StageKind::Attention {
                        num_heads: 2,
                        window_size: 4,
                        mlp_ratio: 4,
                    },
                    downsample_stride: Some(2),
                },
                // 4×4 grid with a 3×3 window exercises the pad-and-crop path.
                StageConfig {
                    dim: 32,
                    depth: 1,
                    kind: StageKind::Attention {
                        num_heads: 2,
                        window_size: 3,
                        mlp_ratio: 4,
                    },
                    downsample_stride: None,
                },
            ],
            out_channels: 32,
            pixel_mean: SAM_PIXEL_MEAN,
            pixel_std: SAM_PIXEL_STD,
        }
    }

    /// The upstream mobile image encoder: S = 1024, R = 16, C_e = 256.
    pub fn mobilesam_v1() -> Self {
        let attn = |dim, depth, num_heads, window_size, stride| StageConfig {
            dim,
            depth,
            kind: StageKind::Attention {
                num_heads,
                window_size,
                mlp_ratio: 4,
            },
            downsample_stride: stride,
        };
        Self {
            name: "mobilesam-v1".into(),
            input_resolution: 1024,
            stages: vec![
                StageConfig {
                    dim: 64,
                    depth: 2,
                    kind: StageKind::Conv { expand_ratio: 4 },
                    downsample_stride: Some(2),
                },
                attn(128, 2, 4, 7, Some(2)),
                attn(160, 6, 5, 14, Some(1)),
                attn(320, 2, 10, 7, None),
            ],
            out_channels: 256,
            pixel_mean: SAM_PIXEL_MEAN,
            pixel_std: SAM_PIXEL_STD,
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "tiny-test" => Some(Self::tiny_test()),
            "mobilesam-v1" => Some(Self::mobilesam_v1()),
            _ => None,
        }
    }

    /// Spatial reduction factor `R` between input and output.
    pub fn reduction(&self) -> usize {
        4 * self
            .stages
            .iter()
            .filter_map(|s| s.downsample_stride)
            .product::<usize>()
    }

    /// Output feature map shape `C_e × S/R × S/R`.
    pub fn output_shape(&self) -> [usize; 3] {
        let g = self.input_resolution / self.reduction();
        [self.out_channels, g, g]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::Config(format!(
                "encoder config `{}`: {m}",
                self.name
            )))
        };
        if self.input_resolution == 0 || self.out_channels == 0 {
            return bad("input_resolution and out_channels must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if !matches!(self.stages[0].kind, StageKind::Conv { .. }) {
            return bad("the first stage must be a conv stage".into());
        }
        if !self.stages[0].dim.is_multiple_of(2) {
            return bad("first stage dim must be even (stem halves it)".into());
        }
        let mut seen_attention = false;
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.depth == 0 {
                return bad(format!("stage {i}: dim and depth must be positive"));
            }
            match s.kind {
                StageKind::Conv { expand_ratio } => {
                    if seen_attention {
                        return bad(format!("stage {i}: conv stage after a transformer stage"));
                    }
                    if expand_ratio == 0 {
                        return bad(format!("stage {i}: expand_ratio must be positive"));
                    }
                }
                StageKind::Attention {
                    num_heads,
                    window_size,
                    mlp_ratio,
                } => {
                    seen_attention = true;
                    if num_heads == 0 || s.dim % num_heads != 0 {
                        return bad(format!(
                            "stage {i}: dim {} not divisible by heads {num_heads}",
                            s.dim
                        ));
                    }
                    if window_size == 0 || mlp_ratio == 0 {
                        return bad(format!(
                            "stage {i}: window_size and mlp_ratio must be positive"
                        ));
                    }
                }
            }
            let last = i + 1 == self.stages.len();
            match (last, s.downsample_stride) {
                (true, Some(_)) => return bad("the last stage cannot downsample".into()),
                (false, None) => return bad(format!("stage {i}: downsample_stride required")),
                (false, Some(0)) => return bad(format!("stage {i}: stride must be positive")),
                _ => {}
            }
        }
        if !self.input_resolution.is_multiple_of(self.reduction()) {
            return bad(format!(
                "input_resolution {} not divisible by reduction {}",
                self.input_resolution,
                self.reduction()
            ));
        }
        if self.pixel_std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return bad("pixel_std components must be finite and nonzero".into());
        }
        Ok(())
    }

    /// Every tensor the config requires, with its exact shape, in graph order.
    pub fn weight_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<(String, Vec<usize>)>, name: String, o, i, k| {
            specs.push((format!("{name}.c.weight"), vec![o, i, k, k]));
            specs.push((format!("{name}.c.bias"), vec![o]));
        };
        let d0 = self.stages[0].dim;
        conv(&mut specs, "patch_embed.seq.0".into(), d0 / 2, 3, 3);
        conv(&mut specs, "patch_embed.seq.2".into(), d0, d0 / 2, 3);
        for (si, stage) in self.stages.iter().enumerate() {
            let d = stage.dim;
            for b in 0..stage.depth {
                let p = format!("layers.{si}.blocks.{b}");
                match stage.kind {
                    StageKind::Conv { expand_ratio } => {
                        let h = d * expand_ratio;
                        conv(&mut specs, format!("{p}.conv1"), h, d, 1);
                        conv(&mut specs, format!("{p}.conv2"), h, 1, 3);
                        conv(&mut specs, format!("{p}.conv3"), d, h, 1);
                    }
                    StageKind::Attention {
                        num_heads,
                        window_size,
                        mlp_ratio,
                    } => {
                        let kd = d / num_heads;
                        specs.push((format!("{p}.attn.norm.weight"), vec![d]));
                        specs.push((format!("{p}.attn.norm.bias"), vec![d]));
                        specs.push((format!("{p}.attn.qkv.weight"), vec![num_heads * 3 * kd, d]));
                        specs.push((format!("{p}.attn.qkv.bias"), vec![num_heads * 3 * kd]));
                        specs.push((
                            format!("{p}.attn.attention_biases"),
                            vec![num_heads, window_size * window_size],
                        ));
                        specs.push((format!("{p}.attn.proj.weight"), vec![d, num_heads * kd]));
                        specs.push((format!("{p}.attn.proj.bias"), vec![d]));
                        conv(&mut specs, format!("{p}.local_conv"), d, 1, 3);
                        let hidden = d * mlp_ratio;
                        specs.push((format!("{p}.mlp.norm.weight"), vec![d]));
                        specs.push((format!("{p}.mlp.norm.bias"), vec![d]));
                        specs.push((format!("{p}.mlp.fc1.weight"), vec![hidden, d]));
                        specs.push((format!("{p}.mlp.fc1.bias"), vec![hidden]));
                        specs.push((format!("{p}.mlp.fc2.weight"), vec![d, hidden]));
                        specs.push((format!("{p}.mlp.fc2.bias"), vec![d]));
                    }
                }
            }
            if stage.downsample_stride.is_some() {
                let o = self.stages[si + 1].dim;
                let p = format!("layers.{si}.downsample");
                conv(&mut specs, format!("{p}.conv1"), o, d, 1);
                conv(&mut specs, format!("{p}.conv2"), o, 1, 3);
                conv(&mut specs, format!("{p}.conv3"), o, o, 1);
            }
        }
        let last = self.stages.last().expect("validated").dim;
        let ce = self.out_channels;
        specs.push(("neck.0.weight".into(), vec![ce, last, 1, 1]));
        specs.push(("neck.1.weight".into(), vec![ce]));
        specs.push(("neck.1.bias".into(), vec![ce]));
        specs.push(("neck.2.weight".into(), vec![ce, ce, 3, 3]));
        specs.push(("neck.3.weight".into(), vec![ce]));
        specs.push(("neck.3.bias".into(), vec![ce]));
        specs
    }

    pub fn parameter_count(&self) -> u64 {
        self.weight_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Reads the config stored in container metadata.
    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let text = meta
            .get(META_ENCODER_CONFIG)
            .ok_or_else(|| Error::Weights {
                name: META_ENCODER_CONFIG.into(),
                reason: "container metadata has no encoder config".into(),
            })?;
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_metadata(&self, meta: &mut Metadata) {
        meta.insert(
            META_ENCODER_CONFIG.into(),
            serde_json::to_string(self).expect("config serializes"),
        );
        meta.insert(META_ENCODER_CONFIG_ID.into(), self.name.clone());
    }
}

/// Named encoder tensors, without the container prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    tensors: TensorMap,
}

impl EncoderWeights {
    /// Checks that exactly the tensors `config` requires are present, each
    /// with its expected shape.
    pub fn new(config: &EncoderConfig, tensors: TensorMap) -> Result<Self> {
        config.validate()?;
        let specs = config.weight_specs();
        for (name, shape) in &specs {
            match tensors.get(name) {
                None => {
                    return Err(Error::Weights {
                        name: name.clone(),
                        reason: "missing".into(),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Weights {
                        name: name.clone(),
                        reason: format!("expected shape {shape:?}, found {:?}", t.shape()),
                    })
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Weights {
                        name: name.clone(),
                        reason: "non-finite values".into(),
                    })
                }
                _ => {}
            }
        }
        if tensors.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> =
                specs.iter().map(|(n, _)| n.as_str()).collect();
            let extra = tensors
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .expect("count mismatch implies an unknown name");
            return Err(Error::Weights {
                name: extra.clone(),
                reason: format!("not used by config `{}`", config.name),
            });
        }
        Ok(Self { tensors })
    }

    /// Seeded weights: conv/linear weights uniform in `±√(1/fan_in)`,
    /// norm scales 1, every bias and the attention offset tables 0.
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = TensorMap::new();
        for (name, shape) in config.weight_specs() {
            let t = if name.ends_with(".bias") || name.ends_with("attention_biases") {
                Tensor::zeros(&shape)?
            } else if shape.len() == 1 {
                Tensor::full(&shape, 1.0)?
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt() as f32;
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))?
            };
            tensors.insert(name, t);
        }
        Self::new(config, tensors)
    }

    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        let tensors = config
            .weight_specs()
            .into_iter()
            .map(|(n, s)| Ok((n, Tensor::zeros(&s)?)))
            .collect::<Result<TensorMap>>()?;
        Self::new(config, tensors)
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    fn get(&self, name: &str) -> &Tensor {
        // Presence is guaranteed by `new`.
        &self.tensors[name]
    }

    /// Loads config and weights from a container holding `encoder.*` tensors.
    pub fn from_container(container: &TensorContainer) -> Result<(EncoderConfig, Self)> {
        let config = EncoderConfig::from_metadata(&container.metadata)?;
        let weights = Self::new(&config, container.with_prefix(ENCODER_PREFIX))?;
        Ok((config, weights))
    }

    /// Container tensors (`encoder.` prefixed) plus config metadata.
    pub fn to_container(&self, config: &EncoderConfig) -> TensorContainer {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (format!("{ENCODER_PREFIX}{k}"), v.clone()))
            .collect();
        let mut metadata = BTreeMap::new();
        config.write_metadata(&mut metadata);
        metadata.insert("model".into(), "image-encoder".into());
        TensorContainer::new(tensors, metadata)
    }
}

/// A pooled encoder output `E ∈ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Spatial average, `d = C_e`.
    #[default]
    Mean,
    /// Row-major flatten, `d = C_e · h · w`.
    Flatten,
}

impl Pooling {
    pub fn embedding_dim(self, config: &EncoderConfig) -> usize {
        let [c, h, w] = config.output_shape();
        match self {
            Pooling::Mean => c,
            Pooling::Flatten => c * h * w,
        }
    }
}

/// Bilinear resize to `resolution × resolution` (half-pixel centers, no
/// antialiasing), grayscale replicated to three channels, then
/// `(pixel − mean) / std` per channel. Returns `1 × 3 × S × S`.
pub fn preprocess_image(
    image: &DecodedImage,
    resolution: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<Tensor> {
    if std.contains(&0.0) {
        return Err(Error::Config("normalization std must be nonzero".into()));
    }
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    if c != 1 && c != 3 {
        return Err(Error::dim("preprocess", "channels", "1 or 3", c));
    }
    let s = resolution;
    let axis = |out: usize, extent: usize| -> Vec<(usize, usize, f64)> {
        let scale = extent as f64 / s as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(extent - 1);
                let i1 = (i0 + 1).min(extent - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(s, h);
    let xs = axis(s, w);
    let px = |y: usize, x: usize, ch: usize| image.pixels[(y * w + x) * c + ch] as f64;
    let mut out = vec![0.0f32; 3 * s * s];
    for ch in 0..3 {
        let src_ch = if c == 1 { 0 } else { ch };
        let (m, sd) = (mean[ch] as f64, std[ch] as f64);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = px(y0, x0, src_ch) * (1.0 - lx) + px(y0, x1, src_ch) * lx;
                let bottom = px(y1, x0, src_ch) * (1.0 - lx) + px(y1, x1, src_ch) * lx;
                let v = top * (1.0 - ly) + bottom * ly;
                out[(ch * s + oy) * s + ox] = ((v - m) / sd) as f32;
            }
        }
    }
    Tensor::new(vec![1, 3, s, s], out)
}

/// Forward pass `1 × 3 × S × S → C_e × S/R × S/R`.
pub fn encode(x: &Tensor, config: &EncoderConfig, weights: &EncoderWeights) -> Result<Tensor> {
    let s = config.input_resolution;
    if x.shape() != [1, 3, s, s] {
        return Err(Error::dim(
            "encode",
            "input",
            format!("[1, 3, {s}, {s}]"),
            format!("{:?}", x.shape()),
        ));
    }
    let w = weights;
    let mut fmap = conv_bn(x, w, "patch_embed.seq.0", Conv2dParams::new(2, 1, 1))?;
    fmap = ops::activation(&fmap, Activation::Gelu);
    fmap = conv_bn(&fmap, w, "patch_embed.seq.2", Conv2dParams::new(2, 1, 1))?;

    for (si, stage) in config.stages.iter().enumerate() {
        for b in 0..stage.depth {
            let p = format!("layers.{si}.blocks.{b}");
            fmap = match stage.kind {
                StageKind::Conv { .. } => inverted_residual(&fmap, w, &p)?,
                StageKind::Attention {
                    num_heads,
                    window_size,
                    ..
                } => transformer_block(&fmap, w, &p, stage.dim, num_heads, window_size)?,
            };
        }
        if let Some(stride) = stage.downsample_stride {
            fmap = patch_merging(&fmap, w, &format!("layers.{si}.downsample"), stride)?;
        }
    }

    fmap = ops::conv2d(&fmap, w.get("neck.0.weight"), None, Conv2dParams::default())?;
    fmap = channel_norm(&fmap, w.get("neck.1.weight"), w.get("neck.1.bias"))?;
    fmap = ops::conv2d(
        &fmap,
        w.get("neck.2.weight"),
        None,
        Conv2dParams::new(1, 1, 1),
    )?;
    fmap = channel_norm(&fmap, w.get("neck.3.weight"), w.get("neck.3.bias"))?;
    let [c, h, wd] = [fmap.shape()[1], fmap.shape()[2], fmap.shape()[3]];
    fmap.reshape(&[c, h, wd])
}

fn conv_bn(x: &Tensor, w: &EncoderWeights, name: &str, mut params: Conv2dParams) -> Result<Tensor> {
    let weight = w.get(&format!("{name}.c.weight"));
    if weight.shape()[1] == 1 && x.shape()[1] != 1 {
        params.groups = x.shape()[1];
    }
    ops::conv2d(x, weight, Some(w.get(&format!("{name}.c.bias"))), params)
}

fn add_inplace(a: &mut Tensor, b: &Tensor) {
    debug_assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn inverted_residual(x: &Tensor, w: &EncoderWeights, p: &str) -> Result<Tensor> {
    let mut y = conv_bn(x, w, &format!("{p}.conv1"), Conv2dParams::default())?;
    y = ops::activation(&y, Activation::Gelu);
    y = conv_bn(&y, w, &format!("{p}.conv2"), Conv2dParams::new(1, 1, 1))?;
    y = ops::activation(&y, Activation::Gelu);
    y = conv_bn(&y, w, &format!("{p}.conv3"), Conv2dParams::default())?;
    add_inplace(&mut y, x);
    Ok(ops::activation(&y, Activation::Gelu))
}

fn patch_merging(x: &Tensor, w: &EncoderWeights, p: &str, stride: usize) -> Result<Tensor> {
    let mut y = conv_bn(x, w, &format!("{p}.conv1"), Conv2dParams::default())?;
    y = ops::activation(&y, Activation::Gelu);
    y = conv_bn(
        &y,
        w,
        &format!("{p}.conv2"),
        Conv2dParams::new(stride, 1, 1),
    )?;
    y = ops::activation(&y, Activation::Gelu);
    conv_bn(&y, w, &format!("{p}.conv3"), Conv2dParams::default())
}

/// `1 × C × H × W → (H·W) × C`.
fn to_tokens(fmap: &Tensor) -> Result<Tensor> {
    let (c, hw) = (fmap.shape()[1], fmap.shape()[2] * fmap.shape()[3]);
    let src = fmap.data();
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            out[i * c + ch] = src[ch * hw + i];
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// `(H·W) × C → 1 × C × H × W`.
fn to_fmap(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let c = tokens.shape()[1];
    let hw = h * w;
    let src = tokens.data();
    let mut out = vec![0.0f32; c * hw];
    for i in 0..hw {
        for ch in 0..c {
            out[ch * hw + i] = src[i * c + ch];
        }
    }
    Tensor::new(vec![1, c, h, w], out)
}

/// LayerNorm across channels at every spatial position.
fn channel_norm(fmap: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (fmap.shape()[1], fmap.shape()[2], fmap.shape()[3]);
    let t = ops::layer_norm(&to_tokens(fmap)?, c, gamma, beta, NECK_NORM_EPS)?;
    to_fmap(&t, h, w)
}

fn transformer_block(
    fmap: &Tensor,
    w: &EncoderWeights,
    p: &str,
    dim: usize,
    heads: usize,
    window: usize,
) -> Result<Tensor> {
    let (h, wd) = (fmap.shape()[2], fmap.shape()[3]);
    let mut tokens = to_tokens(fmap)?;
    let attn = window_attention(&tokens, h, wd, w, &format!("{p}.attn"), dim, heads, window)?;
    add_inplace(&mut tokens, &attn);

    let local = conv_bn(
        &to_fmap(&tokens, h, wd)?,
        w,
        &format!("{p}.local_conv"),
        Conv2dParams::new(1, 1, 1),
    )?;
    let mut tokens = to_tokens(&local)?;

    let mut m = ops::layer_norm(
        &tokens,
        dim,
        w.get(&format!("{p}.mlp.norm.weight")),
        w.get(&format!("{p}.mlp.norm.bias")),
        TRANSFORMER_NORM_EPS,
    )?;
    m = ops::linear(
        &m,
        w.get(&format!("{p}.mlp.fc1.weight")),
        Some(w.get(&format!("{p}.mlp.fc1.bias"))),
    )?;
    m = ops::activation(&m, Activation::Gelu);
    m = ops::linear(
        &m,
        w.get(&format!("{p}.mlp.fc2.weight")),
        Some(w.get(&format!("{p}.mlp.fc2.bias"))),
    )?;
    add_inplace(&mut tokens, &m);
    to_fmap(&tokens, h, wd)
}

/// Bias table lookup for one window: entry `(i, j)` uses the offset
/// `|Δy| · window + |Δx|` between token positions `i` and `j`.
pub(crate) fn window_bias(table: &Tensor, heads: usize, window: usize) -> Result<Tensor> {
    let n = window * window;
    let t = table.data();
    let mut out = Vec::with_capacity(heads * n * n);
    for hd in 0..heads {
        for i in 0..n {
            let (yi, xi) = (i / window, i % window);
            for j in 0..n {
                let (yj, xj) = (j / window, j % window);
                out.push(t[hd * n + yi.abs_diff(yj) * window + xi.abs_diff(xj)]);
            }
        }
    }
    Tensor::new(vec![heads, n, n], out)
}

/// Self-attention within non-overlapping `window × window` tiles. The token
/// grid is zero-padded at the bottom/right to a multiple of the window and
/// cropped back afterwards.
#[allow(clippy::too_many_arguments)]
fn window_attention(
    tokens: &Tensor,
    h: usize,
    w: usize,
    weights: &EncoderWeights,
    p: &str,
    dim: usize,
    heads: usize,
    window: usize,
) -> Result<Tensor> {
    let bias = window_bias(weights.get(&format!("{p}.attention_biases")), heads, window)?;
    let (ph, pw) = (h.next_multiple_of(window), w.next_multiple_of(window));
    let n = window * window;
    let src = tokens.data();
    let mut out = vec![0.0f32; h * w * dim];
    for wy in 0..ph / window {
        for wx in 0..pw / window {
            let mut win = vec![0.0f32; n * dim];
            for i in 0..n {
                let (y, x) = (wy * window + i / window, wx * window + i % window);
                if y < h && x < w {
                    let s = (y * w + x) * dim;
                    win[i * dim..(i + 1) * dim].copy_from_slice(&src[s..s + dim]);
                }
            }
            let res = attention(
                &Tensor::new(vec![n, dim], win)?,
                weights,
                p,
                dim,
                heads,
                &bias,
            )?;
            for i in 0..n {
                let (y, x) = (wy * window + i / window, wx * window + i % window);
                if y < h && x < w {
                    let d = (y * w + x) * dim;
                    out[d..d + dim].copy_from_slice(&res.data()[i * dim..(i + 1) * dim]);
                }
            }
        }
    }
    Tensor::new(vec![h * w, dim], out)
}

/// Multi-head attention over one window of `N` tokens. The fused qkv
/// projection is laid out per head as `[q (kd) | k (kd) | v (kd)]`.
fn attention(
    x: &Tensor,
    w: &EncoderWeights,
    p: &str,
    dim: usize,
    heads: usize,
    bias: &Tensor,
) -> Result<Tensor> {
    let n = x.shape()[0];
    let kd = dim / heads;
    let xn = ops::layer_norm(
        x,
        dim,
        w.get(&format!("{p}.norm.weight")),
        w.get(&format!("{p}.norm.bias")),
        TRANSFORMER_NORM_EPS,
    )?;
    let qkv = ops::linear(
        &xn,
        w.get(&format!("{p}.qkv.weight")),
        Some(w.get(&format!("{p}.qkv.bias"))),
    )?;
    let row = heads * 3 * kd;
    let split = |part: usize| -> Result<Tensor> {
        let mut out = Vec::with_capacity(heads * n * kd);
        for hd in 0..heads {
            for t in 0..n {
                let s = t * row + hd * 3 * kd + part * kd;
                out.extend_from_slice(&qkv.data()[s..s + kd]);
            }
        }
        Tensor::new(vec![heads, n, kd], out)
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);
    let o = ops::scaled_dot_product_attention(&q, &k, &v, Some(bias))?;
    let mut merged = vec![0.0f32; n * heads * kd];
    for hd in 0..heads {
        for t in 0..n {
            let s = (hd * n + t) * kd;
            merged[t * heads * kd + hd * kd..t * heads * kd + (hd + 1) * kd]
                .copy_from_slice(&o.data()[s..s + kd]);
        }
    }
    ops::linear(
        &Tensor::new(vec![n, heads * kd], merged)?,
        w.get(&format!("{p}.proj.weight")),
        Some(w.get(&format!("{p}.proj.bias"))),
    )
}

/// Reduces a `C_e × h × w` (or `1 × C_e × h × w`) feature map to a vector.
pub fn pool_embedding(features: &Tensor, mode: Pooling) -> Result<EmbeddingVector> {
    let shape = features.shape();
    let (c, hw) = match shape {
        [c, h, w] | [1, c, h, w] => (*c, h * w),
        _ => {
            return Err(Error::dim(
                "pool_embedding",
                "features rank",
                "3 (C×h×w)",
                format!("{shape:?}"),
            ))
        }
    };
    Ok(EmbeddingVector(match mode {
        Pooling::Flatten => features.data().to_vec(),
        Pooling::Mean => features
            .data()
            .chunks_exact(hw)
            .take(c)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect(),
    }))
}
