//! Checks behind the acceptance gate. Each returns a one-line summary on
//! success and a description of the first violation on failure, so the same
//! code backs both the focused test files and the acceptance report.

use std::time::{Duration, Instant};

use adet_core::checkpoint::{Metadata, TensorContainer, TensorMap};
use adet_core::encoder::{EncoderConfig, EncoderWeights, ENCODER_PREFIX};
use adet_core::head::{head_forward, head_init, HeadConfig, HeadWeights, LinearLayer, HEAD_PREFIX};
use adet_core::metrics::{auroc, count_parameters, ParameterCounts};
use adet_core::ops::{self, Conv2dParams};
use adet_core::synthetic::gaussian_embeddings;
use adet_core::trainer::{
    adam_step, head_backward, train_head, wbce_grad_logits, wbce_loss, AdamConfig, AdamState,
    LossBatch, TrainConfig,
};
use adet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

pub const KERNEL_TOL: f64 = 1e-5;
pub const NORM_TOL: f64 = 1e-6;
pub const KERNEL_CASES: usize = 120;
pub const KERNEL_BUDGET: Duration = Duration::from_secs(60);
pub const AUROC_TOL: f64 = 1e-12;
pub const AUROC_CASES: usize = 500;
pub const GRAD_REL_TOL: f64 = 1e-3;
pub const GRAD_CASES: usize = 120;
pub const ADAM_TOL: f64 = 1e-9;
pub const E2E_MIN_AUROC: f64 = 0.99;
pub const E2E_MIN_LOSS_DROP: f64 = 0.10;
pub const E2E_BUDGET: Duration = Duration::from_secs(30);
pub const FUZZ_CASES: usize = 2000;
pub const MOBILESAM_PARAMS: f64 = 5.78e6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `(n, c, h, w, o, k, stride, pad, groups)`
type ConvDims = (
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
);

fn conv_case(rng: &mut ChaCha8Rng, dims: Option<ConvDims>) -> Result<f64, String> {
    let (n, c, h, w, o, k, stride, pad, groups) = dims.unwrap_or_else(|| {
        let groups = rng.random_range(1..=4);
        let k: usize = rng.random_range(1..=5);
        let pad = rng.random_range(0..=2);
        let lo = k.saturating_sub(2 * pad).max(1);
        (
            rng.random_range(1..=2),
            groups * rng.random_range(1..=4),
            rng.random_range(lo..=12),
            rng.random_range(lo..=12),
            groups * rng.random_range(1..=3),
            k,
            rng.random_range(1..=3),
            pad,
            groups,
        )
    });
    let x = rand_tensor(rng, &[n, c, h, w]);
    let wt = rand_tensor(rng, &[o, c / groups, k, k]);
    let b = rand_tensor(rng, &[o]);
    let got = ops::conv2d(&x, &wt, Some(&b), Conv2dParams::new(stride, pad, groups))
        .map_err(|e| e.to_string())?;
    let (want, shape) = super::conv2d(
        &super::to_f64(&x),
        (n, c, h, w),
        &super::to_f64(&wt),
        (o, k, k),
        Some(&super::to_f64(&b)),
        stride,
        pad,
        groups,
    );
    check(got.shape() == shape, || {
        format!("conv2d shape {:?} != {:?}", got.shape(), shape)
    })?;
    Ok(super::max_abs_diff(got.data(), &want))
}

fn linear_case(rng: &mut ChaCha8Rng, dims: Option<(usize, usize, usize)>) -> Result<f64, String> {
    let (n, k, m) = dims.unwrap_or_else(|| {
        (
            rng.random_range(1..=8),
            rng.random_range(1..=128),
            rng.random_range(1..=32),
        )
    });
    let x = rand_tensor(rng, &[n, k]);
    let w = rand_tensor(rng, &[m, k]);
    let b = rand_tensor(rng, &[m]);
    let got = ops::linear(&x, &w, Some(&b)).map_err(|e| e.to_string())?;
    let want = super::linear(
        &super::to_f64(&x),
        n,
        k,
        &super::to_f64(&w),
        m,
        Some(&super::to_f64(&b)),
    );
    check(got.shape() == [n, m], || {
        format!("linear shape {:?}", got.shape())
    })?;
    Ok(super::max_abs_diff(got.data(), &want))
}

fn layer_norm_case(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let rows = rng.random_range(1..=8);
    let d = rng.random_range(2..=64);
    let x = rand_tensor(rng, &[rows, d]);
    let g = rand_tensor(rng, &[d]);
    let b = rand_tensor(rng, &[d]);
    let eps = if rng.random_bool(0.5) { 1e-5 } else { 1e-6 };
    let got = ops::layer_norm(&x, d, &g, &b, eps).map_err(|e| e.to_string())?;
    let want = super::layer_norm(
        &super::to_f64(&x),
        d,
        &super::to_f64(&g),
        &super::to_f64(&b),
        eps as f64,
    );
    Ok(super::max_abs_diff(got.data(), &want))
}

fn softmax_case(rng: &mut ChaCha8Rng, dims: Option<(usize, usize)>) -> Result<f64, String> {
    let (rows, d) = dims.unwrap_or_else(|| (rng.random_range(1..=8), rng.random_range(1..=64)));
    let scale = rng.random_range(1.0f32..20.0);
    let x = Tensor::from_fn(&[rows, d], |_| scale * rng.random_range(-1.0f32..1.0)).unwrap();
    let got = ops::softmax(&x, 1).map_err(|e| e.to_string())?;
    let want = super::softmax_rows(&super::to_f64(&x), d);
    Ok(super::max_abs_diff(got.data(), &want))
}

fn attention_case(
    rng: &mut ChaCha8Rng,
    dims: Option<(usize, usize, usize, usize)>,
) -> Result<f64, String> {
    let (h, l, dk, dv) = dims.unwrap_or_else(|| {
        (
            rng.random_range(1..=4),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
        )
    });
    let q = rand_tensor(rng, &[h, l, dk]);
    let k = rand_tensor(rng, &[h, l, dk]);
    let v = rand_tensor(rng, &[h, l, dv]);
    let bias = rng.random_bool(0.5).then(|| rand_tensor(rng, &[h, l, l]));
    let got =
        ops::scaled_dot_product_attention(&q, &k, &v, bias.as_ref()).map_err(|e| e.to_string())?;
    let want = super::attention(
        &super::to_f64(&q),
        &super::to_f64(&k),
        &super::to_f64(&v),
        bias.as_ref().map(super::to_f64).as_deref(),
        h,
        l,
        dk,
        dv,
    );
    Ok(super::max_abs_diff(got.data(), &want))
}

/// Every kernel against its f64 oracle on `KERNEL_CASES` random shapes
/// each, plus the fixed shapes listed for each kernel.
pub fn kernel_oracles(seed: u64) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    let names = ["conv2d", "linear", "layer_norm", "softmax", "attention"];
    let tols = [KERNEL_TOL, KERNEL_TOL, NORM_TOL, NORM_TOL, KERNEL_TOL];
    let mut record = |i: usize, err: f64, case: usize| -> Result<(), String> {
        worst[i] = worst[i].max(err);
        check(err < tols[i], || {
            format!("{} case {case}: max-abs {err:e} >= {:e}", names[i], tols[i])
        })
    };
    record(
        0,
        conv_case(&mut rng, Some((2, 8, 16, 16, 8, 3, 1, 1, 8)))?,
        0,
    )?;
    record(1, linear_case(&mut rng, Some((4, 64, 32)))?, 0)?;
    record(3, softmax_case(&mut rng, Some((4, 16)))?, 0)?;
    record(4, attention_case(&mut rng, Some((2, 8, 16, 16)))?, 0)?;
    for case in 1..=KERNEL_CASES {
        record(0, conv_case(&mut rng, None)?, case)?;
        record(1, linear_case(&mut rng, None)?, case)?;
        record(2, layer_norm_case(&mut rng)?, case)?;
        record(3, softmax_case(&mut rng, None)?, case)?;
        record(4, attention_case(&mut rng, None)?, case)?;
    }
    let elapsed = start.elapsed();
    check(elapsed < KERNEL_BUDGET, || {
        format!("took {elapsed:?}, budget {KERNEL_BUDGET:?}")
    })?;
    let summary: Vec<String> = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect();
    Ok(format!(
        "{} shapes/kernel, worst max-abs: {} ({:.1?})",
        KERNEL_CASES,
        summary.join(", "),
        elapsed
    ))
}

/// Random scores on a coarse grid so ties are common.
pub fn random_auroc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=64);
    let levels = rng.random_range(1..=12);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 * 0.37 - 1.0)
        .collect();
    (scores, labels)
}

pub fn auroc_equivalence(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_mono = 0.0f64;
    for case in 0..AUROC_CASES {
        let (scores, labels) = random_auroc_instance(&mut rng);
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = super::auroc_pairs(&scores, &labels);
        let err = (got - want).abs();
        worst = worst.max(err);
        check(err <= AUROC_TOL, || {
            format!("case {case}: {got} vs pair count {want}")
        })?;
        // strictly increasing transform preserves order and ties
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s).collect();
        let mono = (auroc(&mapped, &labels).map_err(|e| e.to_string())? - got).abs();
        worst_mono = worst_mono.max(mono);
        check(mono <= AUROC_TOL, || {
            format!("case {case}: monotone transform moved AUROC by {mono:e}")
        })?;
    }
    Ok(format!(
        "{AUROC_CASES} instances, worst |diff| {worst:.1e}, worst monotone drift {worst_mono:.1e}"
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_head(rng: &mut ChaCha8Rng) -> HeadWeights {
    let input_dim = rng.random_range(1..=8);
    let hidden: Vec<usize> = (0..rng.random_range(1..=3))
        .map(|_| rng.random_range(1..=8))
        .collect();
    let config = HeadConfig {
        input_dim,
        hidden_dims: hidden,
    };
    let layers = config
        .dims()
        .windows(2)
        .map(|w| LinearLayer {
            weight: rand_tensor(rng, &[w[1], w[0]]),
            bias: rand_tensor(rng, &[w[1]]),
        })
        .collect();
    HeadWeights::new(config, layers).unwrap()
}

fn oracle_layers(h: &HeadWeights) -> super::Layers {
    h.layers
        .iter()
        .map(|l| {
            let s = l.weight.shape();
            (super::to_f64(&l.weight), super::to_f64(&l.bias), s[0], s[1])
        })
        .collect()
}

fn param_mut(layers: &mut super::Layers, layer: usize, which: usize, i: usize) -> &mut f64 {
    let l = &mut layers[layer];
    if which == 0 {
        &mut l.0[i]
    } else {
        &mut l.1[i]
    }
}

/// Central differences of the f64 oracle loss against the library's
/// analytic gradients, for logits and every head parameter.
pub fn gradient_check(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for case in 0..GRAD_CASES {
        let head = random_head(&mut rng);
        let n = rng.random_range(1..=6);
        let d = head.config.input_dim;
        let x = Tensor::from_fn(&[n, d], |_| rng.random_range(-2.0f32..2.0)).unwrap();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let w = rng.random_range(0.5..10.0);

        // logits alone
        let logits: Vec<f32> = (0..n).map(|_| rng.random_range(-6.0f32..6.0)).collect();
        let batch = LossBatch::new(&logits, &labels, w).map_err(|e| e.to_string())?;
        let g = wbce_grad_logits(&batch);
        let s64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        for i in 0..n {
            let (mut p, mut m) = (s64.clone(), s64.clone());
            p[i] += step;
            m[i] -= step;
            let fd = (super::wbce(&p, &labels, w) - super::wbce(&m, &labels, w)) / (2.0 * step);
            let e = rel_err(g[i] as f64, fd);
            worst = worst.max(e);
            checked += 1;
            check(e < GRAD_REL_TOL, || {
                format!("case {case}: dL/ds[{i}] {} vs fd {fd} (rel {e:e})", g[i])
            })?;
        }

        // through the head
        let head_logits = head_forward(&x, &head).map_err(|e| e.to_string())?;
        let batch = LossBatch::new(&head_logits, &labels, w).map_err(|e| e.to_string())?;
        let grads =
            head_backward(&x, &head, &wbce_grad_logits(&batch)).map_err(|e| e.to_string())?;
        let x64 = super::to_f64(&x);
        let base = oracle_layers(&head);
        let loss =
            |layers: &super::Layers| super::wbce(&super::head_forward(&x64, n, layers), &labels, w);
        for (li, gl) in grads.layers.iter().enumerate() {
            for (which, gt) in [(0, &gl.weight), (1, &gl.bias)] {
                for (pi, &ga) in gt.data().iter().enumerate() {
                    let (mut p, mut m) = (base.clone(), base.clone());
                    *param_mut(&mut p, li, which, pi) += step;
                    *param_mut(&mut m, li, which, pi) -= step;
                    let fd = (loss(&p) - loss(&m)) / (2.0 * step);
                    let e = rel_err(ga as f64, fd);
                    worst = worst.max(e);
                    checked += 1;
                    let kind = if which == 0 { "weight" } else { "bias" };
                    check(e < GRAD_REL_TOL, || {
                        format!("case {case}: layer {li} {kind}[{pi}] {ga} vs fd {fd} (rel {e:e})")
                    })?;
                }
            }
        }
    }

    // closed forms
    let g = wbce_grad_logits(&LossBatch::new(&[0.0], &[1], 1.0).unwrap())[0];
    check(g == -0.5, || {
        format!("s=0, y=1 gradient {g}, expected -0.5")
    })?;
    let l = wbce_loss(&LossBatch::new(&[0.0; 6], &[0, 1, 1, 0, 0, 1], 1.0).unwrap());
    check((l - std::f64::consts::LN_2).abs() <= 1e-9, || {
        format!("zero-logit loss {l}, expected ln 2")
    })?;
    Ok(format!(
        "{GRAD_CASES} configs, {checked} partials, worst rel err {worst:.1e}; s=0,y=1 -> -0.5; zero logits -> ln 2"
    ))
}

/// Adam on `f(θ) = θ²` from θ = 1 for three steps, and the first-step
/// closed form on a random vector.
pub fn adam_trace(seed: u64) -> Outcome {
    let cfg = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    let want = super::adam_trace(
        1.0,
        |t| 2.0 * t,
        3,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );
    let mut theta = vec![1.0f64];
    let mut state = AdamState::<f64>::zeros_like([theta.as_slice()]);
    let mut worst = 0.0f64;
    for (step, &w) in want.iter().enumerate() {
        let g = vec![2.0 * theta[0]];
        adam_step([theta.as_mut_slice()], [g.as_slice()], &mut state, &cfg)
            .map_err(|e| e.to_string())?;
        let e = (theta[0] - w).abs();
        worst = worst.max(e);
        check(e <= ADAM_TOL, || {
            format!("step {}: θ {} vs reference {w}", step + 1, theta[0])
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p0 = p.clone();
    let g: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut state = AdamState::<f64>::zeros_like([p.as_slice()]);
    adam_step([p.as_mut_slice()], [g.as_slice()], &mut state, &cfg).map_err(|e| e.to_string())?;
    for i in 0..p.len() {
        let want = -cfg.learning_rate * g[i] / (g[i].abs() + cfg.epsilon);
        let got = p[i] - p0[i];
        check((got - want).abs() <= ADAM_TOL, || {
            format!("t=1 element {i}: Δ {got} vs {want}")
        })?;
    }
    Ok(format!(
        "3-step θ² trace {:?}, worst |diff| {worst:.1e}; t=1 closed form on 64 elements",
        want.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>()
    ))
}

pub struct Experiment {
    pub auroc: f64,
    pub loss_drop: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub class_weight: f64,
    pub weights: HeadWeights,
}

/// d = 32 Gaussian clusters at ±2, 400 training samples at 9:1, 200 held out.
pub fn run_experiment(seed: u64) -> Result<Experiment, String> {
    let d = 32;
    let (train_x, train_y) =
        gaussian_embeddings(400, 40, d, 2.0, seed).map_err(|e| e.to_string())?;
    let (test_x, test_y) =
        gaussian_embeddings(200, 20, d, 2.0, seed + 1).map_err(|e| e.to_string())?;
    let head = HeadConfig::mvtec(d);
    let cfg = TrainConfig {
        epochs: 35,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    };
    let out = train_head(&train_x, &train_y, &head, &cfg).map_err(|e| e.to_string())?;
    let logits = head_forward(&test_x, &out.weights).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let a = auroc(&scores, &test_y).map_err(|e| e.to_string())?;
    let last = out.history.last().ok_or("empty history")?.mean_loss;
    Ok(Experiment {
        auroc: a,
        loss_drop: 1.0 - last / out.initial_loss,
        initial_loss: out.initial_loss,
        final_loss: last,
        class_weight: out.class_weight,
        weights: out.weights,
    })
}

pub fn end_to_end(seed: u64) -> Outcome {
    let start = Instant::now();
    let a = run_experiment(seed)?;
    let b = run_experiment(seed)?;
    let elapsed = start.elapsed();
    check(a.class_weight == 9.0, || {
        format!("class weight {} != 9", a.class_weight)
    })?;
    check(a.auroc >= E2E_MIN_AUROC, || {
        format!("held-out AUROC {} < {E2E_MIN_AUROC}", a.auroc)
    })?;
    check(a.loss_drop >= E2E_MIN_LOSS_DROP, || {
        format!("loss fell by {:.1}%", 100.0 * a.loss_drop)
    })?;
    let bits =
        |h: &HeadWeights| -> Vec<u32> { h.params().flatten().map(|v| v.to_bits()).collect() };
    check(bits(&a.weights) == bits(&b.weights), || {
        "reruns produced different weights".into()
    })?;
    check(elapsed < E2E_BUDGET, || {
        format!("took {elapsed:?}, budget {E2E_BUDGET:?}")
    })?;
    Ok(format!(
        "AUROC {:.4}, loss {:.4} -> {:.2e}, w = {}, reruns bit-identical ({:.1?} for two runs)",
        a.auroc, a.initial_loss, a.final_loss, a.class_weight, elapsed
    ))
}

/// Container image assembled byte by byte: one entry `w` of shape [1, 2]
/// holding 1.0 and -2.5.
pub fn reference_container_bytes() -> Vec<u8> {
    let header = br#"{"metadata":{},"entries":[{"name":"w","shape":[1,2],"offset":0,"length":8}]}"#;
    let mut b = Vec::new();
    b.extend_from_slice(b"KAIR");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&(header.len() as u64).to_le_bytes());
    b.extend_from_slice(header);
    b.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
    b
}

pub fn random_container(rng: &mut ChaCha8Rng, count: usize) -> TensorContainer {
    let mut tensors = TensorMap::new();
    while tensors.len() < count {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
        let name = format!(
            "t{}.{}",
            rng.random_range(0..10_000u32),
            rng.random_range(0..100u32)
        );
        let data = Tensor::from_fn(&shape, |_| {
            f32::from_bits(rng.random::<u32>() & 0xbfff_ffff)
        })
        .unwrap();
        tensors.insert(name, data);
    }
    let mut metadata = Metadata::new();
    metadata.insert("note".into(), "quoted \"value\" \u{e9}".into());
    TensorContainer::new(tensors, metadata)
}

pub fn container_format(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_container(&mut rng, 50);
    let bytes = c.to_bytes().map_err(|e| e.to_string())?;
    let back = TensorContainer::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let bits = |c: &TensorContainer| -> Vec<(String, Vec<usize>, Vec<u32>)> {
        c.tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    check(
        bits(&back) == bits(&c) && back.metadata == c.metadata,
        || "round-trip changed content".into(),
    )?;
    check(back.to_bytes().map_err(|e| e.to_string())? == bytes, || {
        "re-serialization not byte-identical".into()
    })?;

    let reference = reference_container_bytes();
    let parsed =
        TensorContainer::from_bytes(&reference).map_err(|e| format!("reference file: {e}"))?;
    let w = parsed
        .tensors
        .get("w")
        .ok_or("reference entry `w` missing")?;
    check(w.shape() == [1, 2] && w.data() == [1.0, -2.5], || {
        format!("reference decoded as {w:?}")
    })?;
    check(
        parsed.to_bytes().map_err(|e| e.to_string())? == reference,
        || "writer differs from reference bytes".into(),
    )?;

    let crashes = fuzz_prefixes(&bytes, seed, FUZZ_CASES);
    check(crashes == 0, || format!("{crashes} fuzz inputs panicked"))?;
    Ok(format!(
        "50-tensor round-trip byte-exact, reference file parses, {FUZZ_CASES} fuzzed 4 KiB prefixes gave structured errors only"
    ))
}

/// Feeds mutated copies of the first 4 KiB of `valid` (truncations, bit
/// flips, random bytes) to the parser; returns how many panicked.
pub fn fuzz_prefixes(valid: &[u8], seed: u64, cases: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let prefix = &valid[..valid.len().min(4096)];
    let mut panics = 0;
    for _ in 0..cases {
        let mut buf = match rng.random_range(0..3) {
            0 => prefix[..rng.random_range(0..=prefix.len())].to_vec(),
            1 => {
                let mut b = prefix.to_vec();
                for _ in 0..rng.random_range(1..=8) {
                    let i = rng.random_range(0..b.len());
                    b[i] ^= 1 << rng.random_range(0..8);
                }
                b
            }
            _ => (0..rng.random_range(0..=4096))
                .map(|_| rng.random::<u8>())
                .collect(),
        };
        if rng.random_bool(0.3) && buf.len() >= 4 {
            buf[..4].copy_from_slice(b"KAIR");
        }
        let result = std::panic::catch_unwind(|| TensorContainer::from_bytes(&buf));
        if result.is_err() {
            panics += 1;
        }
    }
    panics
}

/// Parameter tally of the tiny-test encoder worked out by hand, block by
/// block. Conv entries fold BatchNorm into a bias; the neck convs have no bias.
pub fn tiny_test_hand_tally() -> u64 {
    let conv = |o: u64, i: u64, k: u64| o * i * k * k + o;
    let dw = |c: u64| c * 9 + c;
    let ln = |c: u64| 2 * c;
    let lin = |o: u64, i: u64| o * i + o;
    let stem = conv(8, 3, 3) + conv(16, 8, 3);
    let mbconv = conv(64, 16, 1) + dw(64) + conv(16, 64, 1);
    let merge = |i: u64, o: u64| conv(o, i, 1) + dw(o) + conv(o, o, 1);
    let tinyvit = |c: u64, heads: u64, ws: u64| {
        ln(c)
            + lin(3 * c, c)
            + lin(c, c)
            + heads * ws * ws
            + dw(c)
            + ln(c)
            + lin(4 * c, c)
            + lin(c, 4 * c)
    };
    let neck = 32 * 32 + ln(32) + 32 * 32 * 9 + ln(32);
    stem + 2 * mbconv + merge(16, 24) + tinyvit(24, 2, 4) + merge(24, 32) + tinyvit(32, 2, 3) + neck
}

pub fn parameter_accounting(seed: u64) -> Outcome {
    let mut fc = TensorMap::new();
    fc.insert("fc.weight".into(), Tensor::zeros(&[32, 64]).unwrap());
    fc.insert("fc.bias".into(), Tensor::zeros(&[32]).unwrap());
    let lin_64_32 = count_parameters(&fc, "");
    check(lin_64_32 == 2080, || {
        format!("linear 64->32 counted as {lin_64_32}")
    })?;

    let cfg = EncoderConfig::tiny_test();
    let hand = tiny_test_hand_tally();
    let declared = cfg.parameter_count();
    check(declared == hand, || {
        format!("tiny-test declared {declared}, hand tally {hand}")
    })?;
    let weights = EncoderWeights::random(&cfg, seed).map_err(|e| e.to_string())?;
    let container = weights.to_container(&cfg);
    let counted = count_parameters(&container.tensors, ENCODER_PREFIX);
    check(counted == hand, || {
        format!("tiny-test container holds {counted}, hand tally {hand}")
    })?;

    let head = head_init(&HeadConfig::visa(32), seed).map_err(|e| e.to_string())?;
    let mut all = container.tensors.clone();
    all.extend(head.to_tensor_map());
    let head_count = count_parameters(&all, HEAD_PREFIX);
    let counts = ParameterCounts::new(counted, head_count);
    let total = count_parameters(&all, "");
    check(
        counts.total == total && total == counted + head.parameter_count(),
        || format!("additivity: {} + {} vs {total}", counted, head_count),
    )?;

    let big = EncoderConfig::mobilesam_v1().parameter_count() as f64;
    let rel = (big - MOBILESAM_PARAMS).abs() / MOBILESAM_PARAMS;
    check(rel <= 0.01, || {
        format!("mobilesam-v1 tally {big} is {:.2}% from 5.78M", 100.0 * rel)
    })?;
    Ok(format!(
        "linear 64->32 = {lin_64_32}; tiny-test = {hand} (hand tally); encoder {counted} + head {head_count} = {total}; mobilesam-v1 = {big} ({:.2}% from 5.78M)",
        100.0 * rel
    ))
}
