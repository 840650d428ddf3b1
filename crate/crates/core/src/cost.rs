//! Analytic MAC counting and wall-clock throughput for the toy model.
//!
//! One multiply-accumulate is counted as one FLOP. Softmax, LayerNorm, GELU
//! and residual adds are not counted.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::allocator::{AllocatorHead, AllocatorParams};
use crate::error::{Error, Result};
use crate::pruning::{apply_schedule, PruneSchedule, Ranker};
use crate::tensor::Tensor;
use crate::vit::{self, ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerMacs {
    pub tokens: usize,
    pub qkv: u64,
    pub scores: u64,
    pub values: u64,
    pub proj: u64,
    pub mlp: u64,
}

impl LayerMacs {
    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.values + self.proj + self.mlp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerMacs>,
    pub patch_embed: u64,
    pub head: u64,
    /// Relevance heads of the noise allocator, counted on the tokens they score.
    pub allocator: u64,
    pub total_macs: u64,
}

impl FlopsReport {
    pub fn total_gflops(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// `layer,tokens,qkv,scores,values,proj,mlp,total_macs`, one row per block,
    /// then the fixed costs and the grand total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,tokens,qkv,scores,values,proj,mlp,total_macs\n");
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{}",
                l.tokens,
                l.qkv,
                l.scores,
                l.values,
                l.proj,
                l.mlp,
                l.total()
            );
        }
        for (name, v) in [
            ("patch_embed", self.patch_embed),
            ("allocator", self.allocator),
            ("head", self.head),
            ("total", self.total_macs),
        ] {
            let _ = writeln!(out, "{name},,,,,,,{v}");
        }
        out
    }
}

fn block_macs(config: &ModelConfig, n: usize) -> LayerMacs {
    let (n, d, m) = (n as u64, config.dim as u64, config.mlp_dim as u64);
    LayerMacs {
        tokens: n as usize,
        qkv: 3 * n * d * d,
        scores: n * n * d,
        values: n * n * d,
        proj: n * d * d,
        mlp: 2 * n * d * m,
    }
}

/// MACs for a forward pass where block `i` sees `tokens_per_layer[i]` tokens
/// (special tokens included).
pub fn flops_estimate(config: &ModelConfig, tokens_per_layer: &[usize]) -> Result<FlopsReport> {
    flops_with_allocator(config, tokens_per_layer, None, &[])
}

/// As [`flops_estimate`], adding the allocator heads at `alpha_layers`
/// (0-based blocks whose output they score).
pub fn flops_with_allocator(
    config: &ModelConfig,
    tokens_per_layer: &[usize],
    allocator: Option<&AllocatorParams>,
    alpha_layers: &[usize],
) -> Result<FlopsReport> {
    config.validate()?;
    if tokens_per_layer.len() != config.depth {
        return Err(Error::Config(format!(
            "token profile has {} entries for depth {}",
            tokens_per_layer.len(),
            config.depth
        )));
    }
    let layers: Vec<LayerMacs> = tokens_per_layer
        .iter()
        .map(|&n| block_macs(config, n))
        .collect();
    let d = config.dim as u64;
    let patch_embed = (config.num_patches() * config.dim * config.patch_dim()) as u64;
    let head = d * config.num_classes as u64;
    let mut alloc = 0u64;
    if let Some(a) = allocator {
        for &l in alpha_layers {
            let h = a
                .heads
                .get(&l)
                .ok_or_else(|| Error::Config(format!("no allocator head at layer {l}")))?;
            // the head scores the patch tokens leaving block l
            let n = tokens_per_layer[l].saturating_sub(config.special_tokens) as u64;
            alloc += match h {
                AllocatorHead::Linear { .. } => n * d,
                AllocatorHead::Mlp { w1, .. } => {
                    let hidden = w1.cols() as u64;
                    n * (d * hidden + hidden)
                }
            };
        }
    }
    let total_macs = layers.iter().map(LayerMacs::total).sum::<u64>() + patch_embed + head + alloc;
    Ok(FlopsReport {
        layers,
        patch_embed,
        head,
        allocator: alloc,
        total_macs,
    })
}

/// Named architectures from the paper's comparison table.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let base = ModelConfig {
        image_size: 224,
        patch_size: 16,
        channels: 3,
        dim: 768,
        depth: 12,
        heads: 12,
        mlp_dim: 3072,
        num_classes: 1000,
        special_tokens: 2,
        layernorm_eps: 1e-6,
    };
    match name {
        "deit-b-distil" => Ok(base),
        "deit-s-distil" => Ok(ModelConfig {
            dim: 384,
            heads: 6,
            mlp_dim: 1536,
            ..base
        }),
        "vit16-768" => Ok(ModelConfig {
            mlp_dim: 768,
            special_tokens: 1,
            ..base
        }),
        _ => Err(Error::Config(format!(
            "unknown preset {name:?} (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

pub const PRESETS: [&str; 3] = ["deit-b-distil", "deit-s-distil", "vit16-768"];

/// Dense profile: every block sees the full sequence.
pub fn dense_profile(config: &ModelConfig) -> Vec<usize> {
    vec![config.seq_len(); config.depth]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub images_per_second: f64,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Images/second of each measurement window.
    pub windows: Vec<f64>,
}

/// Median images/second over `iters` windows of `batch` images each.
/// `schedule = None` runs the dense forward pass.
pub fn throughput_measure(
    backbone: &ModelParams,
    config: &ModelConfig,
    ranker: Ranker<'_>,
    schedule: Option<&PruneSchedule>,
    images: &[Tensor],
    batch: usize,
    warmup: usize,
    iters: usize,
) -> Result<TimingReport> {
    if iters < 5 {
        return Err(Error::Config(format!("need at least 5 windows, got {iters}")));
    }
    if batch == 0 || images.is_empty() {
        return Err(Error::Config("throughput needs a positive batch and images".into()));
    }
    let chunk: Vec<Tensor> = images.iter().cycle().take(batch).cloned().collect();
    let run = || -> Result<()> {
        match schedule {
            Some(s) => apply_schedule(backbone, config, ranker, &chunk, s, 0).map(|_| ()),
            None => chunk
                .par_iter()
                .try_for_each(|img| vit::predict(backbone, config, img).map(|_| ())),
        }
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut windows = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        run()?;
        let secs = t.elapsed().as_secs_f64().max(1e-12);
        windows.push(batch as f64 / secs);
    }
    let mut sorted = windows.clone();
    sorted.sort_by(f64::total_cmp);
    let images_per_second = sorted[sorted.len() / 2];
    Ok(TimingReport {
        images_per_second,
        batch,
        warmup,
        iters,
        windows,
    })
}
