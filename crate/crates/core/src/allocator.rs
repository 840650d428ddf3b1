//! The noise allocator: per-layer relevance heads whose softmax output `α`
//! decides how much Gaussian noise each patch token receives during training,
//! and which ranks tokens for pruning at inference.
//!
//! During training, after each noised block ℓ the token rows become
//! `alpha_norm(x) + β·η` with `η_i = (1 − α_i)·ε_i`, `ε_i ~ N(0, I_D)` for
//! patch tokens and `η = 0` for special tokens. Because `Σα = 1`, the total
//! noise scale `Σ(1 − α_i) = N − 1` is fixed; the heads can only move it
//! between tokens.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{gaussian, stream_id, RngStream};
use crate::tensor::{self, Tensor};
use crate::vit::{
    block_forward, classify, embed, epoch_order, sum_grads, EpochLog, ModelConfig,
    ModelParams, ModelVars, TokenBatch, TokenSeq, TokenState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AllocatorHead {
    /// `x·w + b`, `w: [D, 1]`
    Linear { w: Tensor, b: Tensor },
    /// `gelu(x·w1 + b1)·w2 + b2`
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

impl AllocatorHead {
    fn init(kind: HeadKind, dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| 0.02 * rng.normal());
        match kind {
            HeadKind::Linear => AllocatorHead::Linear {
                w: normal(&[dim, 1]),
                b: Tensor::zeros(&[1]),
            },
            HeadKind::Mlp => AllocatorHead::Mlp {
                w1: normal(&[dim, hidden]),
                b1: Tensor::zeros(&[hidden]),
                w2: normal(&[hidden, 1]),
                b2: Tensor::zeros(&[1]),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            AllocatorHead::Linear { .. } => HeadKind::Linear,
            AllocatorHead::Mlp { .. } => HeadKind::Mlp,
        }
    }

    fn parts(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            AllocatorHead::Linear { w, b } => vec![("w", w), ("b", b)],
            AllocatorHead::Mlp { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
        }
    }

    fn parts_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AllocatorHead::Linear { w, b } => vec![w, b],
            AllocatorHead::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> HeadVars {
        let mut leaf = |t: &'a Tensor| if trainable { g.param(t) } else { g.frozen(t) };
        match self {
            AllocatorHead::Linear { w, b } => HeadVars::Linear {
                w: leaf(w),
                b: leaf(b),
            },
            AllocatorHead::Mlp { w1, b1, w2, b2 } => HeadVars::Mlp {
                w1: leaf(w1),
                b1: leaf(b1),
                w2: leaf(w2),
                b2: leaf(b2),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub enum HeadVars {
    Linear { w: Var, b: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl HeadVars {
    fn all(&self) -> Vec<Var> {
        match self {
            HeadVars::Linear { w, b } => vec![*w, *b],
            HeadVars::Mlp { w1, b1, w2, b2 } => vec![*w1, *b1, *w2, *b2],
        }
    }

    /// Row-wise logits `[n, 1]`.
    fn logits<'a>(&self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        match self {
            HeadVars::Linear { w, b } => {
                let z = g.matmul(x, *w)?;
                g.add_row(z, *b)
            }
            HeadVars::Mlp { w1, b1, w2, b2 } => {
                let h = g.matmul(x, *w1)?;
                let h = g.add_row(h, *b1)?;
                let h = g.gelu(h);
                let z = g.matmul(h, *w2)?;
                g.add_row(z, *b2)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocatorParams {
    /// One head per noised block index.
    pub heads: BTreeMap<usize, AllocatorHead>,
    pub alpha_norm_gamma: Tensor,
    pub alpha_norm_shift: Tensor,
}

#[derive(Clone, Debug)]
pub struct AllocatorVars {
    pub heads: BTreeMap<usize, HeadVars>,
    pub alpha_norm_gamma: Var,
    pub alpha_norm_shift: Var,
}

impl AllocatorVars {
    /// Rebuilds the structure of `layout` from a flat list of vars in
    /// [`AllocatorParams::named_tensors`] order.
    pub fn from_flat(layout: &AllocatorParams, vars: &[Var]) -> Result<Self> {
        let expected = layout.named_tensors().len();
        if vars.len() != expected {
            return Err(Error::Usage(format!(
                "expected {expected} allocator vars, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let heads = layout
            .heads
            .iter()
            .map(|(&l, h)| {
                let hv = match h {
                    AllocatorHead::Linear { .. } => HeadVars::Linear { w: next(), b: next() },
                    AllocatorHead::Mlp { .. } => HeadVars::Mlp {
                        w1: next(),
                        b1: next(),
                        w2: next(),
                        b2: next(),
                    },
                };
                (l, hv)
            })
            .collect();
        Ok(Self {
            heads,
            alpha_norm_gamma: next(),
            alpha_norm_shift: next(),
        })
    }

    /// Same order as [`AllocatorParams::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.heads.values().flat_map(|h| h.all()).collect();
        out.push(self.alpha_norm_gamma);
        out.push(self.alpha_norm_shift);
        out
    }
}

impl AllocatorParams {
    /// Heads drawn from N(0, 0.02²) with zero bias; `alpha_norm` starts as identity.
    /// The MLP hidden width defaults to D/2.
    pub fn init(
        config: &ModelConfig,
        kind: HeadKind,
        hidden: Option<usize>,
        noised_layers: &[usize],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if noised_layers.is_empty() {
            return Err(Error::Config("allocator needs at least one noised layer".into()));
        }
        if let Some(&l) = noised_layers.iter().find(|&&l| l >= config.depth) {
            return Err(Error::Config(format!(
                "noised layer {l} outside [0, {})",
                config.depth
            )));
        }
        let hidden = hidden.unwrap_or((config.dim / 2).max(1));
        let layers: BTreeSet<usize> = noised_layers.iter().copied().collect();
        let heads = layers
            .into_iter()
            .map(|l| {
                let mut rng = RngStream::new(seed, stream_id(30, l as u64));
                (l, AllocatorHead::init(kind, config.dim, hidden, &mut rng))
            })
            .collect();
        Ok(Self {
            heads,
            alpha_norm_gamma: Tensor::ones(&[config.dim]),
            alpha_norm_shift: Tensor::zeros(&[config.dim]),
        })
    }

    pub fn noised_layers(&self) -> Vec<usize> {
        self.heads.keys().copied().collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, h) in &self.heads {
            for (name, t) in h.parts() {
                out.push((format!("alloc.layer{l}.{name}"), t));
            }
        }
        out.push(("alloc.alpha_norm.gamma".into(), &self.alpha_norm_gamma));
        out.push(("alloc.alpha_norm.shift".into(), &self.alpha_norm_shift));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .heads
            .values_mut()
            .flat_map(|h| h.parts_mut())
            .collect();
        out.push(&mut self.alpha_norm_gamma);
        out.push(&mut self.alpha_norm_shift);
        out
    }

    /// Rebuilds from checkpoint tensors, validating shapes against `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let d = config.dim;
        let mut per_layer: BTreeMap<usize, BTreeMap<String, Tensor>> = BTreeMap::new();
        let mut gamma = None;
        let mut shift = None;
        for (name, t) in named {
            if name == "alloc.alpha_norm.gamma" {
                gamma = Some(t);
            } else if name == "alloc.alpha_norm.shift" {
                shift = Some(t);
            } else if let Some(rest) = name.strip_prefix("alloc.layer") {
                let (layer, part) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("bad allocator tensor name {name}")))?;
                let layer: usize = layer
                    .parse()
                    .map_err(|_| Error::Config(format!("bad layer in tensor name {name}")))?;
                per_layer.entry(layer).or_default().insert(part.to_string(), t);
            } else {
                return Err(Error::Config(format!("unexpected tensor {name} in allocator checkpoint")));
            }
        }
        let check = |t: &Tensor, shape: &[usize], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        let mut heads = BTreeMap::new();
        for (layer, mut parts) in per_layer {
            if layer >= config.depth {
                return Err(Error::Config(format!("allocator layer {layer} beyond depth")));
            }
            let linear = parts.contains_key("w");
            let mut take = |k: &str| {
                parts
                    .remove(k)
                    .ok_or_else(|| Error::Config(format!("layer {layer} head missing {k}")))
            };
            let head = if linear {
                let (w, b) = (take("w")?, take("b")?);
                check(&w, &[d, 1], "head w")?;
                check(&b, &[1], "head b")?;
                AllocatorHead::Linear { w, b }
            } else {
                let (w1, b1, w2, b2) = (take("w1")?, take("b1")?, take("w2")?, take("b2")?);
                let h = w1.cols();
                check(&w1, &[d, h], "head w1")?;
                check(&b1, &[h], "head b1")?;
                check(&w2, &[h, 1], "head w2")?;
                check(&b2, &[1], "head b2")?;
                AllocatorHead::Mlp { w1, b1, w2, b2 }
            };
            heads.insert(layer, head);
        }
        let gamma = gamma.ok_or_else(|| Error::Config("missing alpha_norm gamma".into()))?;
        let shift = shift.ok_or_else(|| Error::Config("missing alpha_norm shift".into()))?;
        check(&gamma, &[d], "alpha_norm gamma")?;
        check(&shift, &[d], "alpha_norm shift")?;
        if heads.is_empty() {
            return Err(Error::Config("allocator checkpoint has no heads".into()));
        }
        Ok(Self {
            heads,
            alpha_norm_gamma: gamma,
            alpha_norm_shift: shift,
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> AllocatorVars {
        let heads = self
            .heads
            .iter()
            .map(|(&l, h)| (l, h.bind(g, trainable)))
            .collect();
        let (gamma, shift) = if trainable {
            (g.param(&self.alpha_norm_gamma), g.param(&self.alpha_norm_shift))
        } else {
            (g.frozen(&self.alpha_norm_gamma), g.frozen(&self.alpha_norm_shift))
        };
        AllocatorVars {
            heads,
            alpha_norm_gamma: gamma,
            alpha_norm_shift: shift,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub beta: f64,
    /// Block indices (0-based) whose output receives noise.
    pub noised_layers: Vec<usize>,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if let Some(&l) = self.noised_layers.iter().find(|&&l| l >= config.depth) {
            return Err(Error::Config(format!("noised layer {l} outside [0, {})", config.depth)));
        }
        Ok(())
    }

    fn layer_set(&self) -> BTreeSet<usize> {
        self.noised_layers.iter().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// α at one layer: one probability vector over live patch tokens per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMap {
    pub layer: usize,
    pub alpha: Vec<Vec<f64>>,
}

/// `α = softmax(head(x_patch))` as a `[n_live, 1]` column; special rows are skipped.
pub fn alpha_var<'a>(
    g: &mut Graph<'a>,
    head: &HeadVars,
    x: Var,
    special_tokens: usize,
) -> Result<Var> {
    let rows = g.value(x).rows();
    if rows <= special_tokens {
        return Err(Error::Domain("no live patch tokens to score".into()));
    }
    let patch = if special_tokens == 0 {
        x
    } else {
        let idx: Vec<usize> = (special_tokens..rows).collect();
        g.select_rows(x, &idx)?
    };
    let logits = head.logits(g, patch)?;
    g.softmax(logits, 0)
}

/// Head logits for each live patch token of one sequence.
pub fn head_logits(head: &AllocatorHead, x: &Tensor, special_tokens: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let hv = head.bind(&mut g, false);
    let xv = g.frozen(x);
    let idx: Vec<usize> = (special_tokens..x.rows()).collect();
    if idx.is_empty() {
        return Err(Error::Domain("no live patch tokens to score".into()));
    }
    let patch = g.select_rows(xv, &idx)?;
    let z = hv.logits(&mut g, patch)?;
    Ok(g.value(z).data().to_vec())
}

pub fn compute_alpha(x: &TokenBatch, head: &AllocatorHead) -> Result<Vec<Vec<f64>>> {
    x.samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let hv = head.bind(&mut g, false);
            let xv = g.frozen(&s.x);
            let a = alpha_var(&mut g, &hv, xv, x.special_tokens)?;
            Ok(g.value(a).data().to_vec())
        })
        .collect()
}

/// `alpha_norm(x) + β·η` on a graph. `eps` holds one standard-normal row per live patch token.
pub fn noise_var<'a>(
    g: &mut Graph<'a>,
    x: Var,
    alpha: Var,
    vars: &AllocatorVars,
    beta: f64,
    eps: &Tensor,
    special_tokens: usize,
    ln_eps: f64,
) -> Result<Var> {
    let normed = g.layer_norm(x, vars.alpha_norm_gamma, vars.alpha_norm_shift, ln_eps)?;
    let scale = g.affine(alpha, -1.0, 1.0);
    let eps_v = g.constant(eps.clone());
    let noise = g.row_scale(eps_v, scale)?;
    let noise = g.scale(noise, beta);
    let noise = if special_tokens > 0 {
        let zero = g.constant(Tensor::zeros(&[special_tokens, g.value(x).cols()]));
        g.concat_rows(&[zero, noise])?
    } else {
        noise
    };
    g.add(normed, noise)
}

/// Value-level noise injection for a batch. `rng` supplies ε; each sample
/// draws from its own stream split off by sample position.
pub fn inject_training_noise(
    x: &TokenBatch,
    alpha: &AlphaMap,
    params: &AllocatorParams,
    cfg: &NoiseConfig,
    mode: Mode,
    rng: &RngStream,
    ln_eps: f64,
) -> Result<TokenBatch> {
    if mode != Mode::Train {
        return Err(Error::Usage("noise injection is a training-only operation".into()));
    }
    if alpha.alpha.len() != x.samples.len() {
        return Err(Error::Shape {
            op: "inject_training_noise",
            lhs: vec![x.samples.len()],
            rhs: vec![alpha.alpha.len()],
        });
    }
    let mut out = Vec::with_capacity(x.samples.len());
    for (i, (s, a)) in x.samples.iter().zip(&alpha.alpha).enumerate() {
        let n_live = s.x.rows() - x.special_tokens;
        if a.len() != n_live {
            return Err(Error::Shape {
                op: "inject_training_noise",
                lhs: vec![n_live],
                rhs: vec![a.len()],
            });
        }
        let mut stream = rng.split(rng.stream_id() ^ i as u64);
        let eps = gaussian(&mut stream, &[n_live, s.x.cols()]);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xv = g.frozen(&s.x);
        let av = g.constant(Tensor::matrix(n_live, 1, a.clone())?);
        let y = noise_var(&mut g, xv, av, &vars, cfg.beta, &eps, x.special_tokens, ln_eps)?;
        out.push(TokenSeq {
            x: g.value(y).clone(),
            live: s.live.clone(),
        });
    }
    Ok(TokenBatch {
        special_tokens: x.special_tokens,
        samples: out,
    })
}

/// Runs blocks `from..depth` (with noise after each noised layer) and the
/// classifier, starting from `state` = output of block `from − 1` (or the
/// embedding when `from == 0`). Noise after block `from − 1` must already be
/// applied by the caller if that block is noised.
fn noised_tail<'a>(
    g: &mut Graph<'a>,
    bvars: &ModelVars,
    avars: &AllocatorVars,
    config: &ModelConfig,
    beta: f64,
    layers: &BTreeSet<usize>,
    mut state: TokenState,
    from: usize,
    eps_for: &mut dyn FnMut(usize, usize) -> Tensor,
) -> Result<Var> {
    for (i, bv) in bvars.blocks.iter().enumerate().skip(from) {
        state = block_forward(g, bv, config, state, false)?.0;
        if layers.contains(&i) {
            state = apply_noise(g, avars, config, beta, state, i, eps_for)?;
        }
    }
    classify(g, bvars, config, &state)
}

fn apply_noise<'a>(
    g: &mut Graph<'a>,
    avars: &AllocatorVars,
    config: &ModelConfig,
    beta: f64,
    state: TokenState,
    layer: usize,
    eps_for: &mut dyn FnMut(usize, usize) -> Tensor,
) -> Result<TokenState> {
    let head = avars
        .heads
        .get(&layer)
        .ok_or_else(|| Error::Config(format!("no allocator head for noised layer {layer}")))?;
    let alpha = alpha_var(g, head, state.x, config.special_tokens)?;
    let eps = eps_for(layer, state.live.len());
    let x = noise_var(
        g,
        state.x,
        alpha,
        avars,
        beta,
        &eps,
        config.special_tokens,
        config.layernorm_eps,
    )?;
    Ok(TokenState {
        x,
        live: state.live,
    })
}

/// Logits of the noised forward pass for one sample, starting from the cached
/// output of the first noised block. `eps_for(layer, n_live)` supplies ε.
pub fn noised_forward<'a>(
    g: &mut Graph<'a>,
    bvars: &ModelVars,
    avars: &AllocatorVars,
    config: &ModelConfig,
    noise: &NoiseConfig,
    cached: &TokenSeq,
    eps_for: &mut dyn FnMut(usize, usize) -> Tensor,
) -> Result<Var> {
    let layers = noise.layer_set();
    let first = *layers
        .first()
        .ok_or_else(|| Error::Config("noised_layers is empty".into()))?;
    let x = g.constant(cached.x.clone());
    let state = TokenState {
        x,
        live: cached.live.clone(),
    };
    let state = apply_noise(g, avars, config, noise.beta, state, first, eps_for)?;
    noised_tail(g, bvars, avars, config, noise.beta, &layers, state, first + 1, eps_for)
}

/// Clean activations after block `layer` (no noise, no alpha_norm).
pub fn prefix_activations(
    backbone: &ModelParams,
    config: &ModelConfig,
    image: &Tensor,
    layer: usize,
) -> Result<TokenSeq> {
    let mut g = Graph::new();
    let vars = backbone.bind(&mut g, false);
    let mut state = embed(&mut g, &vars, config, image)?;
    for bv in &vars.blocks[..=layer] {
        state = block_forward(&mut g, bv, config, state, false)?.0;
    }
    Ok(TokenSeq {
        x: g.value(state.x).clone(),
        live: state.live,
    })
}

/// Standard-normal ε for one (epoch, sample, layer) triple.
pub fn noise_draw(seed: u64, epoch: usize, sample: usize, layer: usize, shape: &[usize]) -> Tensor {
    let idx = ((epoch as u64) << 32) | sample as u64;
    let mut rng = RngStream::new(seed, stream_id(40 + layer as u32, idx));
    gaussian(&mut rng, shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocatorHyper {
    pub lr: f64,
    #[serde(default = "default_alloc_epochs")]
    pub epochs: usize,
    #[serde(default = "default_alloc_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Also update the alpha_norm gain and shift; off means only the heads learn.
    #[serde(default = "default_true")]
    pub train_alpha_norm: bool,
    /// Pair every ε with −ε and average the two gradients.
    #[serde(default)]
    pub antithetic: bool,
}

fn default_alloc_epochs() -> usize {
    40
}

fn default_alloc_batch() -> usize {
    32
}

fn default_true() -> bool {
    true
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, m), v), g) in params.into_iter().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = Self::B1 * *mv + (1.0 - Self::B1) * gv;
                *vv = Self::B2 * *vv + (1.0 - Self::B2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains the allocator with Adam on the noised cross-entropy. The backbone is
/// bound frozen, so only allocator parameters receive gradients; activations up
/// to the first noised block are computed once and reused every epoch.
pub fn train_allocator(
    backbone: &ModelParams,
    config: &ModelConfig,
    init: AllocatorParams,
    data: &Dataset,
    noise: &NoiseConfig,
    hyper: &AllocatorHyper,
) -> Result<(AllocatorParams, Vec<EpochLog>)> {
    config.validate()?;
    noise.validate(config)?;
    let layers = noise.layer_set();
    let first = *layers
        .first()
        .ok_or_else(|| Error::Config("train_allocator needs noised layers".into()))?;
    if let Some(l) = layers.iter().find(|l| !init.heads.contains_key(l)) {
        return Err(Error::Config(format!("no allocator head for noised layer {l}")));
    }
    if data.samples.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let cache: Vec<TokenSeq> = data
        .samples
        .par_iter()
        .map(|s| prefix_activations(backbone, config, &s.image, first))
        .collect::<Result<_>>()?;

    let mut params = init;
    let shapes: Vec<Vec<usize>> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut adam = Adam::new(&shapes);
    let mut log = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let order = epoch_order(hyper.seed, 3, epoch, data.samples.len());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(hyper.batch) {
            let results: Vec<(f64, bool, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let (loss, ok, mut grads) = noised_sample_grads(
                        backbone, config, &params, noise, &cache[i], data.samples[i].label,
                        |layer, n| noise_draw(noise.seed, epoch, i, layer, &[n, config.dim]),
                    )?;
                    if !hyper.antithetic {
                        return Ok((loss, ok, grads));
                    }
                    let (loss2, _, grads2) = noised_sample_grads(
                        backbone, config, &params, noise, &cache[i], data.samples[i].label,
                        |layer, n| {
                            let mut e = noise_draw(noise.seed, epoch, i, layer, &[n, config.dim]);
                            e.data_mut().iter_mut().for_each(|v| *v = -*v);
                            e
                        },
                    )?;
                    for (a, b) in grads.iter_mut().zip(&grads2) {
                        a.data_mut()
                            .iter_mut()
                            .zip(b.data())
                            .for_each(|(x, y)| *x = 0.5 * (*x + y));
                    }
                    Ok((0.5 * (loss + loss2), ok, grads))
                })
                .collect::<Result<_>>()?;
            let mut per_sample = Vec::with_capacity(results.len());
            for (l, ok, grads) in results {
                loss_sum += l;
                correct += ok as usize;
                per_sample.push(grads);
            }
            if !loss_sum.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: "allocator loss is not finite".into(),
                });
            }
            let mut grads = sum_grads(per_sample).expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            if !hyper.train_alpha_norm {
                let k = grads.len();
                grads[k - 2].data_mut().fill(0.0);
                grads[k - 1].data_mut().fill(0.0);
            }
            adam.step(params.tensors_mut(), &grads, hyper.lr);
        }
        let n = data.samples.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok((params, log))
}

fn noised_sample_grads(
    backbone: &ModelParams,
    config: &ModelConfig,
    params: &AllocatorParams,
    noise: &NoiseConfig,
    cached: &TokenSeq,
    label: usize,
    mut eps_for: impl FnMut(usize, usize) -> Tensor,
) -> Result<(f64, bool, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bvars = backbone.bind(&mut g, false);
    let avars = params.bind(&mut g, true);
    let logits = noised_forward(&mut g, &bvars, &avars, config, noise, cached, &mut eps_for)?;
    let ok = tensor::argmax(g.value(logits).data()) == label;
    let loss = g.cross_entropy(logits, &[label])?;
    g.backward(loss)?;
    let grads = avars
        .all()
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect();
    Ok((g.value(loss).data()[0], ok, grads))
}

/// Inference-mode α at `layer`: clean forward through block `layer`, no noise
/// and no alpha_norm, then the layer's head.
pub fn collect_alpha(
    backbone: &ModelParams,
    config: &ModelConfig,
    allocator: &AllocatorParams,
    images: &[Tensor],
    layer: usize,
) -> Result<AlphaMap> {
    let head = allocator
        .heads
        .get(&layer)
        .ok_or_else(|| Error::Usage(format!("layer {layer} has no allocator head")))?;
    let alpha = images
        .par_iter()
        .map(|img| {
            let seq = prefix_activations(backbone, config, img, layer)?;
            let z = head_logits(head, &seq.x, config.special_tokens)?;
            let t = tensor::softmax(&Tensor::from_vec(z), 0)?;
            Ok(t.into_data())
        })
        .collect::<Result<_>>()?;
    Ok(AlphaMap { layer, alpha })
}

/// Channel-capacity diagnostic `log2(1 + P_signal / P_noise)`.
pub fn snr_capacity(p_signal: f64, p_noise: f64) -> Result<f64> {
    if !(p_noise > 0.0) {
        return Err(Error::Domain(format!("noise power must be > 0, got {p_noise}")));
    }
    if !(p_signal >= 0.0) {
        return Err(Error::Domain(format!("signal power must be >= 0, got {p_signal}")));
    }
    Ok((1.0 + p_signal / p_noise).log2())
}

/// Dense evaluation of the noised forward pass used in training, for
/// diagnostics: returns logits for one image with the given ε source.
pub fn noised_logits(
    backbone: &ModelParams,
    config: &ModelConfig,
    allocator: &AllocatorParams,
    noise: &NoiseConfig,
    image: &Tensor,
    eps_for: &mut dyn FnMut(usize, usize) -> Tensor,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bvars = backbone.bind(&mut g, false);
    let avars = allocator.bind(&mut g, false);
    let state = embed(&mut g, &bvars, config, image)?;
    let layers = noise.layer_set();
    let logits = noised_tail(&mut g, &bvars, &avars, config, noise.beta, &layers, state, 0, eps_for)?;
    Ok(g.value(logits).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::vit::TokenSeq;

    fn as_loss<'a, F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>>(f: F) -> F {
        f
    }

    fn cfg(special_tokens: usize) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            dim: 8,
            depth: 3,
            heads: 2,
            mlp_dim: 12,
            num_classes: 3,
            special_tokens,
            layernorm_eps: 1e-6,
        }
    }

    fn batch(rows: usize, special: usize, seed: u64) -> TokenBatch {
        let mut rng = RngStream::new(seed, 0);
        TokenBatch {
            special_tokens: special,
            samples: vec![TokenSeq {
                x: gaussian(&mut rng, &[rows, 8]),
                live: (0..rows - special).collect(),
            }],
        }
    }

    #[test]
    fn alpha_is_a_distribution() {
        let c = cfg(1);
        let p = AllocatorParams::init(&c, HeadKind::Mlp, None, &[0], 3).unwrap();
        let a = compute_alpha(&batch(5, 1, 1), &p.heads[&0]).unwrap();
        assert_eq!(a[0].len(), 4);
        assert!((a[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a[0].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_head_gives_uniform_alpha() {
        let c = cfg(0);
        let mut p = AllocatorParams::init(&c, HeadKind::Linear, None, &[0], 0).unwrap();
        p.tensors_mut().into_iter().take(2).for_each(|t| t.data_mut().fill(0.0));
        let a = compute_alpha(&batch(4, 0, 2), &p.heads[&0]).unwrap();
        assert!(a[0].iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn only_special_tokens_is_domain_error() {
        let c = cfg(1);
        let p = AllocatorParams::init(&c, HeadKind::Linear, None, &[0], 0).unwrap();
        let b = TokenBatch {
            special_tokens: 1,
            samples: vec![TokenSeq {
                x: Tensor::zeros(&[1, 8]),
                live: vec![],
            }],
        };
        assert!(matches!(compute_alpha(&b, &p.heads[&0]), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_respects_budget_and_special_tokens() {
        let c = cfg(1);
        let p = AllocatorParams::init(&c, HeadKind::Linear, None, &[0], 0).unwrap();
        let x = batch(6, 1, 4);
        let alpha = AlphaMap {
            layer: 0,
            alpha: compute_alpha(&x, &p.heads[&0]).unwrap(),
        };
        let rng = RngStream::new(9, 1);
        let nc = NoiseConfig {
            beta: 0.5,
            noised_layers: vec![0],
            seed: 9,
        };
        let clean = inject_training_noise(&x, &alpha, &p, &NoiseConfig { beta: 0.0, ..nc.clone() }, Mode::Train, &rng, 1e-6).unwrap();
        let noisy = inject_training_noise(&x, &alpha, &p, &nc, Mode::Train, &rng, 1e-6).unwrap();
        let (a, b) = (&clean.samples[0].x, &noisy.samples[0].x);
        // special row untouched by noise
        assert_eq!(a.row(0), b.row(0));
        // beta = 0 is exactly the identity-initialized layer norm
        let ln = tensor::layer_norm(&x.samples[0].x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-6).unwrap();
        assert!(a.max_abs_diff(&ln) < 1e-15);
        // the noise on patch row i is (1 − α_i)·β·ε_i, so rescaling by that factor
        // recovers the same ε the stream would draw
        let mut stream = rng.split(rng.stream_id());
        let eps = gaussian(&mut stream, &[5, 8]);
        for i in 0..5 {
            let f = nc.beta * (1.0 - alpha.alpha[0][i]);
            for j in 0..8 {
                let got = b.at2(i + 1, j) - a.at2(i + 1, j);
                assert!((got - f * eps.at2(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_at_inference_is_usage_error() {
        let c = cfg(1);
        let p = AllocatorParams::init(&c, HeadKind::Linear, None, &[0], 0).unwrap();
        let x = batch(3, 1, 0);
        let alpha = AlphaMap {
            layer: 0,
            alpha: compute_alpha(&x, &p.heads[&0]).unwrap(),
        };
        let nc = NoiseConfig {
            beta: 0.02,
            noised_layers: vec![0],
            seed: 0,
        };
        let r = inject_training_noise(&x, &alpha, &p, &nc, Mode::Eval, &RngStream::new(0, 0), 1e-6);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn snr_capacity_values() {
        assert_eq!(snr_capacity(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(snr_capacity(3.0, 1.0).unwrap(), 2.0);
        assert_eq!(snr_capacity(0.0, 2.0).unwrap(), 0.0);
        assert!(matches!(snr_capacity(1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn checkpoint_names_roundtrip() {
        let c = cfg(1);
        let p = AllocatorParams::init(&c, HeadKind::Mlp, Some(3), &[2, 0], 5).unwrap();
        let named: Vec<(String, Tensor)> =
            p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert!(named.iter().all(|(n, _)| n.starts_with("alloc.")));
        assert!(named.iter().any(|(n, _)| n == "alloc.layer2.w1"));
        assert_eq!(AllocatorParams::from_named(&c, named.clone()).unwrap(), p);
        let mut bad = named;
        bad[0].1 = Tensor::zeros(&[7, 3]);
        assert!(matches!(AllocatorParams::from_named(&c, bad), Err(Error::Config(_))));
    }

    #[test]
    fn collect_alpha_unknown_layer() {
        let c = cfg(1);
        let bb = ModelParams::init(&c, 0).unwrap();
        let p = AllocatorParams::init(&c, HeadKind::Linear, None, &[1], 0).unwrap();
        let img = Tensor::zeros(&[2, 8, 8]);
        assert!(matches!(
            collect_alpha(&bb, &c, &p, &[img.clone()], 0),
            Err(Error::Usage(_))
        ));
        let a = collect_alpha(&bb, &c, &p, &[img], 1).unwrap();
        assert_eq!(a.alpha[0].len(), 4);
    }

    #[test]
    fn noised_forward_gradients_match_finite_differences() {
        for (kind, special) in [(HeadKind::Linear, 1), (HeadKind::Mlp, 0)] {
            let c = cfg(special);
            let bb = ModelParams::init(&c, 1).unwrap();
            let layout = AllocatorParams::init(&c, kind, None, &[0, 1], 2).unwrap();
            let nc = NoiseConfig {
                beta: 0.5,
                noised_layers: vec![0, 1],
                seed: 3,
            };
            let mut rng = RngStream::new(4, 0);
            let img = gaussian(&mut rng, &[2, 8, 8]);
            let cached = prefix_activations(&bb, &c, &img, 0).unwrap();
            let params: Vec<Tensor> = layout.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let f = as_loss(|g, vars| {
                let bvars = bb.bind(g, false);
                let avars = AllocatorVars::from_flat(&layout, vars)?;
                let mut eps = |layer: usize, n: usize| noise_draw(nc.seed, 0, 0, layer, &[n, c.dim]);
                let logits = noised_forward(g, &bvars, &avars, &c, &nc, &cached, &mut eps)?;
                g.cross_entropy(logits, &[2])
            });
            let r = finite_diff_check(f, &params, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn zero_lr_leaves_allocator_unchanged() {
        let c = cfg(1);
        let bb = ModelParams::init(&c, 0).unwrap();
        let spec = crate::data::DatasetSpec {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            num_classes: 3,
            informative_mask: vec![0],
            samples_per_class: 2,
            ..Default::default()
        };
        let data = crate::data::generate_synthetic(&spec).unwrap();
        let init = AllocatorParams::init(&c, HeadKind::Linear, None, &[0], 0).unwrap();
        let nc = NoiseConfig {
            beta: 0.02,
            noised_layers: vec![0],
            seed: 0,
        };
        let hyper = AllocatorHyper {
            lr: 0.0,
            epochs: 2,
            batch: 4,
            seed: 0,
            train_alpha_norm: true,
            antithetic: false,
        };
        let (p, log) = train_allocator(&bb, &c, init.clone(), &data, &nc, &hyper).unwrap();
        assert_eq!(p, init);
        assert_eq!(log.len(), 2);
        let hyper = AllocatorHyper { lr: 0.01, ..hyper };
        let (p1, _) = train_allocator(&bb, &c, init.clone(), &data, &nc, &hyper).unwrap();
        let (p2, _) = train_allocator(&bb, &c, init.clone(), &data, &nc, &hyper).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, init);
    }
}
