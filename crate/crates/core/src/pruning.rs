//! Test-time token reduction: α-ranked keep sets, two-stage `(NK+s)`
//! schedules, similarity pruning over a bipartite split, and the random-drop
//! and CLS-attention baselines.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{head_logits, AllocatorParams};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::rng::{stream_id, RngStream};
use crate::tensor::{self, Tensor};
use crate::vit::{block_forward, classify, embed, ModelConfig, ModelParams, TokenState};

/// How many tokens a stage keeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    /// Fraction `K ∈ (0, 1]` of the live tokens, floored.
    Rate(f64),
    /// Exact number of tokens.
    Count(usize),
}

impl Keep {
    /// Tokens kept out of `live`.
    pub fn resolve(self, live: usize) -> usize {
        match self {
            Keep::Rate(k) => ((live as f64) * k + 1e-9).floor() as usize,
            Keep::Count(c) => c.min(live),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Keep::Rate(k) if !(k > 0.0 && k <= 1.0) => {
                Err(Error::Schedule(format!("keep rate must be in (0, 1], got {k}")))
            }
            Keep::Count(0) => Err(Error::Schedule("keep count must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleLayer,
    MultiLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Random,
    /// Alternate by descending α.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Drop,
    Merge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub partition: Partition,
    pub action: Action,
    /// Tokens to remove.
    #[serde(default)]
    pub r: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            partition: Partition::Random,
            action: Action::Drop,
            r: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub mode: Mode,
    /// 1-indexed: location `l` prunes the output of block `l`, before block `l + 1`.
    pub locations: Vec<usize>,
    pub rates: Vec<Keep>,
    #[serde(default)]
    pub s: usize,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub pre_block_similarity: bool,
}

impl PruneSchedule {
    pub fn single(location: usize, keep: Keep, s: usize) -> Self {
        Self {
            mode: Mode::SingleLayer,
            locations: vec![location],
            rates: vec![keep],
            s,
            similarity: SimilarityConfig::default(),
            pre_block_similarity: false,
        }
    }

    /// No pruning at all.
    pub fn dense(location: usize) -> Self {
        Self::single(location, Keep::Rate(1.0), 0)
    }

    /// The multi-layer protocol: locations 3, 4, 5 with rates 1.0, 0.95, 0.95
    /// and 40 tokens removed by similarity before the first block.
    pub fn paper_multi_layer() -> Self {
        Self {
            mode: Mode::MultiLayer,
            locations: vec![3, 4, 5],
            rates: vec![Keep::Rate(1.0), Keep::Rate(0.95), Keep::Rate(0.95)],
            s: 40,
            similarity: SimilarityConfig::default(),
            pre_block_similarity: true,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.locations.is_empty() {
            return Err(Error::Schedule("schedule needs at least one location".into()));
        }
        if self.rates.len() != self.locations.len() {
            return Err(Error::Schedule(format!(
                "{} rates for {} locations",
                self.rates.len(),
                self.locations.len()
            )));
        }
        if self.mode == Mode::SingleLayer && self.locations.len() != 1 {
            return Err(Error::Schedule("single-layer mode takes exactly one location".into()));
        }
        if self.locations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule("locations must be strictly increasing".into()));
        }
        if let Some(&l) = self
            .locations
            .iter()
            .find(|&&l| l == 0 || l > config.depth)
        {
            return Err(Error::Schedule(format!(
                "location {l} outside [1, {}]",
                config.depth
            )));
        }
        self.rates.iter().try_for_each(|k| k.validate())
    }

    /// Allocator layers (0-based block indices) whose heads this schedule reads.
    pub fn alpha_layers(&self) -> Vec<usize> {
        self.locations.iter().map(|l| l - 1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    AlphaRanked,
    Similarity,
    MergedInto(usize),
    Random,
    ClsAttention,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::AlphaRanked => write!(f, "alpha_ranked"),
            Tag::Similarity => write!(f, "similarity"),
            Tag::MergedInto(j) => write!(f, "merged-into:{j}"),
            Tag::Random => write!(f, "random"),
            Tag::ClsAttention => write!(f, "cls_attention"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha_ranked" => Tag::AlphaRanked,
            "similarity" => Tag::Similarity,
            "random" => Tag::Random,
            "cls_attention" => Tag::ClsAttention,
            _ => {
                let j = s
                    .strip_prefix("merged-into:")
                    .and_then(|j| j.parse().ok())
                    .ok_or_else(|| Error::Format {
                        offset: 0,
                        msg: format!("unknown removal tag {s:?}"),
                    })?;
                Tag::MergedInto(j)
            }
        })
    }
}

/// Surviving patch indices (original numbering, ascending) and the tokens
/// removed at one stage. Special tokens are never listed and always survive.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct KeepSet {
    pub kept: Vec<usize>,
    pub removed: Vec<(usize, Tag)>,
}

fn check_keep(keep: usize, live: usize) -> Result<()> {
    if keep == 0 || keep > live {
        return Err(Error::Domain(format!(
            "keep count {keep} outside [1, {live}]"
        )));
    }
    Ok(())
}

/// Positions (into `scores`) of the `keep` largest scores, ties by lower position,
/// returned ascending.
fn top_positions(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..keep].to_vec();
    top.sort_unstable();
    top
}

fn keep_positions(live: &[usize], positions: &[usize], tag: Tag) -> KeepSet {
    let mut keep = vec![false; live.len()];
    positions.iter().for_each(|&p| keep[p] = true);
    let mut out = KeepSet::default();
    for (p, &idx) in live.iter().enumerate() {
        if keep[p] {
            out.kept.push(idx);
        } else {
            out.removed.push((idx, tag));
        }
    }
    out
}

/// Keeps the `keep` live tokens with the largest α (ties by lower original index).
/// `live` holds the original patch index of each entry of `alpha`.
pub fn rank_and_keep(alpha: &[f64], live: &[usize], keep: usize) -> Result<KeepSet> {
    if alpha.len() != live.len() {
        return Err(Error::Shape {
            op: "rank_and_keep",
            lhs: vec![alpha.len()],
            rhs: vec![live.len()],
        });
    }
    check_keep(keep, live.len())?;
    Ok(keep_positions(live, &top_positions(alpha, keep), Tag::AlphaRanked))
}

/// Uniform sample of `keep` live tokens without replacement.
pub fn baseline_random_drop(live: &[usize], keep: usize, rng: &mut RngStream) -> Result<KeepSet> {
    check_keep(keep, live.len())?;
    let mut order: Vec<usize> = (0..live.len()).collect();
    rng.shuffle(&mut order);
    Ok(keep_positions(live, &order[..keep], Tag::Random))
}

/// Keeps the `keep` patch tokens with the largest head-averaged CLS attention.
/// `cls_row` covers the whole sequence, special tokens first.
pub fn baseline_cls_topk(
    config: &ModelConfig,
    cls_row: &[f64],
    live: &[usize],
    keep: usize,
) -> Result<KeepSet> {
    if config.special_tokens == 0 {
        return Err(Error::Unsupported(
            "CLS top-k needs a CLS token; mean-pooled backbones have none".into(),
        ));
    }
    let sp = config.special_tokens;
    if cls_row.len() != sp + live.len() {
        return Err(Error::Shape {
            op: "baseline_cls_topk",
            lhs: vec![cls_row.len()],
            rhs: vec![sp + live.len()],
        });
    }
    check_keep(keep, live.len())?;
    Ok(keep_positions(
        live,
        &top_positions(&cls_row[sp..], keep),
        Tag::ClsAttention,
    ))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Splits live positions `0..n` into (A, B); B gets the extra token on odd counts.
pub fn partition(
    n: usize,
    kind: Partition,
    alpha: Option<&[f64]>,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    match kind {
        Partition::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let b = order.split_off(n / 2);
            Ok((order, b))
        }
        Partition::Sequential => {
            let alpha = alpha.ok_or_else(|| {
                Error::Schedule("sequential partition needs allocator scores".into())
            })?;
            if alpha.len() != n {
                return Err(Error::Shape {
                    op: "partition",
                    lhs: vec![n],
                    rhs: vec![alpha.len()],
                });
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (rank, &p) in order.iter().enumerate() {
                if rank % 2 == 0 && !(n % 2 == 1 && rank == n - 1) {
                    a.push(p);
                } else {
                    b.push(p);
                }
            }
            Ok((a, b))
        }
    }
}

/// Removes `cfg.r` tokens from group B: each B token is matched to its most
/// cosine-similar A token, B is sorted by that score (descending, ties by lower
/// original index) and the top `r` are dropped or averaged into their match.
///
/// `x` is `[special + live.len(), D]`; returns the reduced rows and the stage's keep set.
pub fn similarity_prune(
    x: &Tensor,
    special_tokens: usize,
    live: &[usize],
    cfg: &SimilarityConfig,
    alpha: Option<&[f64]>,
    rng: &mut RngStream,
) -> Result<(Tensor, KeepSet)> {
    let n = live.len();
    if x.rows() != special_tokens + n {
        return Err(Error::Shape {
            op: "similarity_prune",
            lhs: vec![x.rows()],
            rhs: vec![special_tokens + n],
        });
    }
    if cfg.r == 0 {
        return Ok((
            x.clone(),
            KeepSet {
                kept: live.to_vec(),
                removed: Vec::new(),
            },
        ));
    }
    if n < 2 || cfg.r > n / 2 {
        return Err(Error::Domain(format!(
            "cannot remove {} of {n} tokens by similarity (at most {})",
            cfg.r,
            n / 2
        )));
    }
    let (a, b) = partition(n, cfg.partition, alpha, rng)?;
    let row = |p: usize| x.row(special_tokens + p);
    let mut matches: Vec<(usize, usize, f64)> = b
        .iter()
        .map(|&bp| {
            let mut best = (a[0], f64::NEG_INFINITY);
            for &ap in &a {
                let c = cosine(row(bp), row(ap));
                if c > best.1 || (c == best.1 && live[ap] < live[best.0]) {
                    best = (ap, c);
                }
            }
            (bp, best.0, best.1)
        })
        .collect();
    matches.sort_by(|p, q| q.2.total_cmp(&p.2).then(live[p.0].cmp(&live[q.0])));

    let mut out = x.clone();
    let mut removed = vec![None; n];
    for &(bp, ap, _) in &matches[..cfg.r] {
        removed[bp] = Some(match cfg.action {
            Action::Drop => Tag::Similarity,
            Action::Merge => {
                let bv = out.row(special_tokens + bp).to_vec();
                out.row_mut(special_tokens + ap)
                    .iter_mut()
                    .zip(&bv)
                    .for_each(|(av, bv)| *av = 0.5 * (*av + bv));
                Tag::MergedInto(live[ap])
            }
        });
    }
    let mut rows: Vec<usize> = (0..special_tokens).collect();
    let mut keep = KeepSet::default();
    for p in 0..n {
        match removed[p] {
            Some(tag) => keep.removed.push((live[p], tag)),
            None => {
                rows.push(special_tokens + p);
                keep.kept.push(live[p]);
            }
        }
    }
    Ok((out.select_rows(&rows)?, keep))
}

/// Tokens (special included) entering each block under `schedule`, computed
/// from the counting rules alone.
pub fn schedule_profile(config: &ModelConfig, schedule: &PruneSchedule) -> Result<Vec<usize>> {
    config.validate()?;
    schedule.validate(config)?;
    let sp = config.special_tokens;
    let mut n = config.num_patches();
    if schedule.mode == Mode::MultiLayer && schedule.pre_block_similarity && schedule.s > 0 {
        if schedule.s > n / 2 {
            return Err(Error::Domain(format!(
                "cannot remove {} of {n} tokens by similarity",
                schedule.s
            )));
        }
        n -= schedule.s;
    }
    let mut profile = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        profile.push(sp + n);
        let Some(at) = schedule.locations.iter().position(|&l| l == i + 1) else {
            continue;
        };
        let target = schedule.rates[at].resolve(n);
        if target == 0 {
            return Err(Error::Schedule(format!(
                "location {} would keep no tokens out of {n}",
                i + 1
            )));
        }
        if schedule.mode == Mode::SingleLayer {
            let first = (target + schedule.s).min(n);
            if first - target > first / 2 {
                return Err(Error::Domain(format!(
                    "cannot remove {} of {first} tokens by similarity",
                    first - target
                )));
            }
        }
        n = target;
    }
    Ok(profile)
}

/// Which scores pick the tokens at each location.
#[derive(Clone, Copy, Debug)]
pub enum Ranker<'a> {
    Allocator(&'a AllocatorParams),
    Random,
    ClsAttention,
}

/// One pruning event for one sample. `layer` is the 0-based index of the block
/// that receives the reduced sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryEntry {
    pub sample: usize,
    pub layer: usize,
    pub keep: KeepSet,
}

impl fmt::Display for HistoryEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kept: Vec<String> = self.keep.kept.iter().map(|i| i.to_string()).collect();
        let removed: Vec<String> = self
            .keep
            .removed
            .iter()
            .map(|(i, t)| format!("{i}:{t}"))
            .collect();
        write!(
            f,
            "{},{},kept={},removed={}",
            self.sample,
            self.layer,
            kept.join(";"),
            removed.join(";")
        )
    }
}

impl FromStr for HistoryEntry {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            offset: 0,
            msg: format!("{msg} in history line {line:?}"),
        };
        let mut parts = line.splitn(4, ',');
        let sample = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad sample"))?;
        let layer = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad layer"))?;
        let kept = parts
            .next()
            .and_then(|s| s.strip_prefix("kept="))
            .ok_or_else(|| bad("missing kept="))?;
        let removed = parts
            .next()
            .and_then(|s| s.strip_prefix("removed="))
            .ok_or_else(|| bad("missing removed="))?;
        let kept = kept
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad("bad kept index")))
            .collect::<Result<_>>()?;
        let removed = removed
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (i, tag) = s.split_once(':').ok_or_else(|| bad("bad removed entry"))?;
                Ok((i.parse().map_err(|_| bad("bad removed index"))?, tag.parse()?))
            })
            .collect::<Result<_>>()?;
        Ok(HistoryEntry {
            sample,
            layer,
            keep: KeepSet { kept, removed },
        })
    }
}

pub fn write_history(entries: &[HistoryEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug)]
pub struct ScheduleOutput {
    /// `[B, num_classes]`
    pub logits: Tensor,
    pub history: Vec<HistoryEntry>,
    /// Tokens (special included) entering each block.
    pub profile: Vec<usize>,
}

struct SampleRun {
    logits: Vec<f64>,
    history: Vec<HistoryEntry>,
    profile: Vec<usize>,
}

fn select(g: &mut Graph<'_>, state: TokenState, keep: &KeepSet, special: usize) -> Result<TokenState> {
    let mut rows: Vec<usize> = (0..special).collect();
    let mut k = 0;
    for (p, &idx) in state.live.iter().enumerate() {
        if k < keep.kept.len() && keep.kept[k] == idx {
            rows.push(special + p);
            k += 1;
        }
    }
    let x = g.select_rows(state.x, &rows)?;
    Ok(TokenState {
        x,
        live: keep.kept.clone(),
    })
}

fn similarity_stage(
    g: &mut Graph<'_>,
    state: TokenState,
    config: &ModelConfig,
    cfg: &SimilarityConfig,
    alpha: Option<&[f64]>,
    sample: usize,
    layer: usize,
) -> Result<(TokenState, KeepSet)> {
    let mut rng = RngStream::new(cfg.seed, stream_id(50 + layer as u32, sample as u64));
    let x = g.value(state.x).clone();
    let (reduced, keep) = similarity_prune(&x, config.special_tokens, &state.live, cfg, alpha, &mut rng)?;
    let xv = g.constant(reduced);
    Ok((
        TokenState {
            x: xv,
            live: keep.kept.clone(),
        },
        keep,
    ))
}

fn run_sample(
    backbone: &ModelParams,
    config: &ModelConfig,
    ranker: Ranker<'_>,
    image: &Tensor,
    schedule: &PruneSchedule,
    sample: usize,
    seed: u64,
) -> Result<SampleRun> {
    let sp = config.special_tokens;
    let mut g = Graph::new();
    let vars = backbone.bind(&mut g, false);
    let mut state = embed(&mut g, &vars, config, image)?;
    let mut history = Vec::new();
    let mut profile = Vec::with_capacity(config.depth + 1);

    if schedule.mode == Mode::MultiLayer && schedule.pre_block_similarity && schedule.s > 0 {
        let cfg = SimilarityConfig {
            r: schedule.s,
            ..schedule.similarity.clone()
        };
        let (next, keep) = similarity_stage(&mut g, state, config, &cfg, None, sample, 0)?;
        state = next;
        history.push(HistoryEntry {
            sample,
            layer: 0,
            keep,
        });
    }

    let want_attention = matches!(ranker, Ranker::ClsAttention);
    for (i, bv) in vars.blocks.iter().enumerate() {
        profile.push(sp + state.live.len());
        let (next, cls_row) = block_forward(&mut g, bv, config, state, want_attention)?;
        state = next;
        let Some(at) = schedule.locations.iter().position(|&l| l == i + 1) else {
            continue;
        };
        let n = state.live.len();
        let target = schedule.rates[at].resolve(n);
        if target == 0 {
            return Err(Error::Schedule(format!(
                "location {} would keep no tokens out of {n}",
                i + 1
            )));
        }
        let (first, r) = match schedule.mode {
            Mode::SingleLayer => {
                let first = (target + schedule.s).min(n);
                (first, first - target)
            }
            Mode::MultiLayer => (target, 0),
        };
        let alpha = match ranker {
            Ranker::Allocator(alloc) => {
                let head = alloc.heads.get(&i).ok_or_else(|| {
                    Error::Schedule(format!("no allocator head for location {}", i + 1))
                })?;
                let z = head_logits(head, g.value(state.x), sp)?;
                Some(tensor::softmax(&Tensor::from_vec(z), 0)?.into_data())
            }
            _ => None,
        };
        let keep = match ranker {
            Ranker::Allocator(_) => rank_and_keep(alpha.as_deref().unwrap(), &state.live, first)?,
            Ranker::Random => {
                let mut rng = RngStream::new(seed, stream_id(60 + i as u32, sample as u64));
                baseline_random_drop(&state.live, first, &mut rng)?
            }
            Ranker::ClsAttention => {
                let row = cls_row.ok_or_else(|| {
                    Error::Unsupported("CLS attention needs a CLS token".into())
                })?;
                baseline_cls_topk(config, &row, &state.live, first)?
            }
        };
        let survivors_alpha: Option<Vec<f64>> = alpha.map(|a| {
            state
                .live
                .iter()
                .zip(&a)
                .filter(|(idx, _)| keep.kept.binary_search(idx).is_ok())
                .map(|(_, &v)| v)
                .collect()
        });
        state = select(&mut g, state, &keep, sp)?;
        let mut entry = keep;
        if r > 0 {
            let cfg = SimilarityConfig {
                r,
                ..schedule.similarity.clone()
            };
            let (next, sim) = similarity_stage(
                &mut g,
                state,
                config,
                &cfg,
                survivors_alpha.as_deref(),
                sample,
                i + 1,
            )?;
            state = next;
            entry.kept = sim.kept;
            entry.removed.extend(sim.removed);
            entry.removed.sort_by_key(|(idx, _)| *idx);
        }
        history.push(HistoryEntry {
            sample,
            layer: i + 1,
            keep: entry,
        });
    }
    let logits = classify(&mut g, &vars, config, &state)?;
    Ok(SampleRun {
        logits: g.value(logits).data().to_vec(),
        history,
        profile,
    })
}

/// Runs the pruned forward pass over `images`. Every sample follows the same
/// schedule, so the token profile is shared.
pub fn apply_schedule(
    backbone: &ModelParams,
    config: &ModelConfig,
    ranker: Ranker<'_>,
    images: &[Tensor],
    schedule: &PruneSchedule,
    seed: u64,
) -> Result<ScheduleOutput> {
    config.validate()?;
    schedule.validate(config)?;
    if images.is_empty() {
        return Err(Error::Domain("apply_schedule needs at least one image".into()));
    }
    match ranker {
        Ranker::Allocator(alloc) => {
            if let Some(l) = schedule
                .alpha_layers()
                .into_iter()
                .find(|l| !alloc.heads.contains_key(l))
            {
                return Err(Error::Schedule(format!(
                    "location {} has no allocator head",
                    l + 1
                )));
            }
        }
        Ranker::ClsAttention if config.special_tokens == 0 => {
            return Err(Error::Unsupported(
                "CLS top-k needs a CLS token; mean-pooled backbones have none".into(),
            ));
        }
        _ => {}
    }
    let pre_block = schedule.mode == Mode::MultiLayer && schedule.pre_block_similarity;
    if schedule.similarity.partition == Partition::Sequential
        && schedule.s > 0
        && (pre_block || !matches!(ranker, Ranker::Allocator(_)))
    {
        return Err(Error::Schedule("sequential partition needs allocator scores".into()));
    }
    let runs: Vec<SampleRun> = images
        .par_iter()
        .enumerate()
        .map(|(k, img)| run_sample(backbone, config, ranker, img, schedule, k, seed))
        .collect::<Result<_>>()?;
    let profile = runs[0].profile.clone();
    let mut logits = Vec::with_capacity(images.len() * config.num_classes);
    let mut history = Vec::new();
    for r in runs {
        debug_assert_eq!(r.profile, profile);
        logits.extend(r.logits);
        history.extend(r.history);
    }
    Ok(ScheduleOutput {
        logits: Tensor::matrix(images.len(), config.num_classes, logits)?,
        history,
        profile,
    })
}
