//! The five subcommands. Each reads an [`ExperimentConfig`], writes its
//! artifacts under `config.out`, and records itself in `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tnt_core::allocator::{collect_alpha, train_allocator, AllocatorParams};
use tnt_core::container;
use tnt_core::cost::{self, flops_with_allocator, throughput_measure, FlopsReport};
use tnt_core::data::{generate_synthetic, load_container, Dataset};
use tnt_core::pruning::{
    apply_schedule, parse_history, schedule_profile, write_history, Action, Keep, Partition, PruneSchedule, Ranker,
};
use tnt_core::vit::{train_backbone, EpochLog, ModelParams};
use tnt_core::Tensor;

use crate::config::{DataSource, ExperimentConfig, Method};
use crate::error::{io_err, CliError, Result};
use crate::metrics::{mask_auc, mean, top1};
use crate::render::{render_keep, render_plain, to_svg};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn owned(named: Vec<(String, &Tensor)>) -> Vec<(String, Tensor)> {
    named.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

/// (train, held-out) as configured.
pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec)?,
        DataSource::Container(path) => load_container(path)?,
    };
    let m = &config.model;
    if data.image_size != m.image_size
        || data.patch_size != m.patch_size
        || data.channels != m.channels
        || data.num_classes != m.num_classes
    {
        return Err(CliError::Data(
            "dataset shape does not match the model configuration".into(),
        ));
    }
    Ok(data.split(config.holdout_fraction)?)
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in log {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.loss, e.accuracy);
    }
    s
}

pub fn backbone_path(out: &Path, seed: u64) -> PathBuf {
    seed_dir(out, seed).join("backbone.tntc")
}

pub fn allocator_path(out: &Path, seed: u64) -> PathBuf {
    seed_dir(out, seed).join("allocator.tntc")
}

pub fn load_backbone(config: &ExperimentConfig, seed: u64) -> Result<ModelParams> {
    let path = backbone_path(&config.out, seed);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "missing backbone checkpoint {} (run train-backbone first)",
            path.display()
        )));
    }
    Ok(ModelParams::from_named(&config.model, container::load(&path)?)?)
}

pub fn load_allocator(config: &ExperimentConfig, seed: u64) -> Result<AllocatorParams> {
    let path = allocator_path(&config.out, seed);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "missing allocator checkpoint {} (run train-allocator first)",
            path.display()
        )));
    }
    Ok(AllocatorParams::from_named(&config.model, container::load(&path)?)?)
}

fn backbone_hash(params: &ModelParams) -> String {
    sha256_hex(&container::encode(&owned(params.named_tensors())))
}

/// Defaults fixed by the method description, echoed into every manifest.
pub fn paper_defaults() -> Value {
    json!({
        "beta": 0.02,
        "allocator_epochs": 40,
        "similarity_s_deit": 25,
        "similarity_s_vit": 30,
        "multi_layer_locations": [3, 4, 5],
        "multi_layer_rates": [1.0, 0.95, 0.95],
        "multi_layer_s": 40,
    })
}

/// Merges one command's entry into `out/manifest.json`.
pub fn record_manifest(config: &ExperimentConfig, command: &str, extra: Value) -> Result<()> {
    let path = config.out.join("manifest.json");
    let mut commands: BTreeMap<String, Value> = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v.get("commands").cloned())
        .and_then(|c| serde_json::from_value(c).ok())
        .unwrap_or_default();
    // the manifest sits in `out`, so the directory itself is not part of the record
    let cfg_json = ExperimentConfig {
        out: PathBuf::new(),
        ..config.clone()
    }
    .to_json();
    let mut entry = json!({
        "config_sha256": sha256_hex(cfg_json.as_bytes()),
        "seeds": config.seeds,
        "config": serde_json::from_str::<Value>(&cfg_json).expect("config is JSON"),
    });
    if let (Value::Object(e), Value::Object(x)) = (&mut entry, extra) {
        e.extend(x);
    }
    commands.insert(command.to_string(), entry);
    let manifest = json!({
        "version": VERSION,
        "paper_defaults": paper_defaults(),
        "commands": commands,
    });
    write(&path, serde_json::to_string_pretty(&manifest).expect("manifest is JSON") + "\n")
}

pub fn cmd_train_backbone(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let (train, _) = load_data(config)?;
    let mut hashes = BTreeMap::new();
    for &seed in &config.seeds {
        let (params, log) = train_backbone(&train, &config.model, &config.backbone_hyper(seed))?;
        let bytes = container::encode(&owned(params.named_tensors()));
        hashes.insert(seed.to_string(), sha256_hex(&bytes));
        write(&backbone_path(&config.out, seed), &bytes)?;
        write(&seed_dir(&config.out, seed).join("backbone_log.csv"), log_csv(&log))?;
    }
    record_manifest(config, "train-backbone", json!({ "backbone_sha256": hashes }))
}

pub fn cmd_train_allocator(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let (train, _) = load_data(config)?;
    let train = match config.allocator.train_samples {
        Some(n) if n < train.len() => train.subset(&(0..n).collect::<Vec<_>>()),
        _ => train,
    };
    let mut hashes = BTreeMap::new();
    for &seed in &config.seeds {
        let backbone = load_backbone(config, seed)?;
        let before = backbone_hash(&backbone);
        let init = AllocatorParams::init(
            &config.model,
            config.allocator.head,
            config.allocator.hidden,
            &config.allocator.noised_layers,
            seed,
        )?;
        let (alloc, log) = train_allocator(
            &backbone,
            &config.model,
            init,
            &train,
            &config.noise(seed),
            &config.allocator_hyper(seed),
        )?;
        if backbone_hash(&backbone) != before {
            return Err(CliError::Data("backbone changed during allocator training".into()));
        }
        let bytes = container::encode(&owned(alloc.named_tensors()));
        hashes.insert(seed.to_string(), json!({ "backbone": before, "allocator": sha256_hex(&bytes) }));
        write(&allocator_path(&config.out, seed), &bytes)?;
        write(&seed_dir(&config.out, seed).join("allocator_log.csv"), log_csv(&log))?;
    }
    record_manifest(
        config,
        "train-allocator",
        json!({ "beta": config.allocator.beta, "epochs": config.allocator.epochs, "sha256": hashes }),
    )
}

/// One line of `sweep.csv`. `None` fields print empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub seed: u64,
    pub keep_count: usize,
    pub final_tokens: Option<usize>,
    pub top1: Option<f64>,
    pub gflops: Option<f64>,
    pub total_macs: Option<u64>,
    pub throughput: Option<f64>,
    pub status: String,
}

pub const SWEEP_HEADER: &str =
    "method,seed,keep_count,final_token_count,top1_accuracy,gflops,total_macs,throughput,status";

impl SweepRow {
    fn csv_line(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.keep_count,
            opt(self.final_tokens),
            opt(self.top1.map(|a| format!("{a:.6}"))),
            opt(self.gflops.map(|g| format!("{g:.9}"))),
            opt(self.total_macs),
            opt(self.throughput.map(|t| format!("{t:.1}"))),
            self.status
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Evaluation randomness for `seed`, independent of every training stream.
fn eval_seed(config: &ExperimentConfig, seed: u64) -> u64 {
    seed ^ config.sweep.eval_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// The schedule a method runs at one keep point.
pub fn method_schedule(config: &ExperimentConfig, method: Method, count: usize, seed: u64) -> PruneSchedule {
    let mut s = config.schedule_for(count);
    if method == Method::Dense {
        s.rates.iter_mut().for_each(|r| *r = Keep::Rate(1.0));
        s.pre_block_similarity = false;
    }
    s.similarity.seed = eval_seed(config, seed);
    match method {
        Method::Dense | Method::TntNoSim | Method::Random | Method::ClsTopk => s.s = 0,
        Method::TntSeq => s.similarity.partition = Partition::Sequential,
        Method::TntMerge => s.similarity.action = Action::Merge,
        Method::Tnt => {}
    }
    s
}

struct Shard {
    row: SweepRow,
    history: Option<String>,
}

fn run_shard(
    config: &ExperimentConfig,
    backbone: &ModelParams,
    alloc: Option<&AllocatorParams>,
    test: &Dataset,
    method: Method,
    count: usize,
    seed: u64,
) -> Result<Shard> {
    let mut row = SweepRow {
        method,
        seed,
        keep_count: count,
        final_tokens: None,
        top1: None,
        gflops: None,
        total_macs: None,
        throughput: None,
        status: "ok".into(),
    };
    let ranker = match method {
        Method::Random => Ranker::Random,
        Method::ClsTopk => Ranker::ClsAttention,
        Method::Dense => alloc.map_or(Ranker::Random, Ranker::Allocator),
        _ => Ranker::Allocator(alloc.expect("allocator loaded for TNT methods")),
    };
    let schedule = method_schedule(config, method, count, seed);
    let images = test.images();
    let out = match apply_schedule(backbone, &config.model, ranker, &images, &schedule, eval_seed(config, seed)) {
        Ok(o) => o,
        Err(tnt_core::Error::Unsupported(_)) => {
            row.status = "unsupported".into();
            return Ok(Shard { row, history: None });
        }
        Err(e) => return Err(e.into()),
    };
    let labels: Vec<usize> = test.samples.iter().map(|s| s.label).collect();
    row.top1 = Some(top1(out.logits.data(), config.model.num_classes, &labels));
    row.final_tokens = Some(
        out.history
            .iter()
            .rfind(|h| h.sample == 0)
            .map_or(config.model.num_patches(), |h| h.keep.kept.len()),
    );
    let report: FlopsReport = match (method.uses_allocator(), alloc) {
        (true, Some(a)) => flops_with_allocator(&config.model, &out.profile, Some(a), &schedule.alpha_layers())?,
        _ => cost::flops_estimate(&config.model, &out.profile)?,
    };
    row.gflops = Some(report.total_gflops());
    row.total_macs = Some(report.total_macs);
    let history = config.sweep.write_history.then(|| write_history(&out.history));
    Ok(Shard { row, history })
}

/// Evaluates every (seed, method, keep point) on the held-out split and writes
/// `sweep.csv`, `alpha_auc.csv` and, optionally, per-shard keep histories.
pub fn cmd_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let (_, test) = load_data(config)?;
    if test.is_empty() {
        return Err(CliError::Config("sweep needs a non-empty held-out split".into()));
    }
    let mut methods = config.sweep.methods.clone();
    methods.sort();
    methods.dedup();
    let points = config.keep_points();
    let need_alloc = methods.iter().any(|m| m.uses_allocator());
    let mut rows = Vec::new();
    let mut auc_csv = String::from("seed,layer,auc\n");
    for &seed in &config.seeds {
        let backbone = load_backbone(config, seed)?;
        let alloc = if need_alloc { Some(load_allocator(config, seed)?) } else { None };
        let mut jobs: Vec<(Method, usize)> = Vec::new();
        for &m in &methods {
            if m == Method::Dense {
                jobs.push((m, config.model.num_patches()));
            } else {
                jobs.extend(points.iter().map(|&c| (m, c)));
            }
        }
        let shards: Vec<Shard> = jobs
            .par_iter()
            .map(|&(m, c)| run_shard(config, &backbone, alloc.as_ref(), &test, m, c, seed))
            .collect::<Result<_>>()?;
        for (shard, &(m, c)) in shards.into_iter().zip(&jobs) {
            if let Some(h) = shard.history {
                write(&seed_dir(&config.out, seed).join(format!("history/{m}-{c}.txt")), h)?;
            }
            rows.push(shard.row);
        }
        if config.sweep.throughput {
            for row in rows.iter_mut().filter(|r| r.seed == seed && r.status == "ok") {
                let ranker = match row.method {
                    Method::Random => Ranker::Random,
                    Method::ClsTopk => Ranker::ClsAttention,
                    _ => alloc.as_ref().map_or(Ranker::Random, Ranker::Allocator),
                };
                let schedule = method_schedule(config, row.method, row.keep_count, seed);
                let t = throughput_measure(
                    &backbone,
                    &config.model,
                    ranker,
                    (row.method != Method::Dense).then_some(&schedule),
                    &test.images(),
                    config.sweep.throughput_batch,
                    1,
                    config.sweep.throughput_iters,
                )?;
                row.throughput = Some(t.images_per_second);
            }
        }
        if let Some(a) = &alloc {
            if test.samples.iter().all(|s| s.mask.is_some()) {
                for layer in a.noised_layers() {
                    let am = collect_alpha(&backbone, &config.model, a, &test.images(), layer)?;
                    let aucs: Vec<f64> = am
                        .alpha
                        .iter()
                        .zip(&test.samples)
                        .filter_map(|(al, s)| mask_auc(al, s.mask.as_deref().unwrap_or(&[])))
                        .collect();
                    let _ = writeln!(auc_csv, "{seed},{layer},{:.6}", mean(&aucs));
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.seed, a.method, std::cmp::Reverse(a.keep_count)).cmp(&(b.seed, b.method, std::cmp::Reverse(b.keep_count)))
    });
    write(&config.out.join("sweep.csv"), sweep_csv(&rows))?;
    if need_alloc {
        write(&config.out.join("alpha_auc.csv"), auc_csv)?;
    }
    record_manifest(
        config,
        "sweep",
        json!({ "keep_points": points, "eval_seed": config.sweep.eval_seed }),
    )?;
    Ok(rows)
}

/// MAC report for a named preset, an explicit token profile, or the
/// configured model and schedule.
pub fn flops_report(config: &ExperimentConfig, preset: Option<&str>) -> Result<FlopsReport> {
    let preset = preset.or(config.flops.preset.as_deref());
    let model = match preset {
        Some(name) => cost::preset(name)?,
        None => config.model.clone(),
    };
    let profile = match (&config.flops.tokens_per_layer, preset) {
        (Some(p), _) => p.clone(),
        (None, Some(_)) => cost::dense_profile(&model),
        (None, None) => schedule_profile(&model, &config.schedule)?,
    };
    Ok(cost::flops_estimate(&model, &profile)?)
}

pub fn cmd_flops(config: &ExperimentConfig, preset: Option<&str>) -> Result<FlopsReport> {
    let report = flops_report(config, preset)?;
    write(&config.out.join("flops.csv"), report.to_csv())?;
    record_manifest(
        config,
        "flops",
        json!({ "preset": preset.or(config.flops.preset.as_deref()), "gflops": report.total_gflops() }),
    )?;
    Ok(report)
}

/// Renders the input and every recorded stage of each requested sample.
/// Sample ids index the held-out split; `None` renders every sample in the history.
pub fn cmd_render_map(config: &ExperimentConfig, history: &Path, samples: Option<&[usize]>) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(history).map_err(io_err(history))?;
    let entries = parse_history(&text)?;
    let (_, test) = load_data(config)?;
    let ids: Vec<usize> = match samples {
        Some(s) => s.to_vec(),
        None => {
            let mut ids: Vec<usize> = entries.iter().map(|e| e.sample).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        }
    };
    let patch = config.model.patch_size;
    let mut written = Vec::new();
    for id in ids {
        let sample = test
            .samples
            .get(id)
            .ok_or_else(|| CliError::Data(format!("sample {id} not in the held-out split ({} samples)", test.len())))?;
        let stages: Vec<_> = entries.iter().filter(|e| e.sample == id).collect();
        if stages.is_empty() {
            return Err(CliError::Data(format!("sample {id} has no entries in {}", history.display())));
        }
        let plain = render_plain(&sample.image)?;
        let all: Vec<usize> = (0..config.model.num_patches()).collect();
        let path = config.out.join(format!("sample{id}-input.pgm"));
        write(&path, plain.to_pgm())?;
        written.push(path);
        let path = config.out.join(format!("sample{id}-input.svg"));
        write(&path, to_svg(&plain, patch, &all, 8))?;
        written.push(path);
        for e in stages {
            let map = render_keep(&plain, patch, &e.keep.kept);
            let stem = format!("sample{id}-layer{}", e.layer);
            let path = config.out.join(format!("{stem}.pgm"));
            write(&path, map.to_pgm())?;
            written.push(path);
            let path = config.out.join(format!("{stem}.svg"));
            write(&path, to_svg(&map, patch, &e.keep.kept, 8))?;
            written.push(path);
        }
    }
    record_manifest(
        config,
        "render-map",
        json!({
            "history": history.file_name().map(|n| n.to_string_lossy().into_owned()),
            "history_sha256": sha256_hex(text.as_bytes()),
        }),
    )?;
    Ok(written)
}
