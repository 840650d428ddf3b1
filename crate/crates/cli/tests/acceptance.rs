//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is always printed. Exits non-zero if a
//! criterion fails, except those listed in `KNOWN_SHORTFALLS`, which are still
//! reported as FAIL.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tnt_cli::commands;
use tnt_cli::config::{ExperimentConfig, Method};
use tnt_cli::metrics::mean;
use tnt_core::allocator::{
    compute_alpha, inject_training_noise, noise_draw, noised_forward, prefix_activations, AllocatorHead,
    AllocatorParams, AllocatorVars, AlphaMap, HeadKind, Mode, NoiseConfig,
};
use tnt_core::autodiff::{finite_diff_check, Graph, Var};
use tnt_core::cost::{throughput_measure, PRESETS};
use tnt_core::pruning::Ranker;
use tnt_core::rng::{gaussian, RngStream};
use tnt_core::tensor::layer_norm;
use tnt_core::vit::{accuracy, ModelConfig, ModelParams, TokenBatch, TokenSeq};
use tnt_core::{Result, Tensor};

/// Criteria that fail on the toy problem for reasons analysed outside the code.
const KNOWN_SHORTFALLS: &[&str] = &["5b"];

struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((id.to_string(), pass));
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tnt-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let anchors = [("deit-b-distil", 17.68, 0.01), ("deit-s-distil", 4.63, 0.01), ("vit16-768", 9.17, 0.015)];
    let dir = scratch("flops");
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, anchor, tol) in anchors {
        let config = ExperimentConfig {
            out: dir.join(name),
            ..ExperimentConfig::default()
        };
        let g = commands::cmd_flops(&config, Some(name)).unwrap().total_gflops();
        let rel = (g - anchor).abs() / anchor;
        ok &= rel < tol;
        parts.push(format!("{name} {g:.3} vs {anchor} ({:.2}%)", rel * 100.0));
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 1.0 && PRESETS.len() == 3;
    r.record("1", ok, format!("{}; {secs:.3}s", parts.join(", ")));
}

fn weighted(g: &mut Graph<'_>, v: Var) -> Var {
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| (i as f64 * 0.37).sin() + 0.5));
    let p = g.mul(v, w).expect("same shape");
    g.sum(p)
}

type Loss = Box<dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>>;

fn as_loss<'a, F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>>(f: F) -> F {
    f
}

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let mut rng = RngStream::new(2, 0);
    let mut t_ = |shape: &[usize]| gaussian(&mut rng, shape);
    let cases: Vec<(&str, Loss, Vec<Tensor>)> = vec![
        ("matmul", Box::new(|g, v| { let o = g.matmul(v[0], v[1])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4]), t_(&[4, 2])]),
        ("matmul_nt", Box::new(|g, v| { let o = g.matmul_nt(v[0], v[1])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4]), t_(&[2, 4])]),
        ("add", Box::new(|g, v| { let o = g.add(v[0], v[1])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4]), t_(&[3, 4])]),
        ("add_row", Box::new(|g, v| { let o = g.add_row(v[0], v[1])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4]), t_(&[4])]),
        ("mul", Box::new(|g, v| { let o = g.mul(v[0], v[1])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4]), t_(&[3, 4])]),
        ("affine", Box::new(|g, v| { let o = g.affine(v[0], -1.5, 0.7); Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
        ("scale", Box::new(|g, v| { let o = g.scale(v[0], 2.5); Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
        ("transpose", Box::new(|g, v| { let o = g.transpose(v[0])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
        ("softmax_rows", Box::new(|g, v| { let o = g.softmax(v[0], 1)?; Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
        ("softmax_cols", Box::new(|g, v| { let o = g.softmax(v[0], 0)?; Ok(weighted(g, o)) }), vec![t_(&[5, 1])]),
        ("layer_norm", Box::new(|g, v| { let o = g.layer_norm(v[0], v[1], v[2], 1e-6)?; Ok(weighted(g, o)) }), vec![t_(&[3, 5]), t_(&[5]), t_(&[5])]),
        ("gelu", Box::new(|g, v| { let o = g.gelu(v[0]); Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
        ("cross_entropy", Box::new(|g, v| g.cross_entropy(v[0], &[2, 0, 1])), vec![t_(&[3, 4])]),
        ("sum", Box::new(|g, v| { let s = g.mul(v[0], v[0])?; Ok(g.sum(s)) }), vec![t_(&[3, 4])]),
        ("mean", Box::new(|g, v| { let s = g.mul(v[0], v[0])?; Ok(g.mean(s)) }), vec![t_(&[3, 4])]),
        ("select_rows", Box::new(|g, v| { let o = g.select_rows(v[0], &[2, 0, 2])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
        ("concat_rows", Box::new(|g, v| { let o = g.concat_rows(&[v[0], v[1]])?; Ok(weighted(g, o)) }), vec![t_(&[2, 4]), t_(&[3, 4])]),
        ("slice_cols", Box::new(|g, v| { let o = g.slice_cols(v[0], 1, 2)?; Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
        ("concat_cols", Box::new(|g, v| { let o = g.concat_cols(&[v[0], v[1]])?; Ok(weighted(g, o)) }), vec![t_(&[3, 2]), t_(&[3, 3])]),
        ("row_scale", Box::new(|g, v| { let o = g.row_scale(v[0], v[1])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4]), t_(&[3, 1])]),
        ("reshape", Box::new(|g, v| { let o = g.reshape(v[0], &[2, 6])?; Ok(weighted(g, o)) }), vec![t_(&[3, 4])]),
    ];
    let mut worst = (0.0f64, "");
    for (name, f, params) in &cases {
        let c = finite_diff_check(f, params, 1e-5).unwrap();
        if c.max_rel_error > worst.0 {
            worst = (c.max_rel_error, name);
        }
    }

    // full noised forward, cross-entropy w.r.t. every allocator parameter
    let mut noised_worst = 0.0f64;
    for (kind, special) in [(HeadKind::Linear, 1), (HeadKind::Mlp, 0)] {
        let c = ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            dim: 8,
            depth: 3,
            heads: 2,
            mlp_dim: 12,
            num_classes: 3,
            special_tokens: special,
            layernorm_eps: 1e-6,
        };
        let bb = ModelParams::init(&c, 1).unwrap();
        let layout = AllocatorParams::init(&c, kind, None, &[0, 1], 2).unwrap();
        let nc = NoiseConfig { beta: 0.5, noised_layers: vec![0, 1], seed: 3 };
        let img = gaussian(&mut RngStream::new(4, 0), &[2, 8, 8]);
        let cached = prefix_activations(&bb, &c, &img, 0).unwrap();
        let params: Vec<Tensor> = layout.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let f = as_loss(|g, vars| {
            let bvars = bb.bind(g, false);
            let avars = AllocatorVars::from_flat(&layout, vars)?;
            let mut eps = |layer: usize, n: usize| noise_draw(nc.seed, 0, 0, layer, &[n, c.dim]);
            let logits = noised_forward(g, &bvars, &avars, &c, &nc, &cached, &mut eps)?;
            g.cross_entropy(logits, &[2])
        });
        noised_worst = noised_worst.max(finite_diff_check(f, &params, 1e-5).unwrap().max_rel_error);
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = worst.0 < 1e-4 && noised_worst < 1e-4 && secs < 60.0;
    r.record(
        "2",
        ok,
        format!(
            "{} primitives, worst {:.2e} ({}); noised forward worst {noised_worst:.2e}; {secs:.2}s",
            cases.len(),
            worst.0,
            worst.1
        ),
    );
}

fn criterion_3(r: &mut Report) {
    let t = Instant::now();
    let special = 1;
    let c = ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        dim: 4,
        depth: 1,
        heads: 1,
        mlp_dim: 4,
        num_classes: 2,
        special_tokens: special,
        layernorm_eps: 1e-6,
    };
    let mut rng = RngStream::new(5, 0);
    let x = gaussian(&mut rng, &[special + 4, 4]);
    let head = AllocatorHead::Linear { w: gaussian(&mut rng, &[4, 1]), b: Tensor::from_vec(vec![0.0]) };
    let one = TokenBatch { special_tokens: special, samples: vec![TokenSeq { x: x.clone(), live: vec![0, 1, 2, 3] }] };
    let alpha = compute_alpha(&one, &head).unwrap().remove(0);
    let sum_err = (alpha.iter().sum::<f64>() - 1.0).abs();
    let budget_err = (alpha.iter().map(|a| 1.0 - a).sum::<f64>() - 3.0).abs();

    let draws = 100_000;
    let beta = 0.02;
    let params = AllocatorParams::init(&c, HeadKind::Linear, None, &[0], 0).unwrap();
    let cfg = NoiseConfig { beta, noised_layers: vec![0], seed: 0 };
    let batch = TokenBatch { special_tokens: special, samples: vec![one.samples[0].clone(); draws] };
    let map = AlphaMap { layer: 0, alpha: vec![alpha.clone(); draws] };
    let noised = inject_training_noise(&batch, &map, &params, &cfg, Mode::Train, &RngStream::new(9, 1), 1e-6).unwrap();
    let clean = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-6).unwrap();
    let special_clean = noised.samples.iter().all(|s| s.x.row(0) == clean.row(0));
    let mut worst_std = 0.0f64;
    for (i, &a) in alpha.iter().enumerate() {
        let want = beta * (1.0 - a);
        for d in 0..4 {
            let vals: Vec<f64> = noised.samples.iter().map(|s| s.x.at2(special + i, d) - clean.at2(special + i, d)).collect();
            let m = mean(&vals);
            let std = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
            worst_std = worst_std.max((std - want).abs() / want);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = sum_err <= 1e-9 && budget_err <= 1e-9 && worst_std < 0.03 && special_clean && secs < 30.0;
    r.record(
        "3",
        ok,
        format!(
            "|Σα−1| {sum_err:.1e}, |Σ(1−α)−(N−1)| {budget_err:.1e}, worst std deviation {:.2}% at 1e5 draws, special noise zero: {special_clean}; {secs:.2}s",
            worst_std * 100.0
        ),
    );
}

fn criterion_4(r: &mut Report) {
    let t = Instant::now();
    let outcome = std::panic::catch_unwind(|| {
        oracle::check_rank_and_keep(1000);
        oracle::check_similarity_prune()
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(n) => r.record("4", secs < 60.0, format!("1000 ranking instances, {n} similarity configurations exact; {secs:.2}s")),
        Err(_) => r.record("4", false, "oracle mismatch".into()),
    }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_config(out: PathBuf) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    if let tnt_cli::config::DataSource::Synthetic(spec) = &mut c.data {
        spec.samples_per_class = 30;
    }
    c.backbone.epochs = 1;
    c.allocator.epochs = 2;
    c.allocator.train_samples = Some(24);
    c.seeds = vec![0, 1];
    c.out = out;
    c
}

fn run_all_commands(out: &Path) -> Result<()> {
    let c = tiny_config(out.join("run"));
    let wrap = |e: tnt_cli::CliError| tnt_core::Error::Usage(e.to_string());
    commands::cmd_train_backbone(&c).map_err(wrap)?;
    commands::cmd_train_allocator(&c).map_err(wrap)?;
    commands::cmd_sweep(&c).map_err(wrap)?;
    commands::cmd_flops(&c, None).map_err(wrap)?;
    let maps = ExperimentConfig { out: out.join("maps"), ..c.clone() };
    commands::cmd_render_map(&maps, &c.out.join("seed-0/history/tnt-32.txt"), Some(&[0, 1, 2])).map_err(wrap)?;
    Ok(())
}

fn criterion_7(r: &mut Report, main_run: Option<&ExperimentConfig>) {
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    run_all_commands(&a).unwrap();
    run_all_commands(&b).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<_> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let mut ok = fa.len() == fb.len() && differing.is_empty();
    let mut detail = format!("{} files compared across two full runs", fa.len());
    let kinds = ["csv", "tntc", "pgm"].map(|ext| fa.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count());
    detail += &format!(" ({} csv, {} checkpoints, {} pgm)", kinds[0], kinds[1], kinds[2]);
    if let Some(c) = main_run {
        let before = fs::read(c.out.join("sweep.csv")).unwrap();
        commands::cmd_sweep(c).unwrap();
        let same = fs::read(c.out.join("sweep.csv")).unwrap() == before;
        ok &= same;
        detail += &format!("; 5-seed sweep repeat identical: {same}");
    }
    if !differing.is_empty() {
        detail += &format!("; differing: {differing:?}");
    }
    let _ = fs::remove_dir_all(&a);
    let _ = fs::remove_dir_all(&b);
    r.record("7", ok, detail);
}

fn row_acc(rows: &[commands::SweepRow], method: Method, keep: usize) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.method == method && r.keep_count == keep)
        .map(|r| r.top1.expect("accuracy"))
        .collect()
}

fn criteria_5_6_8(r: &mut Report) -> ExperimentConfig {
    let t = Instant::now();
    let mut c = ExperimentConfig::default();
    c.out = scratch("main");
    c.sweep.methods = vec![Method::Dense, Method::Tnt, Method::TntNoSim, Method::Random];
    let half = c.model.num_patches() / 2;
    c.sweep.keep_counts = vec![half];
    c.sweep.keep_rates.clear();
    c.sweep.write_history = false;
    commands::cmd_train_backbone(&c).unwrap();
    commands::cmd_train_allocator(&c).unwrap();
    let rows = commands::cmd_sweep(&c).unwrap();
    let elapsed = t.elapsed();

    let (train, _) = commands::load_data(&c).unwrap();
    let train_acc: Vec<f64> = c
        .seeds
        .iter()
        .map(|&s| accuracy(&commands::load_backbone(&c, s).unwrap(), &c.model, &train).unwrap())
        .collect();
    let min_train = train_acc.iter().copied().fold(1.0, f64::min);
    r.record("5a", min_train >= 0.95, format!("train accuracy per seed {train_acc:.4?}, min {min_train:.4}"));

    let layer = c.schedule.alpha_layers()[0];
    let auc_csv = fs::read_to_string(c.out.join("alpha_auc.csv")).unwrap();
    let aucs: Vec<f64> = auc_csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1].parse::<usize>().unwrap() == layer)
        .map(|f| f[2].parse().unwrap())
        .collect();
    let auc = mean(&aucs);
    r.record("5b", auc >= 0.8, format!("α AUC at location {} per seed {aucs:.3?}, mean {auc:.3} (target ≥ 0.8)", layer + 1));

    let dense = mean(&row_acc(&rows, Method::Dense, c.model.num_patches()));
    let tnt = mean(&row_acc(&rows, Method::Tnt, half));
    let random = mean(&row_acc(&rows, Method::Random, half));
    let no_sim = mean(&row_acc(&rows, Method::TntNoSim, half));
    let (tnt_drop, rnd_drop) = (dense - tnt, dense - random);
    let ok_c = tnt >= random && tnt_drop <= 0.6 * rnd_drop;
    r.record(
        "5c",
        ok_c,
        format!("keep {half}/{}: dense {dense:.4}, tnt {tnt:.4}, random {random:.4}; drops {tnt_drop:.4} vs 0.6×{rnd_drop:.4}", c.model.num_patches()),
    );
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let budget = Duration::from_secs(15 * 60) * 4 / cores.min(4) as u32;
    r.record(
        "5-runtime",
        elapsed <= budget,
        format!("{:.0}s for 5 seeds on {cores} core(s); budget {:.0}s (15 min at 4 cores, scaled)", elapsed.as_secs_f64(), budget.as_secs_f64()),
    );
    r.record(
        "6",
        tnt >= no_sim - 0.005,
        format!("tnt (random partition, s={}) {tnt:.4} vs tnt without similarity {no_sim:.4} at {half} tokens", c.schedule.s),
    );

    let (_, test) = commands::load_data(&c).unwrap();
    let bb = commands::load_backbone(&c, c.seeds[0]).unwrap();
    let alloc = commands::load_allocator(&c, c.seeds[0]).unwrap();
    let images = test.images();
    let schedule = commands::method_schedule(&c, Method::Tnt, half, c.seeds[0]);
    let dense_tp = throughput_measure(&bb, &c.model, Ranker::Allocator(&alloc), None, &images, 64, 1, 5).unwrap();
    let pruned_tp = throughput_measure(&bb, &c.model, Ranker::Allocator(&alloc), Some(&schedule), &images, 64, 1, 5).unwrap();
    r.record(
        "8",
        pruned_tp.images_per_second > dense_tp.images_per_second,
        format!(
            "median images/s over 5 windows: 50% schedule {:.1} vs dense {:.1}",
            pruned_tp.images_per_second, dense_tp.images_per_second
        ),
    );
    c
}

fn main() {
    let mut r = Report { results: Vec::new() };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    let main_run = criteria_5_6_8(&mut r);
    criterion_7(&mut r, Some(&main_run));
    let _ = fs::remove_dir_all(&main_run.out);

    let failed: Vec<&str> = r.results.iter().filter(|(_, p)| !p).map(|(id, _)| id.as_str()).collect();
    let unexpected: Vec<&&str> = failed.iter().filter(|id| !KNOWN_SHORTFALLS.contains(id)).collect();
    println!(
        "acceptance: {}/{} passed{}",
        r.results.len() - failed.len(),
        r.results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
