//! Reference implementations shared by the oracle tests and the acceptance run.

use tnt_core::pruning::{
    partition, rank_and_keep, similarity_prune, Action, Partition, SimilarityConfig, Tag,
};
use tnt_core::rng::{gaussian, RngStream};
use tnt_core::Tensor;

/// Stable sort by descending score; ties keep the earlier position.
pub fn sort_oracle(alpha: &[f64], live: &[usize], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alpha.len()).collect();
    idx.sort_by(|&a, &b| alpha[b].partial_cmp(&alpha[a]).unwrap());
    let mut kept: Vec<usize> = idx[..keep].iter().map(|&p| live[p]).collect();
    kept.sort_unstable();
    kept
}

/// Checks `rank_and_keep` against the sort oracle on `cases` random instances.
pub fn check_rank_and_keep(cases: usize) {
    let mut rng = RngStream::new(11, 0);
    for case in 0..cases {
        let n = 1 + rng.below(40);
        // coarse values force ties on some instances
        let coarse = case % 3 == 0;
        let alpha: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng.uniform();
                if coarse {
                    (u * 4.0).floor()
                } else {
                    u
                }
            })
            .collect();
        let mut live: Vec<usize> = (0..n).map(|i| i * 2 + rng.below(2)).collect();
        live.dedup();
        let alpha = &alpha[..live.len()];
        let keep = 1 + rng.below(live.len());
        let got = rank_and_keep(alpha, &live, keep).unwrap();
        assert_eq!(got.kept, sort_oracle(alpha, &live, keep), "case {case}");
        assert_eq!(got.kept.len() + got.removed.len(), live.len());
        assert!(got.removed.iter().all(|(_, t)| *t == Tag::AlphaRanked));
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn subsets(items: &[usize], r: usize) -> Vec<Vec<usize>> {
    if r == 0 {
        return vec![vec![]];
    }
    if items.len() < r {
        return vec![];
    }
    let mut with: Vec<Vec<usize>> = subsets(&items[1..], r - 1)
        .into_iter()
        .map(|mut s| {
            s.insert(0, items[0]);
            s
        })
        .collect();
    with.extend(subsets(&items[1..], r));
    with
}

/// Exhaustive reference: every b scans every a, every r-subset of B is scored
/// by its summed best-match similarity, the best subset is removed.
pub fn pairing_oracle(
    x: &Tensor,
    sp: usize,
    live: &[usize],
    cfg: &SimilarityConfig,
    a: &[usize],
    b: &[usize],
) -> (Tensor, Vec<usize>, Vec<(usize, Tag)>) {
    let row = |p: usize| x.row(sp + p).to_vec();
    let best: Vec<(usize, f64)> = b
        .iter()
        .map(|&bp| {
            let mut cands: Vec<(usize, f64)> = a.iter().map(|&ap| (ap, cos(&row(bp), &row(ap)))).collect();
            cands.sort_by(|p, q| q.1.partial_cmp(&p.1).unwrap().then(live[p.0].cmp(&live[q.0])));
            cands[0]
        })
        .collect();
    let positions: Vec<usize> = (0..b.len()).collect();
    let mut chosen: Option<(f64, Vec<usize>)> = None;
    for s in subsets(&positions, cfg.r) {
        let score: f64 = s.iter().map(|&i| best[i].1).sum();
        if chosen.as_ref().is_none_or(|(c, _)| score > *c) {
            chosen = Some((score, s));
        }
    }
    let mut chosen = chosen.unwrap().1;
    chosen.sort_by(|&i, &j| best[j].1.partial_cmp(&best[i].1).unwrap().then(live[b[i]].cmp(&live[b[j]])));
    let mut rows: Vec<Vec<f64>> = (0..sp + live.len()).map(|r| x.row(r).to_vec()).collect();
    let mut removed = Vec::new();
    for &i in &chosen {
        let (bp, (ap, _)) = (b[i], best[i]);
        let tag = match cfg.action {
            Action::Drop => Tag::Similarity,
            Action::Merge => {
                let bv = rows[sp + bp].clone();
                for (av, bv) in rows[sp + ap].iter_mut().zip(bv) {
                    *av = 0.5 * (*av + bv);
                }
                Tag::MergedInto(live[ap])
            }
        };
        removed.push((live[bp], tag));
    }
    removed.sort_by_key(|(i, _)| *i);
    let gone: Vec<usize> = chosen.iter().map(|&i| b[i]).collect();
    let keep_pos: Vec<usize> = (0..live.len()).filter(|p| !gone.contains(p)).collect();
    let mut data = Vec::new();
    for r in 0..sp {
        data.extend_from_slice(&rows[r]);
    }
    for &p in &keep_pos {
        data.extend_from_slice(&rows[sp + p]);
    }
    let out = Tensor::matrix(sp + keep_pos.len(), x.cols(), data).unwrap();
    (out, keep_pos.iter().map(|&p| live[p]).collect(), removed)
}

/// Checks `similarity_prune` against the exhaustive oracle for every configuration
/// with at most 10 live tokens; returns the number of configurations checked.
pub fn check_similarity_prune() -> usize {
    let mut checked = 0;
    for n in 2..=10usize {
        for sp in 0..=2usize {
            for r in 1..=n / 2 {
                for partition_kind in [Partition::Random, Partition::Sequential] {
                    for action in [Action::Drop, Action::Merge] {
                        for seed in 0..3u64 {
                            let mut g = RngStream::new(1000 + seed, (n * 100 + r * 10 + sp) as u64);
                            let x = gaussian(&mut g, &[sp + n, 4]);
                            let live: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
                            let alpha: Vec<f64> = (0..n).map(|_| g.uniform()).collect();
                            let cfg = SimilarityConfig {
                                partition: partition_kind,
                                action,
                                r,
                                seed,
                            };
                            let rng = RngStream::new(seed, 7);
                            let (a, b) = partition(n, partition_kind, Some(&alpha), &mut rng.clone()).unwrap();
                            let (want_x, want_kept, want_removed) = pairing_oracle(&x, sp, &live, &cfg, &a, &b);
                            let (got_x, got) =
                                similarity_prune(&x, sp, &live, &cfg, Some(&alpha), &mut rng.clone()).unwrap();
                            assert_eq!(got.kept, want_kept, "n={n} sp={sp} r={r} {cfg:?}");
                            assert_eq!(got.removed, want_removed, "n={n} sp={sp} r={r} {cfg:?}");
                            assert_eq!(got_x, want_x, "n={n} sp={sp} r={r} {cfg:?}");
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    checked
}
