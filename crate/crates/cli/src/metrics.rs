use tnt_core::tensor::argmax;

/// Area under the ROC curve of `scores` as a detector of the indices in
/// `positives` (Mann-Whitney, ties count half). `None` when either class is empty.
pub fn mask_auc(scores: &[f64], positives: &[usize]) -> Option<f64> {
    let n = scores.len();
    let mut is_pos = vec![false; n];
    for &p in positives {
        if p < n {
            is_pos[p] = true;
        }
    }
    let n_pos = is_pos.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| is_pos[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Fraction of rows of `logits` (`[B, C]`, row-major) whose argmax equals the label.
pub fn top1(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let hits = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}
