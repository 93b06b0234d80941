use super::EvalError;

/// Per-column view of an `n x T` prediction/label pair as parallel slices.
fn column(data: &[f64], n: usize, t: usize, col: usize) -> Vec<f64> {
    (0..n).map(|r| data[r * t + col]).collect()
}

fn check_shapes(
    op: &'static str,
    pred: &[f64],
    labels: &[f64],
    n: usize,
    t: usize,
) -> Result<(), EvalError> {
    if n == 0 || t == 0 || pred.len() != n * t || labels.len() != n * t {
        return Err(EvalError::ShapeMismatch {
            op,
            pred: pred.len(),
            labels: labels.len(),
            expected: n * t,
        });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(EvalError::ShapeMismatch {
            op,
            pred: pred.len(),
            labels: labels.len(),
            expected: n * t,
        });
    }
    Ok(())
}

/// Thresholded accuracy, macro-averaged over label columns. Predictions at
/// exactly the threshold count as positive.
pub fn accuracy(
    pred: &[f64],
    labels: &[f64],
    n: usize,
    t: usize,
    threshold: f64,
) -> Result<f64, EvalError> {
    check_shapes("accuracy", pred, labels, n, t)?;
    let mut total = 0.0;
    for col in 0..t {
        let mut correct = 0usize;
        for r in 0..n {
            let decided = f64::from(pred[r * t + col] >= threshold);
            if decided == labels[r * t + col] {
                correct += 1;
            }
        }
        total += correct as f64 / n as f64;
    }
    Ok(total / t as f64)
}

/// Mann-Whitney AUROC for one score column: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Computed from average ranks; `None` when a class is missing.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tied score runs (1-based ranks).
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &item in &order[i..=j] {
            ranks[item] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..n).filter(|&r| labels[r] == 1.0).map(|r| ranks[r]).sum();
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision for one score column: precision at each positive's
/// rank in descending-score order, ties broken by the stable original
/// index. `None` when the column has no positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut seen_pos = 0usize;
    let mut sum = 0.0;
    for (rank0, &item) in order.iter().enumerate() {
        if labels[item] == 1.0 {
            seen_pos += 1;
            sum += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / pos as f64)
}

/// Outcome of a macro-averaged ranking metric: skipped columns lacked the
/// class balance the metric needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroMetric {
    pub value: f64,
    pub skipped_columns: Vec<usize>,
}

fn macro_over_columns(
    op: &'static str,
    pred: &[f64],
    labels: &[f64],
    n: usize,
    t: usize,
    per_column: impl Fn(&[f64], &[f64]) -> Option<f64>,
) -> Result<MacroMetric, EvalError> {
    check_shapes(op, pred, labels, n, t)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for col in 0..t {
        let s = column(pred, n, t, col);
        let y = column(labels, n, t, col);
        match per_column(&s, &y) {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => skipped.push(col),
        }
    }
    if used == 0 {
        return Err(EvalError::DegenerateColumns(op));
    }
    Ok(MacroMetric {
        value: sum / used as f64,
        skipped_columns: skipped,
    })
}

pub fn auroc_macro(
    pred: &[f64],
    labels: &[f64],
    n: usize,
    t: usize,
) -> Result<MacroMetric, EvalError> {
    macro_over_columns("auroc", pred, labels, n, t, auroc)
}

pub fn aupr_macro(
    pred: &[f64],
    labels: &[f64],
    n: usize,
    t: usize,
) -> Result<MacroMetric, EvalError> {
    macro_over_columns("aupr", pred, labels, n, t, average_precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        // Perfect predictions.
        assert_eq!(
            accuracy(&[0.9, 0.1, 0.8], &[1.0, 0.0, 1.0], 3, 1, 0.5).unwrap(),
            1.0
        );
        // Threshold is inclusive: 0.5 counts as positive.
        assert_eq!(accuracy(&[0.5], &[1.0], 1, 1, 0.5).unwrap(), 1.0);
        // T=2 with per-label accuracies 1.0 and 0.5 macro-averages to 0.75.
        let pred = [0.9, 0.9, 0.1, 0.9];
        let labels = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(accuracy(&pred, &labels, 2, 2, 0.5).unwrap(), 0.75);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.4, 0.4], &[1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(
            auroc(&[0.8, 0.6, 0.4, 0.2], &[1.0, 0.0, 1.0, 0.0]).unwrap(),
            0.75
        );
        assert!(auroc(&[0.8, 0.2], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(average_precision(&[0.3, 0.9], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.1, 0.2], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        let v = average_precision(&[0.9, 0.8, 0.7], &[1.0, 0.0, 1.0]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn macro_skips_single_class_columns() {
        // Column 1 is all-negative: skipped, not fatal.
        let pred = [0.9, 0.3, 0.1, 0.4];
        let labels = [1.0, 0.0, 0.0, 0.0];
        let m = auroc_macro(&pred, &labels, 2, 2).unwrap();
        assert_eq!(m.skipped_columns, vec![1]);
        assert_eq!(m.value, 1.0);

        let all_degenerate = auroc_macro(&[0.9, 0.1], &[1.0, 1.0], 2, 1);
        assert!(matches!(all_degenerate, Err(EvalError::DegenerateColumns(_))));
    }

    // Test-side brute-force oracles: explicit pair enumeration and explicit
    // precision recounting at each positive rank.

    pub(crate) fn brute_force_auroc(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let mut hits = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1.0 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0.0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    hits += 1.0;
                } else if si == sj {
                    hits += 0.5;
                }
            }
        }
        (pairs > 0.0).then(|| hits / pairs)
    }

    pub(crate) fn brute_force_ap(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let npos = labels.iter().filter(|&&y| y == 1.0).count();
        if npos == 0 {
            return None;
        }
        let mut sum = 0.0;
        for (rank0, &item) in order.iter().enumerate() {
            if labels[item] == 1.0 {
                // Recount true positives among the top rank0+1 from scratch.
                let tp = order[..=rank0]
                    .iter()
                    .filter(|&&k| labels[k] == 1.0)
                    .count();
                sum += tp as f64 / (rank0 + 1) as f64;
            }
        }
        Some(sum / npos as f64)
    }

    #[test]
    fn ranking_metrics_equal_brute_force_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.gen_range(2..=50);
            // Coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
            let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            // Guarantee both classes.
            labels[0] = 1.0;
            if n > 1 {
                labels[1] = 0.0;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let brute = brute_force_auroc(&scores, &labels).unwrap();
            assert_eq!(fast, brute, "auroc mismatch on {scores:?} {labels:?}");

            let fast_ap = average_precision(&scores, &labels).unwrap();
            let brute_ap = brute_force_ap(&scores, &labels).unwrap();
            assert_eq!(fast_ap, brute_ap, "aupr mismatch on {scores:?} {labels:?}");
        }
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((0u8..8, prop::bool::ANY), 4..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
            let labels: Vec<f64> = raw.iter().map(|&(_, y)| f64::from(y)).collect();
            prop_assume!(labels.iter().any(|&y| y == 1.0) && labels.iter().any(|&y| y == 0.0));
            let base = auroc(&scores, &labels).unwrap();
            // Strictly monotone: x -> exp(x/3) + x
            let mapped: Vec<f64> = scores.iter().map(|&s| (s / 3.0).exp() + s).collect();
            let transformed = auroc(&mapped, &labels).unwrap();
            prop_assert!((base - transformed).abs() < 1e-12);
        }

        #[test]
        fn metrics_stay_in_unit_interval(
            raw in proptest::collection::vec((0.0f64..1.0, prop::bool::ANY), 2..30)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s).collect();
            let labels: Vec<f64> = raw.iter().map(|&(_, y)| f64::from(y)).collect();
            let n = scores.len();
            let acc = accuracy(&scores, &labels, n, 1, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            if let Some(v) = auroc(&scores, &labels) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Some(v) = average_precision(&scores, &labels) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
