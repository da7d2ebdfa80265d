//! Accuracy, Brier score, static calibration error and AUROC.

use crate::{Error, Result};

/// Default number of equal-width bins for [`sce`].
pub const DEFAULT_SCE_BINS: usize = 15;

/// `N x C` predicted distributions with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    n_classes: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl EvalBatch {
    pub fn new(n_classes: usize, probs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if n_classes == 0 || probs.len() != labels.len() * n_classes {
            return Err(Error::input(format!(
                "{} probabilities do not match {} labels x {} classes",
                probs.len(),
                labels.len(),
                n_classes
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::input(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(EvalBatch {
            n_classes,
            probs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::input("empty evaluation batch"))
        } else {
            Ok(())
        }
    }

    /// Per-sample predicted class (ties resolved to the lowest index).
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }

    /// Per-sample misclassification flags.
    pub fn misclassified(&self) -> Vec<bool> {
        self.predictions()
            .into_iter()
            .zip(&self.labels)
            .map(|(p, &y)| p != y)
            .collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(batch: &EvalBatch) -> Result<f64> {
    batch.non_empty()?;
    let correct = batch
        .predictions()
        .iter()
        .zip(batch.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Mean over samples of `sum_c (p_c - onehot(y)_c)^2`; lies in `[0, 2]`.
pub fn brier(batch: &EvalBatch) -> Result<f64> {
    batch.non_empty()?;
    let total: f64 = (0..batch.len())
        .map(|i| {
            let y = batch.labels[i];
            batch
                .row(i)
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let t = if c == y { 1.0 } else { 0.0 };
                    (p - t).powi(2)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Static calibration error: class-wise equal-width binning of the predicted
/// probability of every class, averaged over classes.
pub fn sce(batch: &EvalBatch, n_bins: usize) -> Result<f64> {
    batch.non_empty()?;
    if n_bins == 0 {
        return Err(Error::input("n_bins must be >= 1"));
    }
    let c = batch.n_classes;
    let n = batch.len() as f64;
    let mut count = vec![0usize; c * n_bins];
    let mut hits = vec![0usize; c * n_bins];
    let mut conf = vec![0.0f64; c * n_bins];
    for i in 0..batch.len() {
        let y = batch.labels[i];
        for (class, &p) in batch.row(i).iter().enumerate() {
            let bin = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
            let k = class * n_bins + bin;
            count[k] += 1;
            conf[k] += p;
            if class == y {
                hits[k] += 1;
            }
        }
    }
    let mut total = 0.0;
    for k in 0..c * n_bins {
        if count[k] == 0 {
            continue;
        }
        let m = count[k] as f64;
        total += (m / n) * (hits[k] as f64 / m - conf[k] / m).abs();
    }
    Ok(total / c as f64)
}

/// Mann-Whitney AUROC with average ranks for ties:
/// `P(score_pos > score_neg) + P(equal)/2`.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::input("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("NaN score"));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::input("AUROC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positives[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(c: usize, rows: &[&[f64]], labels: &[usize]) -> EvalBatch {
        EvalBatch::new(c, rows.concat(), labels.to_vec()).unwrap()
    }

    /// Pairwise definition, used as an independent oracle.
    fn auroc_pairs(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_cases() {
        let b = batch(2, &[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(accuracy(&b).unwrap(), 1.0);
        let b = batch(2, &[&[1.0, 0.0], &[0.0, 1.0]], &[1, 0]);
        assert_eq!(accuracy(&b).unwrap(), 0.0);
        let b = batch(2, &[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4], &[0.5, 0.5]], &[0, 1, 0, 1]);
        // last row ties resolve to class 0
        assert_eq!(accuracy(&b).unwrap(), 0.75);
        assert!(accuracy(&EvalBatch::new(2, vec![], vec![]).unwrap()).is_err());
    }

    #[test]
    fn brier_cases() {
        let b = batch(3, &[&[0.0, 1.0, 0.0]], &[1]);
        assert_eq!(brier(&b).unwrap(), 0.0);
        let uni = vec![0.1; 10];
        let b = EvalBatch::new(10, uni, vec![4]).unwrap();
        assert!((brier(&b).unwrap() - 0.9).abs() < 1e-12);
        let b = batch(3, &[&[1.0, 0.0, 0.0]], &[2]);
        assert_eq!(brier(&b).unwrap(), 2.0);
    }

    #[test]
    fn sce_cases() {
        let b = batch(2, &[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(sce(&b, 15).unwrap(), 0.0);
        let b = batch(2, &[&[0.7, 0.3]], &[0]);
        assert!((sce(&b, 15).unwrap() - 0.3).abs() < 1e-12);
        // Constant prediction equal to empirical frequencies.
        let rows: Vec<&[f64]> = vec![&[0.25, 0.75]; 4];
        let b = batch(2, &rows, &[0, 1, 1, 1]);
        assert!(sce(&b, 15).unwrap().abs() < 1e-12);
        assert!(sce(&b, 0).is_err());
    }

    #[test]
    fn sce_single_bin_is_frequency_gap() {
        let b = batch(3, &[&[0.5, 0.3, 0.2], &[0.1, 0.1, 0.8], &[0.3, 0.3, 0.4]], &[0, 2, 1]);
        let freq = [1.0f64 / 3.0; 3];
        let mean = [0.9 / 3.0, 0.7 / 3.0, 1.4 / 3.0];
        let expect = (0..3).map(|c| (freq[c] - mean[c]).abs()).sum::<f64>() / 3.0;
        assert!((sce(&b, 1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn auroc_cases() {
        let a = auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(a, 1.0);
        let a = auroc(&[0.3, 0.7, 0.3, 0.7], &[true, true, false, false]).unwrap();
        assert_eq!(a, 0.5);
        let a = auroc(&[0.8, 0.2, 0.6, 0.4], &[true, true, false, false]).unwrap();
        assert_eq!(a, 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1, f64::NAN], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_oracle(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64).collect();
            let pos: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let a = auroc(&scores, &pos).unwrap();
            prop_assert!((a - auroc_pairs(&scores, &pos)).abs() < 1e-12);
        }

        #[test]
        fn auroc_complement_and_monotone_invariance(
            raw in proptest::collection::btree_set(-1000i32..1000, 2..30),
            flags in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 10.0).collect();
            let pos: Vec<bool> = flags[..scores.len()].to_vec();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let neg: Vec<bool> = pos.iter().map(|p| !p).collect();
            let a = auroc(&scores, &pos).unwrap();
            prop_assert!((a + auroc(&scores, &neg).unwrap() - 1.0).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp() * 3.0 + 1.0).collect();
            prop_assert!((a - auroc(&warped, &pos).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metric_ranges(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 1..20),
            labels in proptest::collection::vec(0usize..4, 20),
            bins in 1usize..30,
        ) {
            let rows: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() })
                .collect();
            let b = EvalBatch::new(4, rows.concat(), labels[..rows.len()].to_vec()).unwrap();
            let acc = accuracy(&b).unwrap();
            let br = brier(&b).unwrap();
            let s = sce(&b, bins).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!((0.0..=2.0).contains(&br));
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
