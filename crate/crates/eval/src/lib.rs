//! Scoring helpers and the PASS/FAIL ledger behind the acceptance suite.

use std::time::Instant;

/// Area under the ROC curve of `pos` against `neg` (Mann-Whitney U with
/// ties counted as one half).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Fraction of predicted positives that are true positives.
pub fn precision(predicted: &[bool], truth: &[bool]) -> f64 {
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| **p && **t)
        .count();
    let called = predicted.iter().filter(|p| **p).count();
    hits as f64 / called as f64
}

/// Whether `values` never decrease.
pub fn non_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0])
}

/// Whether `values` strictly decrease.
pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

/// One printed line per criterion.
#[derive(Default)]
pub struct Ledger {
    lines: Vec<(usize, bool)>,
}

impl Ledger {
    /// Runs `check`, which returns pass/fail plus a detail line, and prints
    /// the verdict with its wall-clock time.
    pub fn criterion(&mut self, id: usize, name: &str, check: impl FnOnce() -> (bool, String)) {
        let start = Instant::now();
        let (pass, detail) = check();
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {id:>2} {name}: {detail} [{:.1}s]",
            start.elapsed().as_secs_f64()
        );
        self.lines.push((id, pass));
    }

    pub fn failed(&self) -> Vec<usize> {
        self.lines.iter().filter(|l| !l.1).map(|l| l.0).collect()
    }

    pub fn passed(&self) -> usize {
        self.lines.iter().filter(|l| l.1).count()
    }

    pub fn total(&self) -> usize {
        self.lines.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[0.0, 1.0], &[2.0, 3.0]), 0.0);
        assert_eq!(roc_auc(&[1.0, 1.0], &[1.0, 1.0]), 0.5);
        assert!((roc_auc(&[1.0, 3.0], &[2.0]) - 0.5).abs() < 1e-15);
        assert!((roc_auc(&[2.0, 3.0], &[2.0, 0.0]) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn precision_counts_called_positives() {
        assert_eq!(
            precision(&[true, true, false, true], &[true, false, true, true]),
            2.0 / 3.0
        );
    }

    #[test]
    fn monotone_checks() {
        assert!(non_decreasing(&[-5.0, -5.0, -1.0]));
        assert!(!non_decreasing(&[-5.0, -6.0]));
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0]));
    }
}
