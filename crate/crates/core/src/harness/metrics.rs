//! Token error rate with substitution/insertion/deletion counts, relative
//! error reduction and real-time factor.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn from_counts(s: usize, i: usize, d: usize, n: usize) -> Self {
        Self {
            substitutions: s,
            insertions: i,
            deletions: d,
            reference_len: n,
            wer: (s + i + d) as f64 / n.max(1) as f64,
        }
    }

    /// Pools counts over several recordings.
    pub fn pooled(parts: &[WerBreakdown]) -> Self {
        let sum = |f: fn(&WerBreakdown) -> usize| parts.iter().map(f).sum::<usize>();
        Self::from_counts(
            sum(|w| w.substitutions),
            sum(|w| w.insertions),
            sum(|w| w.deletions),
            sum(|w| w.reference_len),
        )
    }

    pub fn deletion_rate(&self) -> f64 {
        self.deletions as f64 / self.reference_len.max(1) as f64
    }
}

/// Minimal unit-cost edit alignment of `hyp` against `reference`.
///
/// Among minimal alignments the one with the most substitutions wins. For a
/// fixed cost that is the same as preferring substitutions to deletions to
/// insertions, so the counts are unique.
pub fn wer(reference: &[usize], hyp: &[usize]) -> WerBreakdown {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, -substitutions, deletions) minimised lexicographically.
    type Cell = (usize, i64, usize);
    let mut d: Vec<Vec<Cell>> = vec![vec![(0, 0, 0); m + 1]; n + 1];
    for i in 1..=n {
        d[i][0] = (i, 0, i);
    }
    for j in 1..=m {
        d[0][j] = (j, 0, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (c, s, del) = d[i - 1][j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                (c, s, del)
            } else {
                (c + 1, s - 1, del)
            };
            let (c, s, del) = d[i - 1][j];
            let up = (c + 1, s, del + 1);
            let (c, s, del) = d[i][j - 1];
            let left = (c + 1, s, del);
            d[i][j] = diag.min(up).min(left);
        }
    }
    let (cost, neg_s, del) = d[n][m];
    let s = (-neg_s) as usize;
    WerBreakdown::from_counts(s, cost - s - del, del, n)
}

/// `(baseline − adapted) / baseline`.
pub fn werr(baseline: f64, adapted: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "relative reduction needs a positive baseline, got {baseline}"
        )));
    }
    Ok((baseline - adapted) / baseline)
}

/// Processing time over audio duration.
pub fn rtf(processing_seconds: f64, duration_seconds: f64) -> Result<f64> {
    if !(duration_seconds > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "real-time factor needs a positive duration, got {duration_seconds}"
        )));
    }
    Ok(processing_seconds / duration_seconds)
}

/// Mean and (sample) standard deviation; `None` for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}
