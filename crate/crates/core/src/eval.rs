//! ROC curves and AUC.
//!
//! AUC is the Mann-Whitney rank statistic: the probability that a random
//! positive outscores a random negative, ties counting one half.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are predicted positive. The first point uses +inf.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    pub curve: Vec<RocPoint>,
}

/// AUC and ROC curve of `(score, label)` pairs.
///
/// ```
/// let roc = xasm::eval::roc_auc(&[(0.9, true), (0.8, false), (0.3, true), (0.1, false)]).unwrap();
/// assert_eq!(roc.auc, 0.75);
/// ```
pub fn roc_auc(items: &[(f64, bool)]) -> Result<Roc> {
    let positives = items.iter().filter(|(_, y)| *y).count();
    let negatives = items.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut sorted: Vec<(f64, bool)> = items.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Midranks over tie groups, ascending score.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|(_, y)| *y).count() as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * n);

    let mut curve = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = sorted.len();
    while k > 0 {
        let score = sorted[k - 1].0;
        while k > 0 && sorted[k - 1].0 == score {
            if sorted[k - 1].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        curve.push(RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold: score,
        });
    }
    Ok(Roc { auc, curve })
}

/// Plot-ready CSV with header `fpr,tpr,threshold`.
pub fn write_curve_csv(curve: &[RocPoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "fpr,tpr,threshold")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    Ok(())
}

/// A scored pair together with the instruction counts of both blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizedScore {
    pub score: f64,
    pub label: bool,
    pub len_a: usize,
    pub len_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Middle,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketBounds {
    /// Blocks with fewer instructions than this are small.
    pub small_max: usize,
    /// Blocks with more instructions than this are large.
    pub large_min: usize,
}

impl Default for BucketBounds {
    fn default() -> Self {
        BucketBounds {
            small_max: 5,
            large_min: 20,
        }
    }
}

impl BucketBounds {
    pub fn bucket_of(&self, len: usize) -> SizeBucket {
        if len < self.small_max {
            SizeBucket::Small
        } else if len > self.large_min {
            SizeBucket::Large
        } else {
            SizeBucket::Middle
        }
    }

    /// A pair belongs to a bucket only if both blocks do.
    pub fn pair_bucket(&self, len_a: usize, len_b: usize) -> Option<SizeBucket> {
        let a = self.bucket_of(len_a);
        (a == self.bucket_of(len_b)).then_some(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAuc {
    pub bucket: SizeBucket,
    pub pairs: usize,
    pub auc: f64,
}

/// AUC per block-size bucket. Buckets that are empty or single-label are
/// skipped with a warning.
pub fn size_partition_eval(items: &[SizedScore], bounds: BucketBounds) -> Vec<BucketAuc> {
    let mut out = Vec::new();
    for bucket in [SizeBucket::Small, SizeBucket::Middle, SizeBucket::Large] {
        let scored: Vec<(f64, bool)> = items
            .iter()
            .filter(|s| bounds.pair_bucket(s.len_a, s.len_b) == Some(bucket))
            .map(|s| (s.score, s.label))
            .collect();
        match roc_auc(&scored) {
            Ok(roc) => out.push(BucketAuc {
                bucket,
                pairs: scored.len(),
                auc: roc.auc,
            }),
            Err(_) => log::warn!(
                "skipping {bucket:?} bucket: {} pairs without both labels",
                scored.len()
            ),
        }
    }
    out
}
