use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::lesion::SegScores;
use crate::error::{Error, Result};

/// Mean with compensated (Neumaier) summation; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    (sum + comp) / values.len() as f64
}

/// Two-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t: f64,
    pub p_value: f64,
    /// Differences have zero variance: `p` is 1 for a zero mean difference
    /// and 0 otherwise.
    pub degenerate: bool,
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::config("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let ss: Vec<f64> = d.iter().map(|v| (v - md).powi(2)).collect();
    let var = mean(&ss) * n as f64 / (n - 1) as f64;
    if var == 0.0 {
        let same = md == 0.0;
        return Ok(TTest {
            n,
            mean_difference: md,
            t: if same { 0.0 } else { f64::INFINITY.copysign(md) },
            p_value: if same { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = md / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::config(format!("t distribution: {e}")))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        n,
        mean_difference: md,
        t,
        p_value,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Band {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("band over no values"));
        }
        Ok(Self {
            mean: mean(values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Per-metric mean and min/max across cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossValSummary {
    pub folds: usize,
    pub dice: Band,
    pub precision: Band,
    pub recall: Band,
    pub jaccard: Band,
}

pub fn crossval_aggregate(per_fold: &[SegScores], k: usize) -> Result<CrossValSummary> {
    if k == 0 || per_fold.len() != k {
        return Err(Error::config(format!(
            "expected {k} fold results, got {}",
            per_fold.len()
        )));
    }
    let band = |f: fn(&SegScores) -> f64| Band::from_values(&per_fold.iter().map(f).collect::<Vec<_>>());
    Ok(CrossValSummary {
        folds: k,
        dice: band(|s| s.dice)?,
        precision: band(|s| s.precision)?,
        recall: band(|s| s.recall)?,
        jaccard: band(|s| s.jaccard)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compensated_mean_survives_cancellation() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(mean(&v), 0.5);
        assert_eq!(mean(&[]), 0.0);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [0.25, 0.5, 0.75];
        let t = paired_ttest(&a, &a).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p_value, 1.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        let t = paired_ttest(&shifted, &a).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p_value, 0.0);
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn fold_aggregation() {
        let s = |d: f64| SegScores {
            dice: d,
            precision: d,
            recall: d,
            jaccard: d,
        };
        let folds: Vec<SegScores> = [0.6, 0.7, 0.8, 0.7, 0.7].into_iter().map(s).collect();
        let agg = crossval_aggregate(&folds, 5).unwrap();
        assert!((agg.dice.mean - 0.7).abs() < 1e-12);
        assert_eq!(agg.dice.min, 0.6);
        assert_eq!(agg.dice.max, 0.8);
        let same = crossval_aggregate(&[s(0.5); 5], 5).unwrap();
        assert_eq!((same.recall.mean, same.recall.min, same.recall.max), (0.5, 0.5, 0.5));
        assert!(crossval_aggregate(&folds[..4], 5).is_err());
    }

    proptest! {
        #[test]
        fn ttest_is_symmetric(xs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..30)) {
            let a: Vec<f64> = xs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = xs.iter().map(|p| p.1).collect();
            let ab = paired_ttest(&a, &b).unwrap();
            let ba = paired_ttest(&b, &a).unwrap();
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-14);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }
    }
}
