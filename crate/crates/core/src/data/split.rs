use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub fraction_test: f64,
    pub seed: u64,
}

impl DatasetSplit {
    pub const DEFAULT_FRACTION_TEST: f64 = 0.20;

    pub fn is_disjoint(&self) -> bool {
        self.test.iter().all(|t| !self.train.contains(t))
    }

    pub fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Vec<&'a Sample> {
        ids.iter()
            .filter_map(|id| samples.iter().find(|s| &s.id == id))
            .collect()
    }
}

/// Deterministic held-out split stratified by lesion presence.
///
/// The test size is `round(fraction · N)` (at least one sample on each side);
/// strata receive their proportional share by largest remainder, so each
/// stratum is within one sample of its proportional count.
pub fn split_dataset(samples: &[Sample], fraction_test: f64, seed: u64) -> Result<DatasetSplit> {
    if samples.len() < 2 {
        return Err(Error::config("at least two samples are needed to split"));
    }
    if !(fraction_test > 0.0 && fraction_test < 1.0) {
        return Err(Error::config(format!(
            "fraction_test must lie in (0, 1), got {fraction_test}"
        )));
    }
    let n = samples.len();
    let target = ((fraction_test * n as f64).round() as usize).clamp(1, n - 1);

    let mut strata: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for s in samples {
        strata[usize::from(s.has_lesion())].push(&s.id);
    }
    let exact: Vec<f64> = strata
        .iter()
        .map(|s| s.len() as f64 * target as f64 / n as f64)
        .collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = target - take.iter().sum::<usize>();
    let mut order: Vec<usize> = vec![0, 1];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(4) {
        if remaining == 0 {
            break;
        }
        if take[k] < strata[k].len() {
            take[k] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n - target);
    let mut test = Vec::with_capacity(target);
    for (stratum, k) in strata.iter_mut().zip(take) {
        stratum.shuffle(&mut rng);
        test.extend(stratum[..k].iter().map(|s| s.to_string()));
        train.extend(stratum[k..].iter().map(|s| s.to_string()));
    }
    train.sort();
    test.sort();
    Ok(DatasetSplit {
        train,
        test,
        fraction_test,
        seed,
    })
}
