//! Downstream segmentation study: k-fold cross-validation of a segmentor
//! trained on real samples, optionally augmented with synthetic pairs,
//! always validated on real held-out folds.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::metrics::{crossval_aggregate, mean, CrossValSummary, MatchPolicy, SegScores};
use crate::rng::derive_rng;
use crate::segmentor::{train_segmentor, SegmentorSchedule, SegmentorSpec};

const TAG_FOLDS: u64 = 21;
const TAG_REAL: u64 = 22;
const TAG_SYNTH: u64 = 23;
const TAG_TRAIN: u64 = 24;

/// A training sample with the ids of every real sample it was built from.
/// Real samples list only themselves.
#[derive(Debug, Clone)]
pub struct SourcedSample {
    pub sample: Sample,
    pub sources: Vec<String>,
}

impl SourcedSample {
    pub fn real(sample: Sample) -> Self {
        let sources = vec![sample.id.clone()];
        Self { sample, sources }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamCell {
    pub name: String,
    pub n_real: usize,
    pub n_synthetic: usize,
    pub folds: usize,
    pub segmentor: SegmentorSpec,
    pub schedule: SegmentorSchedule,
    pub seed: u64,
}

impl Default for DownstreamCell {
    fn default() -> Self {
        Self {
            name: String::new(),
            n_real: 0,
            n_synthetic: 0,
            folds: 5,
            segmentor: SegmentorSpec::default(),
            schedule: SegmentorSchedule::default(),
            seed: 0,
        }
    }
}

impl DownstreamCell {
    pub fn label(&self) -> String {
        if self.name.is_empty() {
            format!("{}R+{}S", self.n_real, self.n_synthetic)
        } else {
            self.name.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::config("cross-validation needs at least two folds"));
        }
        if self.n_real + self.n_synthetic == 0 {
            return Err(Error::config(format!("cell `{}` has no training samples", self.label())));
        }
        self.segmentor.validate()
    }
}

/// Validation ids of each fold, stratified by lesion presence.
pub fn assign_folds(real: &[Sample], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 || real.len() < k {
        return Err(Error::config(format!("{} samples cannot fill {k} folds", real.len())));
    }
    let mut rng = derive_rng(seed, &[TAG_FOLDS]);
    let mut order = Vec::with_capacity(real.len());
    for lesion in [false, true] {
        let mut ids: Vec<&str> = real
            .iter()
            .filter(|s| s.has_lesion() == lesion)
            .map(|s| s.id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        order.extend(ids);
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id.to_string());
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub validation: Vec<String>,
    pub train_real: Vec<String>,
    pub train_synthetic: Vec<String>,
}

/// Fails when a training sample of any fold is, or was derived from, one
/// of that fold's validation samples.
pub fn check_fold_leakage(plan: &FoldPlan, synthetic: &[SourcedSample]) -> Result<()> {
    let val: HashSet<&str> = plan.validation.iter().map(String::as_str).collect();
    if let Some(id) = plan.train_real.iter().find(|id| val.contains(id.as_str())) {
        return Err(Error::Leakage(format!("`{id}` is in both training and validation")));
    }
    for id in &plan.train_synthetic {
        let s = synthetic
            .iter()
            .find(|s| &s.sample.id == id)
            .ok_or_else(|| Error::config(format!("unknown synthetic sample `{id}`")))?;
        if val.contains(id.as_str()) {
            return Err(Error::Leakage(format!("`{id}` is in both training and validation")));
        }
        if let Some(src) = s.sources.iter().find(|src| val.contains(src.as_str())) {
            return Err(Error::Leakage(format!(
                "synthetic `{id}` was built from validation sample `{src}`"
            )));
        }
    }
    Ok(())
}

/// Per-fold training sets for a cell. Synthetic samples whose sources meet
/// the fold's validation set are skipped; too few eligible samples is an
/// error.
pub fn plan_cell(
    cell: &DownstreamCell,
    real: &[Sample],
    synthetic: &[SourcedSample],
) -> Result<Vec<FoldPlan>> {
    cell.validate()?;
    let folds = assign_folds(real, cell.folds, cell.seed)?;
    let mut plans = Vec::with_capacity(folds.len());
    for (f, validation) in folds.into_iter().enumerate() {
        let val: HashSet<&str> = validation.iter().map(String::as_str).collect();
        let mut real_ids: Vec<&str> = real
            .iter()
            .map(|s| s.id.as_str())
            .filter(|id| !val.contains(id))
            .collect();
        if real_ids.len() < cell.n_real {
            return Err(Error::config(format!(
                "cell `{}` fold {f}: {} real samples requested, {} available",
                cell.label(),
                cell.n_real,
                real_ids.len()
            )));
        }
        real_ids.shuffle(&mut derive_rng(cell.seed, &[TAG_REAL, f as u64]));
        let mut synth_ids: Vec<&str> = synthetic
            .iter()
            .filter(|s| s.sources.iter().all(|src| !val.contains(src.as_str())))
            .map(|s| s.sample.id.as_str())
            .collect();
        if synth_ids.len() < cell.n_synthetic {
            return Err(Error::config(format!(
                "cell `{}` fold {f}: {} synthetic samples requested, {} eligible",
                cell.label(),
                cell.n_synthetic,
                synth_ids.len()
            )));
        }
        synth_ids.shuffle(&mut derive_rng(cell.seed, &[TAG_SYNTH, f as u64]));
        let to_vec = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        plans.push(FoldPlan {
            train_real: to_vec(&real_ids[..cell.n_real]),
            train_synthetic: to_vec(&synth_ids[..cell.n_synthetic]),
            validation,
        });
    }
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_validation: usize,
    pub scores: SegScores,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub segmentor_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: DownstreamCell,
    pub label: String,
    pub folds: Vec<FoldResult>,
    pub summary: CrossValSummary,
    /// Fold means of the lesion counts on each validation fold.
    pub mean_tp: f64,
    pub mean_fp: f64,
}

/// Trains and validates one segmentor per fold.
pub fn run_cell(
    cell: &DownstreamCell,
    real: &[Sample],
    synthetic: &[SourcedSample],
    policy: MatchPolicy,
) -> Result<CellResult> {
    let plans = plan_cell(cell, real, synthetic)?;
    let find_real = |id: &str| real.iter().find(|s| s.id == id).expect("planned id");
    let find_synth = |id: &str| &synthetic.iter().find(|s| s.sample.id == id).expect("planned id").sample;
    let mut folds = Vec::with_capacity(plans.len());
    for (f, plan) in plans.iter().enumerate() {
        check_fold_leakage(plan, synthetic)?;
        let train: Vec<(&Image, &Mask)> = plan
            .train_real
            .iter()
            .map(|id| find_real(id))
            .chain(plan.train_synthetic.iter().map(|id| find_synth(id)))
            .map(|s| (&s.tumour, &s.label))
            .collect();
        let val: Vec<&Sample> = plan.validation.iter().map(|id| find_real(id)).collect();
        let seed: u64 = derive_rng(cell.seed, &[TAG_TRAIN, f as u64]).random();
        let (seg, _) = train_segmentor(&train, &[], &cell.segmentor, &cell.schedule, seed)?;
        let images: Vec<&Image> = val.iter().map(|s| &s.tumour).collect();
        let labels: Vec<&Mask> = val.iter().map(|s| &s.label).collect();
        let eval = seg.evaluate(&images, &labels, policy)?;
        folds.push(FoldResult {
            fold: f,
            n_validation: val.len(),
            scores: eval.mean,
            tp: eval.tp,
            fp: eval.fp,
            fn_: eval.fn_,
            segmentor_checksum: seg.checksum()?,
        });
    }
    let scores: Vec<SegScores> = folds.iter().map(|f| f.scores).collect();
    let summary = crossval_aggregate(&scores, cell.folds)?;
    let mean_tp = mean(&folds.iter().map(|f| f.tp as f64).collect::<Vec<_>>());
    let mean_fp = mean(&folds.iter().map(|f| f.fp as f64).collect::<Vec<_>>());
    Ok(CellResult {
        label: cell.label(),
        cell: cell.clone(),
        folds,
        summary,
        mean_tp,
        mean_fp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_phantom_corpus, PhantomConfig};

    fn corpus(n: usize, seed: u64) -> Vec<Sample> {
        make_phantom_corpus(&PhantomConfig {
            n_samples: n,
            size: 16,
            blob_count_range: [0, 2],
            blob_radius_range: [2.0, 3.0],
            seed,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    fn synthetic(n: usize, sources: &[Sample]) -> Vec<SourcedSample> {
        corpus(n, 99)
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                s.id = format!("syn{i}");
                SourcedSample {
                    sources: vec![sources[i % sources.len()].id.clone()],
                    sample: s,
                }
            })
            .collect()
    }

    fn cell(n_real: usize, n_synthetic: usize) -> DownstreamCell {
        DownstreamCell {
            n_real,
            n_synthetic,
            folds: 5,
            segmentor: SegmentorSpec {
                unet_depth: 1,
                base_channels: 2,
                max_channels: 4,
                threshold: 0.5,
            },
            schedule: SegmentorSchedule {
                epochs: 1,
                batch_size: 4,
                ..SegmentorSchedule::default()
            },
            seed: 3,
            ..DownstreamCell::default()
        }
    }

    #[test]
    fn folds_partition_the_real_pool() {
        let real = corpus(23, 0);
        let folds = assign_folds(&real, 5, 1).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<&String> = folds.iter().flatten().collect();
        assert_eq!(all.len(), 23);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 23);
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
        assert_eq!(folds, assign_folds(&real, 5, 1).unwrap());
        assert!(assign_folds(&real[..3], 5, 1).is_err());
    }

    #[test]
    fn plans_respect_counts_and_provenance() {
        let real = corpus(25, 0);
        let syn = synthetic(40, &real[..10]);
        let plans = plan_cell(&cell(12, 10), &real, &syn).unwrap();
        assert_eq!(plans.len(), 5);
        for p in &plans {
            assert_eq!(p.train_real.len(), 12);
            assert_eq!(p.train_synthetic.len(), 10);
            check_fold_leakage(p, &syn).unwrap();
        }
        assert!(plan_cell(&cell(25, 0), &real, &syn).is_err());
        assert!(plan_cell(&cell(5, 40), &real, &syn).is_err());
        assert!(plan_cell(&cell(0, 0), &real, &syn).is_err());
    }

    #[test]
    fn leakage_is_a_hard_error() {
        let real = corpus(10, 0);
        let syn = synthetic(4, &real);
        let mut plan = FoldPlan {
            validation: vec![real[0].id.clone()],
            train_real: vec![real[1].id.clone()],
            train_synthetic: vec![],
        };
        check_fold_leakage(&plan, &syn).unwrap();
        plan.train_real.push(real[0].id.clone());
        assert!(matches!(check_fold_leakage(&plan, &syn), Err(Error::Leakage(_))));
        plan.train_real.pop();
        plan.train_synthetic.push("syn0".into());
        assert!(matches!(check_fold_leakage(&plan, &syn), Err(Error::Leakage(_))));
    }

    #[test]
    fn cell_runs_five_folds() {
        let real = corpus(15, 0);
        let syn = synthetic(10, &real);
        let r = run_cell(&cell(8, 4), &real, &syn, MatchPolicy::default()).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert_eq!(r.label, "8R+4S");
        assert_eq!(r.folds.iter().map(|f| f.n_validation).sum::<usize>(), 15);
        assert!(r.summary.dice.min <= r.summary.dice.mean && r.summary.dice.mean <= r.summary.dice.max);
        let again = run_cell(&cell(8, 4), &real, &syn, MatchPolicy::default()).unwrap();
        assert_eq!(r.folds[0].segmentor_checksum, again.folds[0].segmentor_checksum);
    }
}
