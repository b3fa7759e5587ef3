//! Minting synthetic image-label pairs: real anatomy images combined with
//! real (optionally merged) lesion labels drawn from other samples, passed
//! through a trained anatomy→tumour generator.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{export_dataset, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::metgen::{Generator, GENERATOR_KIND};
use crate::metrics::MatchPolicy;
use crate::nn::Checkpoint;
use crate::rng::derive_rng;
use crate::segmentor::{SegEvaluation, Segmentor};
use crate::trainer::{generator_from_state, TRAIN_STATE_KIND};

const TAG_JOB: u64 = 11;
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Pixel-wise union of equally shaped binary masks.
pub fn merge_labels(masks: &[&Mask]) -> Result<Mask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::config("no labels to merge"))?;
    let mut out = (*first).clone();
    for m in rest {
        if m.dim() != out.dim() {
            return Err(Error::shape(format!(
                "labels differ in shape: {:?} vs {:?}",
                out.dim(),
                m.dim()
            )));
        }
        out.zip_mut_with(m, |a, &b| *a = u8::from(*a > 0 || b > 0));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub anatomy_id: String,
    pub label_ids: Vec<String>,
    pub output_id: String,
    pub seed: u64,
}

/// Inclusive range of labels merged per job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsPerJob {
    pub min: usize,
    pub max: usize,
}

impl Default for LabelsPerJob {
    fn default() -> Self {
        Self { min: 1, max: 2 }
    }
}

impl LabelsPerJob {
    pub fn exactly(k: usize) -> Self {
        Self { min: k, max: k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::config(format!(
                "labels per job must satisfy 1 <= min <= max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Draws `n` unpaired anatomy/label combinations.
///
/// Labels come from samples with at least one lesion pixel and never share a
/// source id with the job's anatomy. Each job uses its own random stream, so
/// job `i` is the same for any `n > i`.
pub fn sample_jobs(
    anatomies: &[Sample],
    labels: &[Sample],
    n: usize,
    per_job: LabelsPerJob,
    seed: u64,
) -> Result<Vec<SynthesisJob>> {
    if n == 0 {
        return Err(Error::config("number of jobs must be positive"));
    }
    per_job.validate()?;
    if anatomies.is_empty() {
        return Err(Error::config("anatomy pool is empty"));
    }
    let pool: Vec<&str> = labels
        .iter()
        .filter(|s| s.has_lesion())
        .map(|s| s.id.as_str())
        .collect();
    if pool.is_empty() {
        return Err(Error::config("label pool holds no non-empty labels"));
    }
    let mut jobs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derive_rng(seed, &[TAG_JOB, i as u64]);
        let anatomy = &anatomies[rng.random_range(0..anatomies.len())].id;
        let candidates: Vec<&str> = pool.iter().copied().filter(|id| id != anatomy).collect();
        let k = rng.random_range(per_job.min..=per_job.max);
        if candidates.len() < k {
            return Err(Error::config(format!(
                "job {i} needs {k} labels not from `{anatomy}`, only {} available",
                candidates.len()
            )));
        }
        let mut picks = index::sample(&mut rng, candidates.len(), k).into_vec();
        picks.sort_unstable();
        jobs.push(SynthesisJob {
            anatomy_id: anatomy.clone(),
            label_ids: picks.into_iter().map(|j| candidates[j].to_string()).collect(),
            output_id: format!("syn{i:05}"),
            seed: rng.random(),
        });
    }
    Ok(jobs)
}

/// A trained anatomy→tumour generator and the id of the checkpoint it came from.
pub struct Synthesizer {
    generator: Generator,
    checkpoint_id: String,
}

impl Synthesizer {
    pub fn new(generator: Generator, checkpoint_id: impl Into<String>) -> Self {
        Self {
            generator,
            checkpoint_id: checkpoint_id.into(),
        }
    }

    /// Accepts a generator checkpoint or a full training state.
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let generator = match ck.kind.as_str() {
            GENERATOR_KIND => Generator::from_checkpoint(ck, device)?,
            TRAIN_STATE_KIND => generator_from_state(ck, device)?,
            other => {
                return Err(Error::Checkpoint(format!(
                    "cannot synthesize from a `{other}` checkpoint"
                )))
            }
        };
        Ok(Self::new(generator, ck.id()?))
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub job: SynthesisJob,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub anatomy: Image,
    pub image: Image,
    /// The imposed mask, exactly as merged from the job's labels.
    pub label: Mask,
    pub provenance: Provenance,
}

impl SyntheticPair {
    pub fn to_sample(&self) -> Result<Sample> {
        Sample::new(
            self.provenance.job.output_id.clone(),
            self.anatomy.clone(),
            self.image.clone(),
            self.label.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub output_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutput {
    pub pairs: Vec<SyntheticPair>,
    pub rejected: Vec<Rejection>,
}

/// Optional veto on a placement; returns a reason when the label should not
/// be placed on this anatomy.
pub type PlacementFilter<'a> = &'a dyn Fn(&Image, &Mask) -> Option<String>;

/// Runs every job through the generator one at a time, so each result is
/// independent of batch composition and job order.
pub fn synthesize(
    synth: &Synthesizer,
    jobs: &[SynthesisJob],
    samples: &[Sample],
    filter: Option<PlacementFilter<'_>>,
) -> Result<SynthesisOutput> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let lookup = |id: &str| {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::config(format!("job references unknown sample `{id}`")))
    };
    let side = synth.generator.spec().image_size;
    let mut out = SynthesisOutput::default();
    for job in jobs {
        let anatomy = lookup(&job.anatomy_id)?;
        if anatomy.dim() != (side, side) {
            return Err(Error::Checkpoint(format!(
                "generator expects {side}×{side} images, `{}` is {:?}",
                anatomy.id,
                anatomy.dim()
            )));
        }
        let masks = job
            .label_ids
            .iter()
            .map(|id| lookup(id).map(|s| &s.label))
            .collect::<Result<Vec<_>>>()?;
        let reject = |reason: String| Rejection {
            output_id: job.output_id.clone(),
            reason,
        };
        if masks.is_empty() {
            out.rejected.push(reject("job lists no labels".into()));
            continue;
        }
        let label = merge_labels(&masks)?;
        if label.iter().all(|&v| v == 0) {
            out.rejected.push(reject("merged label is empty".into()));
            continue;
        }
        if let Some(reason) = filter.and_then(|f| f(&anatomy.anatomy, &label)) {
            out.rejected.push(reject(reason));
            continue;
        }
        let image = synth.generator.translate_image(&anatomy.anatomy, &label)?;
        out.pairs.push(SyntheticPair {
            anatomy: anatomy.anatomy.clone(),
            image,
            label,
            provenance: Provenance {
                job: job.clone(),
                checkpoint_id: synth.checkpoint_id.clone(),
            },
        });
    }
    Ok(out)
}

/// Lesion-wise agreement between the imposed labels and what the segmentor
/// finds in the synthetic images.
pub fn placement_fidelity(seg: &Segmentor, pairs: &[SyntheticPair], policy: MatchPolicy) -> Result<SegEvaluation> {
    let images: Vec<&Image> = pairs.iter().map(|p| &p.image).collect();
    let labels: Vec<&Mask> = pairs.iter().map(|p| &p.label).collect();
    seg.evaluate(&images, &labels, policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceManifest {
    pub checkpoint_id: String,
    pub pairs: Vec<SynthesisJob>,
    pub rejected: Vec<Rejection>,
}

/// Writes the pairs in the dataset layout plus a provenance manifest.
pub fn export_synthetic(root: &Path, output: &SynthesisOutput) -> Result<ProvenanceManifest> {
    let samples = output
        .pairs
        .iter()
        .map(SyntheticPair::to_sample)
        .collect::<Result<Vec<_>>>()?;
    export_dataset(root, &samples)?;
    let ids: Vec<&str> = output
        .pairs
        .iter()
        .map(|p| p.provenance.checkpoint_id.as_str())
        .collect();
    if ids.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config("pairs come from different checkpoints"));
    }
    let manifest = ProvenanceManifest {
        checkpoint_id: ids.first().map(|s| s.to_string()).unwrap_or_default(),
        pairs: output.pairs.iter().map(|p| p.provenance.job.clone()).collect(),
        rejected: output.rejected.clone(),
    };
    let path = root.join(PROVENANCE_FILE);
    let body = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
