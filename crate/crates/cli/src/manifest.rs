//! Declarative experiment manifests (TOML).

use std::path::{Path, PathBuf};

use anyhow::Context;
use metgan_core::data::PhantomConfig;
use metgan_core::downstream::DownstreamCell;
use metgan_core::metrics::MatchPolicy;
use metgan_core::segmentor::{SegmentorSchedule, SegmentorSpec};
use metgan_core::synthesis::LabelsPerJob;
use metgan_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::fail::config_error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// Replaces the seed of the command's own block when given.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub phantom: Option<PhantomConfig>,
    pub data: Option<DataSource>,
    pub split: Option<SplitSpec>,
    pub segmentor: Option<SegmentorBlock>,
    pub train: Option<TrainConfig>,
    /// Train-state checkpoint to continue from.
    pub resume_from: Option<PathBuf>,
    pub synthesis: Option<SynthesisBlock>,
    pub evaluation: Option<EvaluationBlock>,
    pub downstream: Option<DownstreamGrid>,
    pub report: Option<ReportBlock>,
}

/// Either a dataset directory or an in-memory phantom corpus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub root: Option<PathBuf>,
    /// Side length images are resized to on load.
    pub side: Option<usize>,
    pub phantom: Option<PhantomConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub fraction_test: f64,
    pub seed: u64,
    /// A `split.json` written by an earlier run; overrides the fields above.
    pub file: Option<PathBuf>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fraction_test: 0.2,
            seed: 0,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentorBlock {
    pub spec: SegmentorSpec,
    pub schedule: SegmentorSchedule,
    pub seed: u64,
    /// A pretrained segmentor, for commands that consume one.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisBlock {
    pub checkpoint: PathBuf,
    pub n_jobs: usize,
    #[serde(default)]
    pub labels_per_job: LabelsPerJob,
    #[serde(default)]
    pub seed: u64,
    /// Which side of the split supplies anatomy images and labels.
    #[serde(default)]
    pub pool: Pool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantEntry {
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationBlock {
    pub variants: Vec<VariantEntry>,
    pub baseline: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamGrid {
    /// Output directory of a `generate` run.
    pub synthetic_root: Option<PathBuf>,
    pub cells: Vec<DownstreamCell>,
    #[serde(default)]
    pub match_policy: MatchPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportBlock {
    /// Run directories holding `evaluation.json` or `downstream.json`.
    pub inputs: Vec<PathBuf>,
}

/// A parsed manifest with its verbatim text and location.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub text: String,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest = Self::parse(&text).with_context(|| format!("in manifest {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            manifest,
            text,
            base_dir,
        })
    }

    pub fn parse(text: &str) -> anyhow::Result<Manifest> {
        let manifest: Manifest = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(config_error(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }

    /// Resolves a manifest path relative to the manifest's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn require<'a, T>(&self, block: &'a Option<T>, name: &str) -> anyhow::Result<&'a T> {
        block
            .as_ref()
            .ok_or_else(|| config_error(format!("manifest lacks a [{name}] block")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_manifest_parses() {
        let m = LoadedManifest::parse("schema_version = 1\n[phantom]\nn_samples = 4\n").unwrap();
        assert_eq!(m.phantom.unwrap().n_samples, 4);
        assert!(m.train.is_none());
    }

    #[test]
    fn schema_and_unknown_fields_are_rejected() {
        assert!(LoadedManifest::parse("schema_version = 2\n").is_err());
        assert!(LoadedManifest::parse("schema_version = 1\nbogus = 3\n").is_err());
        assert!(LoadedManifest::parse("phantom = {}\n").is_err());
    }

    #[test]
    fn train_block_takes_variant_names() {
        let m = LoadedManifest::parse(
            "schema_version = 1\n[train]\nvariant = \"CycleGANSeg\"\nepochs = 3\n[train.generator]\nimage_size = 32\n",
        )
        .unwrap();
        let t = m.train.unwrap();
        assert_eq!(t.variant.name(), "CycleGANSeg");
        assert_eq!((t.epochs, t.generator.image_size), (3, 32));
    }

    #[test]
    fn grid_cells_default_their_fields() {
        let m = LoadedManifest::parse(
            "schema_version = 1\n[downstream]\n[[downstream.cells]]\nn_real = 20\n[[downstream.cells]]\nn_real = 20\nn_synthetic = 100\n",
        )
        .unwrap();
        let g = m.downstream.unwrap();
        assert_eq!(g.cells.len(), 2);
        assert_eq!(g.cells[1].folds, 5);
        assert_eq!(g.cells[1].label(), "20R+100S");
    }
}
