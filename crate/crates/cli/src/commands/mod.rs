mod downstream;
mod evaluate;
mod generate;
mod phantom;
mod pretrain;
mod report;
mod train;

use metgan_core::data::{split_dataset, DatasetSplit, Sample};

use crate::fail::config_error;
use crate::run::RunContext;

pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Phantom,
    PretrainSeg,
    TrainGan,
    Generate,
    Evaluate,
    Downstream,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::PretrainSeg => "pretrain-seg",
            Command::TrainGan => "train-gan",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
            Command::Downstream => "downstream",
            Command::Report => "report",
        }
    }

    pub fn run(self, ctx: &mut RunContext) -> anyhow::Result<()> {
        match self {
            Command::Phantom => phantom::run(ctx),
            Command::PretrainSeg => pretrain::run(ctx),
            Command::TrainGan => train::run(ctx),
            Command::Generate => generate::run(ctx),
            Command::Evaluate => evaluate::run(ctx),
            Command::Downstream => downstream::run(ctx),
            Command::Report => report::run(ctx),
        }
    }
}

/// The manifest's split: read from `split.file`, or drawn from
/// `fraction_test` and `seed` (defaults when the block is absent).
fn resolve_split(ctx: &RunContext, samples: &[Sample]) -> anyhow::Result<DatasetSplit> {
    let spec = ctx.manifest.manifest.split.clone().unwrap_or_default();
    let Some(file) = &spec.file else {
        return Ok(split_dataset(samples, spec.fraction_test, spec.seed)?);
    };
    let path = ctx.manifest.resolve(file);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| config_error(format!("cannot read split {}: {e}", path.display())))?;
    let split: DatasetSplit = serde_json::from_str(&text)?;
    if let Some(id) = split
        .train
        .iter()
        .chain(&split.test)
        .find(|id| !samples.iter().any(|s| &s.id == *id))
    {
        return Err(config_error(format!("split names sample `{id}`, which the dataset lacks")));
    }
    Ok(split)
}

fn owned(samples: &[Sample], ids: &[String]) -> Vec<Sample> {
    DatasetSplit::select(samples, ids).into_iter().cloned().collect()
}
