use std::fmt::Write as _;

use metgan_core::segmentor::pretrain_segmentor;

use super::{owned, resolve_split, SPLIT_FILE};
use crate::run::RunContext;

pub fn run(ctx: &mut RunContext) -> anyhow::Result<()> {
    let mut block = ctx.manifest.require(&ctx.manifest.manifest.segmentor, "segmentor")?.clone();
    if let Some(seed) = ctx.manifest.manifest.seed {
        block.seed = seed;
    }
    let samples = ctx.load_samples()?;
    let split = resolve_split(ctx, &samples)?;
    let train = owned(&samples, &split.train);
    let validation = owned(&samples, &split.test);
    log::info!(
        "pretraining segmentor on {} samples, validating on {}",
        train.len(),
        validation.len()
    );
    let (seg, report) = pretrain_segmentor(&train, &validation, &block.spec, &block.schedule, block.seed)?;
    let seg = seg.freeze()?;
    ctx.produced_checkpoint("segmentor", "segmentor.safetensors", &seg.checkpoint()?)?;
    if let Some(v) = &report.final_validation {
        log::info!("validation lesion-wise Dice {:.4}", v.mean.dice);
    }
    let mut curve = String::from("epoch,mean_loss,validation_dice\n");
    for r in &report.epochs {
        let dice = r.validation_dice.map_or(String::new(), |d| format!("{d}"));
        let _ = writeln!(curve, "{},{},{dice}", r.epoch, r.mean_loss);
    }
    ctx.write_text("curve.csv", &curve)?;
    ctx.write_json(SPLIT_FILE, &split)?;
    ctx.write_json("pretrain_report.json", &report)
}
