use metgan_core::data::Sample;
use metgan_core::metrics::MatchPolicy;
use metgan_core::segmentor::Segmentor;
use metgan_core::synthesis::{
    export_synthetic, placement_fidelity, sample_jobs, synthesize, Synthesizer, PROVENANCE_FILE,
};

use super::{resolve_split, SPLIT_FILE};
use crate::manifest::Pool;
use crate::run::RunContext;

pub fn run(ctx: &mut RunContext) -> anyhow::Result<()> {
    let mut block = ctx.manifest.require(&ctx.manifest.manifest.synthesis, "synthesis")?.clone();
    if let Some(seed) = ctx.manifest.manifest.seed {
        block.seed = seed;
    }
    block.labels_per_job.validate()?;
    let samples = ctx.load_samples()?;
    let pool: Vec<Sample> = match block.pool {
        Pool::All => samples.clone(),
        side => {
            let split = resolve_split(ctx, &samples)?;
            ctx.write_json(SPLIT_FILE, &split)?;
            let ids = if side == Pool::Train { &split.train } else { &split.test };
            super::owned(&samples, ids)
        }
    };
    let ck = ctx.load_checkpoint("generator", &block.checkpoint)?;
    let synth = Synthesizer::from_checkpoint(&ck, &ctx.device)?;
    let jobs = sample_jobs(&pool, &pool, block.n_jobs, block.labels_per_job, block.seed)?;
    let output = synthesize(&synth, &jobs, &pool, None)?;
    log::info!("{} pairs synthesized, {} rejected", output.pairs.len(), output.rejected.len());
    export_synthetic(&ctx.out, &output)?;
    ctx.record(PROVENANCE_FILE);
    for p in &output.pairs {
        for ch in ["anatomy", "tumour", "label"] {
            ctx.record(format!("{ch}/{}.png", p.provenance.job.output_id));
        }
    }
    let seg_path = ctx.manifest.manifest.segmentor.as_ref().and_then(|b| b.checkpoint.clone());
    if let Some(path) = seg_path {
        let seg_ck = ctx.load_checkpoint("segmentor", &path)?;
        let seg = Segmentor::from_checkpoint(&seg_ck, &ctx.device)?;
        let fidelity = placement_fidelity(&seg, &output.pairs, MatchPolicy::default())?;
        log::info!("placement fidelity: lesion-wise Dice {:.4}", fidelity.mean.dice);
        ctx.write_json("fidelity.json", &fidelity)?;
    }
    Ok(())
}
