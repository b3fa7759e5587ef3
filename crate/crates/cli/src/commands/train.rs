use metgan_core::segmentor::Segmentor;
use metgan_core::trainer::{variant_wiring, Trainer};

use super::{owned, resolve_split, SPLIT_FILE};
use crate::fail::config_error;
use crate::run::RunContext;

pub fn run(ctx: &mut RunContext) -> anyhow::Result<()> {
    let mut config = ctx.manifest.require(&ctx.manifest.manifest.train, "train")?.clone();
    if let Some(seed) = ctx.manifest.manifest.seed {
        config.seed = seed;
    }
    config.validate()?;
    let seg = if variant_wiring(config.variant).segmentation_loss {
        let path = ctx
            .manifest
            .manifest
            .segmentor
            .as_ref()
            .and_then(|b| b.checkpoint.clone())
            .ok_or_else(|| {
                config_error(format!(
                    "{} needs a pretrained segmentor: set [segmentor] checkpoint",
                    config.variant
                ))
            })?;
        let ck = ctx.load_checkpoint("segmentor", &path)?;
        Some(Segmentor::from_checkpoint(&ck, &ctx.device)?.freeze()?)
    } else {
        None
    };
    let samples = ctx.load_samples()?;
    let split = resolve_split(ctx, &samples)?;
    let train = owned(&samples, &split.train);

    let trainer = match ctx.manifest.manifest.resume_from.clone() {
        Some(path) => {
            let ck = ctx.load_checkpoint("resume", &path)?;
            let t = Trainer::resume(&ck, &train, seg)?;
            if t.config() != &config {
                return Err(config_error("[train] differs from the configuration of the resumed run"));
            }
            t
        }
        None => Trainer::new(config, &train, seg)?,
    };
    let mut trainer = trainer.with_output(&ctx.out);
    let census = trainer.census();
    log::info!(
        "training {} on {} samples: {} generator(s), {} critic(s), {} trainable scalars",
        trainer.config().variant,
        train.len(),
        census.generators,
        census.critics,
        census.trainable_scalars
    );
    let mut summary = trainer.train()?;
    for rec in &mut summary.checkpoints {
        if let Some(p) = rec.path.take() {
            let rel = p.strip_prefix(&ctx.out).unwrap_or(&p).to_path_buf();
            ctx.record(rel.display().to_string());
            rec.path = Some(rel);
        }
    }
    for e in &summary.epochs {
        log::info!("epoch {}: {:?}", e.epoch, e.mean_losses);
    }
    ctx.record("train_log.jsonl");
    ctx.produced_checkpoint("generator", "generator.safetensors", &trainer.generator().checkpoint()?)?;
    ctx.write_json(SPLIT_FILE, &split)?;
    ctx.write_json("summary.json", &summary)
}
