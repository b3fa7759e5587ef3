use std::fmt::Write as _;

use metgan_core::data::DatasetSplit;
use metgan_core::evaluation::{check_held_out, evaluate_variants, generate_outputs, Metric};
use metgan_core::synthesis::Synthesizer;

use super::resolve_split;
use crate::fail::config_error;
use crate::run::RunContext;

pub const EVALUATION_JSON: &str = "evaluation.json";

pub fn run(ctx: &mut RunContext) -> anyhow::Result<()> {
    let block = ctx.manifest.require(&ctx.manifest.manifest.evaluation, "evaluation")?.clone();
    let has_split_file = ctx.manifest.manifest.split.as_ref().is_some_and(|s| s.file.is_some());
    if !has_split_file {
        return Err(config_error(
            "evaluation needs the training split: set [split] file to the run's split.json",
        ));
    }
    let samples = ctx.load_samples()?;
    let split = resolve_split(ctx, &samples)?;
    let test = DatasetSplit::select(&samples, &split.test);
    check_held_out(&split, &test)?;
    let mut outputs = Vec::with_capacity(block.variants.len());
    for v in &block.variants {
        let ck = ctx.load_checkpoint(&format!("variant:{}", v.name), &v.checkpoint)?;
        let synth = Synthesizer::from_checkpoint(&ck, &ctx.device)?;
        outputs.push(generate_outputs(&v.name, synth.generator(), &test)?);
        log::info!("translated {} held-out images with {}", test.len(), v.name);
    }
    let report = evaluate_variants(&test, &outputs, block.baseline.as_deref())?;
    for w in &report.warnings {
        log::warn!("{w}");
    }

    let mut csv = String::from("variant,id,mae,msd,ssim,ccoeff\n");
    for row in &report.variants {
        for r in &row.per_image {
            let cc = r.scores.ccoeff.map_or(String::new(), |c| format!("{c}"));
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{cc}",
                row.name, r.id, r.scores.mae, r.scores.msd, r.scores.ssim
            );
        }
        let means: Vec<String> = Metric::ALL
            .iter()
            .map(|m| row.means.get(m).map_or(String::new(), |v| format!("{v}")))
            .collect();
        let _ = writeln!(csv, "{},mean,{}", row.name, means.join(","));
    }
    let md = format!(
        "# Image similarity on {} held-out pairs\n\n{}\n{}",
        report.n_images,
        ctx.stamp().one_line(),
        report.to_markdown()
    );
    ctx.write_text("per_image.csv", &csv)?;
    ctx.write_text("evaluation.md", &md)?;
    ctx.write_json(EVALUATION_JSON, &report)
}
