use std::fmt::Write as _;

use metgan_core::evaluation::EvaluationReport;
use serde::de::DeserializeOwned;

use super::downstream::{band_plot_svg, DownstreamReport, DOWNSTREAM_JSON};
use super::evaluate::EVALUATION_JSON;
use crate::fail::config_error;
use crate::run::{RunContext, Stamp};

pub const REPORT_FILE: &str = "report.md";

fn read_doc<T: DeserializeOwned>(path: &std::path::Path) -> anyhow::Result<Option<(Stamp, T)>> {
    if !path.is_file() {
        return Ok(None);
    }
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let stamp: Stamp = serde_json::from_value(value["provenance"].clone())?;
    Ok(Some((stamp, serde_json::from_value(value)?)))
}

/// Collects evaluation and downstream results of earlier runs into one
/// document and redraws their plots.
pub fn run(ctx: &mut RunContext) -> anyhow::Result<()> {
    let block = ctx.manifest.require(&ctx.manifest.manifest.report, "report")?.clone();
    if block.inputs.is_empty() {
        return Err(config_error("[report] lists no inputs"));
    }
    let mut md = format!("# MetGAN experiment report\n\n{}\n", ctx.stamp().one_line());
    for (i, rel) in block.inputs.iter().enumerate() {
        let dir = ctx.manifest.resolve(rel);
        if !dir.is_dir() {
            return Err(config_error(format!("report input {} does not exist", dir.display())));
        }
        let eval: Option<(Stamp, EvaluationReport)> = read_doc(&dir.join(EVALUATION_JSON))?;
        let down: Option<(Stamp, DownstreamReport)> = read_doc(&dir.join(DOWNSTREAM_JSON))?;
        if eval.is_none() && down.is_none() {
            return Err(config_error(format!(
                "{} holds neither {EVALUATION_JSON} nor {DOWNSTREAM_JSON}",
                dir.display()
            )));
        }
        if let Some((stamp, r)) = eval {
            let _ = write!(
                md,
                "\n## Image similarity ({})\n\nSource: {}\n\n{}",
                rel.display(),
                stamp.one_line(),
                r.to_markdown()
            );
            for c in &stamp.checkpoints {
                ctx.cite_checkpoint(&c.role, &rel.join(&c.path), &c.id);
            }
        }
        if let Some((stamp, r)) = down {
            let plot = format!("downstream_{i}.svg");
            let _ = write!(
                md,
                "\n## Downstream segmentation ({})\n\nSource: {}\n\n{}\n![Dice by dataset size]({plot})\n",
                rel.display(),
                stamp.one_line(),
                r.to_markdown()
            );
            let svg = band_plot_svg(&r.cells, &stamp.one_line());
            ctx.write_text(&plot, &svg)?;
        }
    }
    ctx.write_text(REPORT_FILE, &md)
}
