use std::collections::BTreeMap;
use std::fmt::Write as _;

use metgan_core::data::{load_dataset, LoadOptions};
use metgan_core::downstream::{run_cell, CellResult, SourcedSample};
use metgan_core::metrics::{Band, MatchPolicy};
use metgan_core::synthesis::{ProvenanceManifest, PROVENANCE_FILE};
use serde::{Deserialize, Serialize};

use crate::fail::config_error;
use crate::run::RunContext;

pub const DOWNSTREAM_JSON: &str = "downstream.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub match_policy: MatchPolicy,
    pub cells: Vec<CellResult>,
}

impl DownstreamReport {
    pub fn to_markdown(&self) -> String {
        let band = |b: &Band| format!("{:.4} [{:.4}, {:.4}]", b.mean, b.min, b.max);
        let mut s = format!(
            "Lesion matching IoU threshold {} (0 accepts any overlap). Bands are fold min and max.\n\n",
            self.match_policy.iou_threshold
        );
        s.push_str("| Cell | Folds | Dice | Precision | Recall | Jaccard | TP | FP |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for c in &self.cells {
            let m = &c.summary;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {:.1} | {:.1} |",
                c.label,
                m.folds,
                band(&m.dice),
                band(&m.precision),
                band(&m.recall),
                band(&m.jaccard),
                c.mean_tp,
                c.mean_fp
            );
        }
        s
    }
}

fn load_synthetic(ctx: &mut RunContext, side: usize) -> anyhow::Result<Vec<SourcedSample>> {
    let grid = ctx.manifest.require(&ctx.manifest.manifest.downstream, "downstream")?;
    let Some(rel) = grid.synthetic_root.clone() else {
        return Err(config_error(
            "cells with synthetic samples need [downstream] synthetic_root",
        ));
    };
    let root = ctx.manifest.resolve(&rel);
    let path = root.join(PROVENANCE_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| config_error(format!("synthetic corpus manifest {}: {e}", path.display())))?;
    let manifest: ProvenanceManifest = serde_json::from_str(&text)?;
    ctx.cite_checkpoint("synthesis", &rel, &manifest.checkpoint_id);
    let mut sources: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for job in &manifest.pairs {
        let mut ids = vec![job.anatomy_id.clone()];
        ids.extend(job.label_ids.iter().cloned());
        sources.insert(&job.output_id, ids);
    }
    load_dataset(&root, &LoadOptions { side })?
        .into_iter()
        .map(|sample| {
            let src = sources
                .get(sample.id.as_str())
                .cloned()
                .ok_or_else(|| config_error(format!("synthetic sample `{}` has no provenance", sample.id)))?;
            Ok(SourcedSample { sample, sources: src })
        })
        .collect()
}

pub fn run(ctx: &mut RunContext) -> anyhow::Result<()> {
    let mut grid = ctx.manifest.require(&ctx.manifest.manifest.downstream, "downstream")?.clone();
    if grid.cells.is_empty() {
        return Err(config_error("[downstream] lists no cells"));
    }
    if let Some(seed) = ctx.manifest.manifest.seed {
        for c in &mut grid.cells {
            c.seed = seed;
        }
    }
    for c in &grid.cells {
        c.validate()?;
    }
    let real = ctx.load_samples()?;
    let side = real.first().map_or(0, |s| s.dim().0);
    let synthetic = if grid.cells.iter().any(|c| c.n_synthetic > 0) {
        load_synthetic(ctx, side)?
    } else {
        Vec::new()
    };
    let mut cells = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let r = run_cell(cell, &real, &synthetic, grid.match_policy)?;
        log::info!(
            "{}: Dice {:.4} [{:.4}, {:.4}]",
            r.label,
            r.summary.dice.mean,
            r.summary.dice.min,
            r.summary.dice.max
        );
        cells.push(r);
    }
    let report = DownstreamReport {
        match_policy: grid.match_policy,
        cells,
    };
    let md = format!(
        "# Downstream segmentation\n\n{}\n\n{}",
        ctx.stamp().one_line(),
        report.to_markdown()
    );
    let svg = band_plot_svg(&report.cells, &ctx.stamp().one_line());
    ctx.write_text("downstream.md", &md)?;
    ctx.write_text("downstream.svg", &svg)?;
    ctx.write_json(DOWNSTREAM_JSON, &report)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean lesion-wise Dice against the number of real samples, one line and
/// min/max band per data regime (number of synthetic samples).
pub fn band_plot_svg(cells: &[CellResult], caption: &str) -> String {
    let mut regimes: BTreeMap<usize, Vec<(usize, Band)>> = BTreeMap::new();
    for c in cells {
        regimes.entry(c.cell.n_synthetic).or_default().push((c.cell.n_real, c.summary.dice));
    }
    for pts in regimes.values_mut() {
        pts.sort_by_key(|p| p.0);
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 30.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let xs: Vec<usize> = cells.iter().map(|c| c.cell.n_real).collect();
    let (mut x0, mut x1) = (
        xs.iter().copied().min().unwrap_or(0) as f64,
        xs.iter().copied().max().unwrap_or(1) as f64,
    );
    let pad = ((x1 - x0) * 0.1).max(1.0);
    x0 -= pad;
    x1 += pad;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<!-- {} -->", escape(caption).replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let mut ticks = xs.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        let x = sx(t as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">real training samples</text>"#,
        left + pw / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">lesion-wise Dice</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    let n = regimes.len();
    for (i, (synthetic, pts)) in regimes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dx = (i as f64 - (n as f64 - 1.0) / 2.0) * 6.0;
        let px = |x: usize| sx(x as f64) + dx;
        let upper: Vec<String> = pts.iter().map(|(x, b)| format!("{:.1},{:.1}", px(*x), sy(b.max))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|(x, b)| format!("{:.1},{:.1}", px(*x), sy(b.min))).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts.iter().map(|(x, b)| format!("{:.1},{:.1}", px(*x), sy(b.mean))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for (x, b) in pts {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{color}"/><circle cx="{0:.1}" cy="{3:.1}" r="3" fill="{color}"/>"#,
                px(*x),
                sy(b.min),
                sy(b.max),
                sy(b.mean)
            );
        }
        let name = if *synthetic == 0 {
            "real only".to_string()
        } else {
            format!("real + {synthetic} synthetic")
        };
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="14" height="10" fill="{color}" fill-opacity="0.4" stroke="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly - 9.0,
            lx + 20.0,
            ly,
            escape(&name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use metgan_core::downstream::DownstreamCell;
    use metgan_core::metrics::CrossValSummary;

    fn cell(n_real: usize, n_synthetic: usize, dice: f64) -> CellResult {
        let b = Band {
            mean: dice,
            min: dice - 0.1,
            max: dice + 0.05,
        };
        CellResult {
            cell: DownstreamCell {
                n_real,
                n_synthetic,
                ..DownstreamCell::default()
            },
            label: format!("{n_real}R+{n_synthetic}S"),
            folds: Vec::new(),
            summary: CrossValSummary {
                folds: 5,
                dice: b,
                precision: b,
                recall: b,
                jaccard: b,
            },
            mean_tp: 3.0,
            mean_fp: 1.0,
        }
    }

    #[test]
    fn one_line_and_band_per_regime() {
        let cells = [cell(20, 0, 0.6), cell(40, 0, 0.7), cell(20, 100, 0.75), cell(40, 100, 0.8)];
        let svg = band_plot_svg(&cells, "caption <x>");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert!(svg.contains("real only") && svg.contains("real + 100 synthetic"));
        assert!(svg.contains("caption &lt;x&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn markdown_lists_every_cell() {
        let r = DownstreamReport {
            match_policy: MatchPolicy::default(),
            cells: vec![cell(20, 0, 0.6), cell(20, 100, 0.75)],
        };
        let md = r.to_markdown();
        assert!(md.contains("| 20R+0S | 5 | 0.6000 [0.5000, 0.6500]"));
        assert!(md.contains("20R+100S"));
    }
}
