//! Held-out image-similarity comparison of trained generators: each variant
//! translates the test anatomy images under their real labels, and its
//! outputs are scored against the real tumour images.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Image, Sample};
use crate::error::{Error, Result};
use crate::metgen::Generator;
use crate::metrics::{mean, paired_ttest, SimilarityReport, TTest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mae,
    Msd,
    Ssim,
    Ccoeff,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Mae, Metric::Msd, Metric::Ssim, Metric::Ccoeff];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "MAE",
            Metric::Msd => "MSD",
            Metric::Ssim => "SSIM",
            Metric::Ccoeff => "CCoeff",
        }
    }

    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::Mae | Metric::Msd)
    }

    fn of(self, r: &SimilarityReport) -> Option<f64> {
        match self {
            Metric::Mae => Some(r.mae),
            Metric::Msd => Some(r.msd),
            Metric::Ssim => Some(r.ssim),
            Metric::Ccoeff => r.ccoeff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub scores: SimilarityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    /// Per-image means; CCoeff skips images where it is undefined.
    pub means: BTreeMap<Metric, f64>,
    pub per_image: Vec<ImageRow>,
    /// Paired tests against the baseline, absent for the baseline itself.
    pub ttests: BTreeMap<Metric, TTest>,
    pub best: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_images: usize,
    pub baseline: Option<String>,
    pub variants: Vec<VariantRow>,
    pub warnings: Vec<String>,
}

/// Generated tumour images of one variant, in test-sample order.
#[derive(Debug, Clone)]
pub struct VariantOutputs {
    pub name: String,
    pub images: Vec<Image>,
}

/// Test images must be held out: every id is on the test side of `split`
/// and none appears among its training ids.
pub fn check_held_out(split: &DatasetSplit, test: &[&Sample]) -> Result<()> {
    if !split.is_disjoint() {
        return Err(Error::Leakage("split lists samples on both sides".into()));
    }
    for s in test {
        if split.train.contains(&s.id) {
            return Err(Error::Leakage(format!("test sample `{}` was used for training", s.id)));
        }
        if !split.test.contains(&s.id) {
            return Err(Error::Leakage(format!("sample `{}` is not in the held-out split", s.id)));
        }
    }
    Ok(())
}

/// Translates each test anatomy image under its real label.
pub fn generate_outputs(name: &str, generator: &Generator, test: &[&Sample]) -> Result<VariantOutputs> {
    let images = test
        .iter()
        .map(|s| generator.translate_image(&s.anatomy, &s.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(VariantOutputs {
        name: name.to_string(),
        images,
    })
}

/// Scores every variant against the real tumour images and tests each one
/// against `baseline` (default: the first variant).
pub fn evaluate_variants(
    test: &[&Sample],
    variants: &[VariantOutputs],
    baseline: Option<&str>,
) -> Result<EvaluationReport> {
    if variants.is_empty() {
        return Err(Error::config("no variants to evaluate"));
    }
    if test.is_empty() {
        return Err(Error::config("no test images"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        if v.images.len() != test.len() {
            return Err(Error::shape(format!(
                "variant `{}` has {} images for {} test samples",
                v.name,
                v.images.len(),
                test.len()
            )));
        }
        let per_image = test
            .iter()
            .zip(&v.images)
            .map(|(s, img)| {
                Ok(ImageRow {
                    id: s.id.clone(),
                    scores: SimilarityReport::compute(img, &s.tumour)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let means = Metric::ALL
            .iter()
            .filter_map(|&m| {
                let vals: Vec<f64> = per_image.iter().filter_map(|r| m.of(&r.scores)).collect();
                (!vals.is_empty()).then(|| (m, mean(&vals)))
            })
            .collect();
        rows.push(VariantRow {
            name: v.name.clone(),
            means,
            per_image,
            ttests: BTreeMap::new(),
            best: Vec::new(),
        });
    }

    let mut warnings = Vec::new();
    let baseline = if rows.len() < 2 {
        warnings.push("single variant: no significance tests".to_string());
        None
    } else {
        let name = baseline.unwrap_or(&rows[0].name).to_string();
        let b = rows
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::config(format!("baseline `{name}` is not among the variants")))?;
        let base = rows[b].per_image.clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i == b {
                continue;
            }
            for m in Metric::ALL {
                let (xs, ys): (Vec<f64>, Vec<f64>) = row
                    .per_image
                    .iter()
                    .zip(&base)
                    .filter_map(|(r, q)| Some((m.of(&r.scores)?, m.of(&q.scores)?)))
                    .unzip();
                if xs.len() >= 2 {
                    row.ttests.insert(m, paired_ttest(&xs, &ys)?);
                }
            }
        }
        Some(name)
    };

    for m in Metric::ALL {
        let vals: Vec<Option<f64>> = rows.iter().map(|r| r.means.get(&m).copied()).collect();
        let best = vals.iter().flatten().copied().fold(None, |acc: Option<f64>, v| {
            Some(match acc {
                None => v,
                Some(a) if m.lower_is_better() => a.min(v),
                Some(a) => a.max(v),
            })
        });
        if let Some(best) = best {
            for (row, v) in rows.iter_mut().zip(&vals) {
                if *v == Some(best) {
                    row.best.push(m);
                }
            }
        }
    }

    Ok(EvaluationReport {
        n_images: test.len(),
        baseline,
        variants: rows,
        warnings,
    })
}

impl EvaluationReport {
    /// Markdown table, four decimals, best values in bold, p-values
    /// against the baseline in a second table.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Variant | {} |", Metric::ALL.map(Metric::name).join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(Metric::ALL.len()));
        for row in &self.variants {
            let cells: Vec<String> = Metric::ALL
                .iter()
                .map(|m| match row.means.get(m) {
                    Some(v) if row.best.contains(m) => format!("**{v:.4}**"),
                    Some(v) => format!("{v:.4}"),
                    None => "n/a".into(),
                })
                .collect();
            let _ = writeln!(s, "| {} | {} |", row.name, cells.join(" | "));
        }
        if let Some(b) = &self.baseline {
            let _ = writeln!(s, "\nPaired t-test p-values against {b} ({} images):\n", self.n_images);
            let _ = writeln!(s, "| Variant | {} |", Metric::ALL.map(Metric::name).join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(Metric::ALL.len()));
            for row in self.variants.iter().filter(|r| &r.name != b) {
                let cells: Vec<String> = Metric::ALL
                    .iter()
                    .map(|m| row.ttests.get(m).map_or("n/a".into(), |t| format!("{:.3e}", t.p_value)))
                    .collect();
                let _ = writeln!(s, "| {} | {} |", row.name, cells.join(" | "));
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "\nWarning: {w}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_phantom_corpus, split_dataset, PhantomConfig};

    fn corpus() -> Vec<Sample> {
        make_phantom_corpus(&PhantomConfig {
            n_samples: 30,
            size: 16,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    fn outputs(name: &str, test: &[&Sample], f: impl Fn(&Sample) -> Image) -> VariantOutputs {
        VariantOutputs {
            name: name.into(),
            images: test.iter().map(|s| f(s)).collect(),
        }
    }

    #[test]
    fn ground_truth_beats_identity() {
        let s = corpus();
        let test: Vec<&Sample> = s.iter().collect();
        let truth = outputs("truth", &test, |s| s.tumour.clone());
        let ident = outputs("identity", &test, |s| s.anatomy.clone());
        let r = evaluate_variants(&test, &[ident, truth], Some("identity")).unwrap();
        assert_eq!(r.baseline.as_deref(), Some("identity"));
        let t = &r.variants[1];
        assert_eq!(t.means[&Metric::Mae], 0.0);
        assert!((t.means[&Metric::Ssim] - 1.0).abs() < 1e-12);
        assert_eq!(t.best, Metric::ALL.to_vec());
        assert!(r.variants[0].ttests.is_empty());
        for m in Metric::ALL {
            assert!(t.ttests[&m].p_value < 0.005, "{m:?}");
        }
        let md = r.to_markdown();
        assert!(md.contains("**0.0000**"));
    }

    #[test]
    fn per_image_rows_average_to_the_means() {
        let s = corpus();
        let test: Vec<&Sample> = s.iter().collect();
        let ident = outputs("identity", &test, |s| s.anatomy.clone());
        let r = evaluate_variants(&test, &[ident], None).unwrap();
        assert_eq!(r.baseline, None);
        assert_eq!(r.warnings.len(), 1);
        let row = &r.variants[0];
        let mae: Vec<f64> = row.per_image.iter().map(|x| x.scores.mae).collect();
        assert!((mean(&mae) - row.means[&Metric::Mae]).abs() < 1e-12);
        assert_eq!(row.per_image.len(), 30);
        assert!(!r.to_markdown().contains("p-values"));
    }

    #[test]
    fn errors() {
        let s = corpus();
        let test: Vec<&Sample> = s.iter().collect();
        let short = VariantOutputs {
            name: "x".into(),
            images: vec![s[0].tumour.clone()],
        };
        assert!(evaluate_variants(&test, &[short], None).is_err());
        assert!(evaluate_variants(&test, &[], None).is_err());
        let a = outputs("a", &test, |s| s.anatomy.clone());
        let b = outputs("b", &test, |s| s.tumour.clone());
        assert!(evaluate_variants(&test, &[a, b], Some("c")).is_err());
    }

    #[test]
    fn leakage_is_detected() {
        let s = corpus();
        let split = split_dataset(&s, 0.2, 1).unwrap();
        let held = DatasetSplit::select(&s, &split.test);
        check_held_out(&split, &held).unwrap();
        let trained = DatasetSplit::select(&s, &split.train[..1]);
        assert!(matches!(check_held_out(&split, &trained), Err(Error::Leakage(_))));
        let mut bad = split.clone();
        bad.train.push(bad.test[0].clone());
        assert!(matches!(check_held_out(&bad, &held), Err(Error::Leakage(_))));
    }
}
