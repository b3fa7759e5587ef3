//! Training objectives.
//!
//! L1 terms reduce by the mean over pixels within a direction and by the
//! sum across the two directions. All tensor-valued losses stay on the
//! autograd graph; scalar composition is exposed separately for logging.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metgen::Translate;
use crate::segmentor::Segmentor;

/// Probability clip inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Upper bound on the positive-class weight.
pub const MAX_POS_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialObjective {
    #[default]
    LeastSquares,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub adversarial_objective: AdversarialObjective,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 10.0,
            alpha3: 100.0,
            alpha4: 10.0,
            adversarial_objective: AdversarialObjective::LeastSquares,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite non-negative weight, got {a}")));
            }
        }
        Ok(())
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Critic-side loss from raw patch scores of real and generated inputs.
pub fn discriminator_loss(real: &Tensor, fake: &Tensor, objective: AdversarialObjective) -> Result<Tensor> {
    let (r, f) = match objective {
        AdversarialObjective::LeastSquares => ((real - 1.0)?.sqr()?.mean_all()?, fake.sqr()?.mean_all()?),
        AdversarialObjective::CrossEntropy => (softplus(&real.neg()?)?.mean_all()?, softplus(fake)?.mean_all()?),
    };
    Ok(((r + f)? * 0.5)?)
}

/// Generator-side (non-saturating) adversarial loss on the critic's scores
/// of generated inputs.
pub fn generator_adversarial_loss(fake: &Tensor, objective: AdversarialObjective) -> Result<Tensor> {
    Ok(match objective {
        AdversarialObjective::LeastSquares => (fake - 1.0)?.sqr()?.mean_all()?,
        AdversarialObjective::CrossEntropy => softplus(&fake.neg()?)?.mean_all()?,
    })
}

/// The two-domain min-max objective evaluated on critic probabilities:
/// `E[ln D_Y(y)] + E[ln(1 − D_Y(F(x,l)))] + E[ln D_X(x)] + E[ln(1 − D_X(G(y,l)))]`.
pub fn minimax_objective(dy_real: &[f64], dy_fake: &[f64], dx_real: &[f64], dx_fake: &[f64]) -> Result<f64> {
    let log_mean = |p: &[f64], negate: bool| -> Result<f64> {
        if p.is_empty() {
            return Err(Error::shape("empty critic output"));
        }
        let v: Vec<f64> = p
            .iter()
            .map(|&q| if negate { (1.0 - q).ln() } else { q.ln() })
            .collect();
        Ok(crate::metrics::mean(&v))
    };
    Ok(log_mean(dy_real, false)? + log_mean(dy_fake, true)? + log_mean(dx_real, false)? + log_mean(dx_fake, true)?)
}

/// Mean absolute difference over all elements.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("L1 over {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// One minibatch of registered `(x, y, l)` triples. `paired` is false when
/// the anatomy and tumour images are not registered counterparts.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub label: Tensor,
    pub paired: bool,
}

/// Loss split into the anatomy (`x`) and tumour (`y`) directions.
#[derive(Debug, Clone)]
pub struct Directional {
    pub anatomy: Tensor,
    pub tumour: Tensor,
}

impl Directional {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.anatomy + &self.tumour)?)
    }
}

/// `‖G(F(x,l),l) − x‖₁` and `‖F(G(y,l),l) − y‖₁`.
pub fn cycle_loss(f: &dyn Translate, g: &dyn Translate, batch: &Batch) -> Result<Directional> {
    let rec_x = g.translate(&f.translate(&batch.x, &batch.label)?, &batch.label)?;
    let rec_y = f.translate(&g.translate(&batch.y, &batch.label)?, &batch.label)?;
    Ok(Directional {
        anatomy: l1(&rec_x, &batch.x)?,
        tumour: l1(&rec_y, &batch.y)?,
    })
}

/// `‖F(x,l) − y‖₁` and `‖G(y,l) − x‖₁`; needs registered pairs.
pub fn pair_loss(f: &dyn Translate, g: &dyn Translate, batch: &Batch) -> Result<Directional> {
    if !batch.paired {
        return Err(Error::UnpairedBatch);
    }
    Ok(Directional {
        tumour: l1(&f.translate(&batch.x, &batch.label)?, &batch.y)?,
        anatomy: l1(&g.translate(&batch.y, &batch.label)?, &batch.x)?,
    })
}

/// Class-balanced binary cross-entropy between probabilities and a binary
/// target. The positive weight is background/foreground pixel count over
/// the batch, capped at [`MAX_POS_WEIGHT`], and 1 without foreground.
pub fn weighted_bce(prob: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prob.dims() != target.dims() {
        return Err(Error::shape(format!("BCE over {:?} and {:?}", prob.dims(), target.dims())));
    }
    let fg = target.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    let bg = target.elem_count() as f64 - fg;
    let w = if fg > 0.0 { (bg / fg).min(MAX_POS_WEIGHT) } else { 1.0 };
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok(((pos * w)? + neg)?.mean_all()?.neg()?)
}

/// Weighted cross-entropy between the frozen segmentor's reading of a
/// generated image and the imposed label.
pub fn segmentation_loss(seg: &Segmentor, generated: &Tensor, label: &Tensor) -> Result<Tensor> {
    if !seg.is_frozen() {
        return Err(Error::SegmentorNotFrozen);
    }
    weighted_bce(&seg.segment(generated)?, label)
}

/// Scalar components of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_d: f64,
    pub l_cycle: f64,
    pub l_segm: f64,
    pub l_pair: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d: f64,
    pub l_cycle: f64,
    pub l_segm: f64,
    pub l_pair: f64,
    pub l_final: f64,
    /// Per-direction and critic-side sub-terms.
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_d: self.l_d,
            l_cycle: self.l_cycle,
            l_segm: self.l_segm,
            l_pair: self.l_pair,
        }
    }
}

/// Weighted sum of finite components.
pub fn compose_final(c: LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (term, v) in [("l_d", c.l_d), ("l_cycle", c.l_cycle), ("l_segm", c.l_segm), ("l_pair", c.l_pair)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: term.into() });
        }
    }
    Ok(LossReport {
        l_d: c.l_d,
        l_cycle: c.l_cycle,
        l_segm: c.l_segm,
        l_pair: c.l_pair,
        l_final: w.alpha1 * c.l_d + w.alpha2 * c.l_cycle + w.alpha3 * c.l_segm + w.alpha4 * c.l_pair,
        terms: BTreeMap::new(),
    })
}

/// Graph-valued components; absent terms are inactive for the variant.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub l_d: Option<Tensor>,
    pub l_cycle: Option<Tensor>,
    pub l_segm: Option<Tensor>,
    pub l_pair: Option<Tensor>,
}

impl LossTerms {
    /// Weighted sum on the graph. Terms with zero weight are left out of
    /// the graph entirely, so they contribute exactly zero gradient.
    pub fn compose(&self, w: &LossWeights) -> Result<Option<Tensor>> {
        let mut total: Option<Tensor> = None;
        for (alpha, term) in [
            (w.alpha1, &self.l_d),
            (w.alpha2, &self.l_cycle),
            (w.alpha3, &self.l_segm),
            (w.alpha4, &self.l_pair),
        ] {
            let Some(t) = term else { continue };
            if alpha == 0.0 {
                continue;
            }
            let scaled = (t * alpha)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => (acc + scaled)?,
            });
        }
        Ok(total)
    }

    /// Scalar readout, validated and composed; missing terms read as 0.
    pub fn report(&self, w: &LossWeights) -> Result<LossReport> {
        let read = |t: &Option<Tensor>| -> Result<f64> {
            match t {
                None => Ok(0.0),
                Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
            }
        };
        compose_final(
            LossComponents {
                l_d: read(&self.l_d)?,
                l_cycle: read(&self.l_cycle)?,
                l_segm: read(&self.l_segm)?,
                l_pair: read(&self.l_pair)?,
            },
            w,
        )
    }
}
