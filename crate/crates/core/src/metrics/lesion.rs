use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

/// One 8-connected foreground region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    /// Pixels in raster order of discovery.
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// 8-connected components, ordered by their first pixel in raster order.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    label_components(mask).1
}

fn label_components(mask: &Mask) -> (Array2<u32>, Vec<Component>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 || labels[[r, c]] != 0 {
                continue;
            }
            let id = comps.len() as u32 + 1;
            let mut pixels = Vec::new();
            labels[[r, c]] = id;
            queue.push_back((r, c));
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = id;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            comps.push(Component { pixels });
        }
    }
    (labels, comps)
}

/// Criterion for pairing a predicted and a reference lesion. A pair is
/// eligible when the components overlap and their IoU reaches
/// `iou_threshold`; the default accepts any overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchPolicy {
    pub iou_threshold: f64,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self { iou_threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_pred: usize,
    pub n_ref: usize,
    /// `(predicted, reference)` component indices.
    pub pairs: Vec<(usize, usize)>,
    /// IoU of each matched pair.
    pub overlaps: Vec<f64>,
    pub policy: MatchPolicy,
}

/// One-to-one lesion matching.
///
/// Eligible pairs are visited in descending IoU and matched greedily; when
/// a predicted lesion's preferred partner is taken, an augmenting path
/// reassigns earlier matches if that frees a partner. The matched count is
/// therefore the maximum over all one-to-one assignments, and ties in the
/// greedy order resolve by component index.
pub fn match_lesions(pred: &Mask, reference: &Mask, policy: MatchPolicy) -> Result<LesionMatchResult> {
    if pred.dim() != reference.dim() {
        return Err(Error::shape(format!(
            "lesion masks differ in shape: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    let (_, pc) = label_components(pred);
    let (rl, rc) = label_components(reference);
    let mut inter = vec![std::collections::BTreeMap::<usize, usize>::new(); pc.len()];
    for (i, comp) in pc.iter().enumerate() {
        for &(y, x) in &comp.pixels {
            let j = rl[[y, x]];
            if j != 0 {
                *inter[i].entry(j as usize - 1).or_default() += 1;
            }
        }
    }
    // adjacency sorted by descending IoU, ties by reference index
    let mut adj: Vec<Vec<(usize, f64)>> = Vec::with_capacity(pc.len());
    for (i, row) in inter.iter().enumerate() {
        let mut edges: Vec<(usize, f64)> = row
            .iter()
            .map(|(&j, &n)| (j, n as f64 / (pc[i].len() + rc[j].len() - n) as f64))
            .filter(|&(_, iou)| iou >= policy.iou_threshold)
            .collect();
        edges.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        adj.push(edges);
    }
    let mut order: Vec<usize> = (0..pc.len()).collect();
    let best = |i: usize| adj[i].first().map_or(-1.0, |e| e.1);
    order.sort_by(|&a, &b| best(b).total_cmp(&best(a)).then(a.cmp(&b)));

    let mut ref_match: Vec<Option<usize>> = vec![None; rc.len()];
    for &i in &order {
        let mut seen = vec![false; rc.len()];
        augment(i, &adj, &mut ref_match, &mut seen);
    }
    let mut pairs: Vec<(usize, usize)> = ref_match
        .iter()
        .enumerate()
        .filter_map(|(j, m)| m.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    let overlaps = pairs
        .iter()
        .map(|&(i, j)| adj[i].iter().find(|e| e.0 == j).map_or(0.0, |e| e.1))
        .collect();
    let tp = pairs.len();
    Ok(LesionMatchResult {
        tp,
        fp: pc.len() - tp,
        fn_: rc.len() - tp,
        n_pred: pc.len(),
        n_ref: rc.len(),
        pairs,
        overlaps,
        policy,
    })
}

fn augment(i: usize, adj: &[Vec<(usize, f64)>], ref_match: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &(j, _) in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match ref_match[j] {
            None => true,
            Some(k) => augment(k, adj, ref_match, seen),
        };
        if free {
            ref_match[j] = Some(i);
            return true;
        }
    }
    false
}

/// Lesion-wise detection scores, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// Scores from match counts. An image with no lesions on either side
/// scores 1 everywhere; recall without reference lesions is 1 and precision
/// without predictions is 0 unless nothing was missed.
pub fn lesion_scores(m: &LesionMatchResult) -> SegScores {
    let (tp, fp, fn_) = (m.tp as f64, m.fp as f64, m.fn_ as f64);
    let ratio = |num: f64, den: f64, empty: f64| if den == 0.0 { empty } else { num / den };
    SegScores {
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_, 1.0),
        precision: ratio(tp, tp + fp, if m.fn_ == 0 { 1.0 } else { 0.0 }),
        recall: ratio(tp, tp + fn_, 1.0),
        jaccard: ratio(tp, tp + fp + fn_, 1.0),
    }
}

/// Pixel-wise Dice; debugging aid only.
pub fn pixel_dice(pred: &Mask, reference: &Mask) -> Result<f64> {
    if pred.dim() != reference.dim() {
        return Err(Error::shape("pixel Dice on masks of different shapes"));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        inter += usize::from(p != 0 && r != 0);
        total += usize::from(p != 0) + usize::from(r != 0);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(size: usize, rects: &[(usize, usize, usize, usize)]) -> Mask {
        let mut m = Mask::zeros((size, size));
        for &(r, c, h, w) in rects {
            for y in r..r + h {
                for x in c..c + w {
                    m[[y, x]] = 1;
                }
            }
        }
        m
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let mut m = Mask::zeros((4, 4));
        m[[0, 0]] = 1;
        m[[1, 1]] = 1;
        m[[3, 3]] = 1;
        let c = connected_components(&m);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].len(), 2);
    }

    #[test]
    fn identical_masks_match_fully() {
        let m = blobs(16, &[(0, 0, 2, 2), (5, 5, 3, 3), (12, 1, 2, 4)]);
        let r = match_lesions(&m, &m, MatchPolicy::default()).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (3, 0, 0));
        assert!(r.overlaps.iter().all(|&o| o == 1.0));
    }

    #[test]
    fn extra_prediction_is_false_positive() {
        let reference = blobs(16, &[(0, 0, 2, 2), (5, 5, 3, 3)]);
        let pred = blobs(16, &[(0, 0, 2, 2), (5, 5, 3, 3), (12, 12, 2, 2)]);
        let r = match_lesions(&pred, &reference, MatchPolicy::default()).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 0));
    }

    #[test]
    fn augmenting_path_beats_plain_greedy() {
        // predicted A covers reference X mostly and touches Y; predicted B
        // touches only X. Plain greedy would pair A-X and leave B and Y.
        let reference = blobs(12, &[(0, 0, 1, 6), (3, 0, 1, 1)]);
        let mut pred = blobs(12, &[(0, 0, 1, 4)]);
        pred[[1, 0]] = 1;
        pred[[2, 0]] = 1;
        pred[[3, 0]] = 1;
        pred[[0, 5]] = 1;
        let r = match_lesions(&pred, &reference, MatchPolicy::default()).unwrap();
        assert_eq!(r.n_pred, 2);
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
    }

    #[test]
    fn iou_threshold_is_respected() {
        let reference = blobs(10, &[(0, 0, 4, 4)]);
        let pred = blobs(10, &[(0, 0, 1, 4)]);
        let any = match_lesions(&pred, &reference, MatchPolicy::default()).unwrap();
        assert_eq!(any.tp, 1);
        assert!((any.overlaps[0] - 0.25).abs() < 1e-12);
        let strict = match_lesions(&pred, &reference, MatchPolicy { iou_threshold: 0.5 }).unwrap();
        assert_eq!((strict.tp, strict.fp, strict.fn_), (0, 1, 1));
    }

    #[test]
    fn score_formulas() {
        let m = LesionMatchResult {
            tp: 2,
            fp: 1,
            fn_: 1,
            n_pred: 3,
            n_ref: 3,
            pairs: vec![],
            overlaps: vec![],
            policy: MatchPolicy::default(),
        };
        let s = lesion_scores(&m);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.dice - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.jaccard - 0.5).abs() < 1e-15);
        let empty = match_lesions(&Mask::zeros((4, 4)), &Mask::zeros((4, 4)), MatchPolicy::default()).unwrap();
        let s = lesion_scores(&empty);
        assert_eq!((s.dice, s.precision, s.recall, s.jaccard), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn pixel_dice_counts_overlap() {
        let a = blobs(8, &[(0, 0, 2, 2)]);
        let b = blobs(8, &[(0, 0, 2, 1)]);
        assert!((pixel_dice(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> Mask {
        let n = rng.random_range(0..5);
        let mut m = Mask::zeros((size, size));
        for _ in 0..n {
            let (r, c) = (rng.random_range(0..size), rng.random_range(0..size));
            let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
            for y in r..(r + h).min(size) {
                for x in c..(c + w).min(size) {
                    m[[y, x]] = 1;
                }
            }
        }
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn counts_are_conserved(seed in 0u64..10_000, thr in 0.0f64..0.8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_mask(&mut rng, 16);
            let reference = random_mask(&mut rng, 16);
            let m = match_lesions(&pred, &reference, MatchPolicy { iou_threshold: thr }).unwrap();
            prop_assert_eq!(m.tp + m.fn_, connected_components(&reference).len());
            prop_assert_eq!(m.tp + m.fp, connected_components(&pred).len());
            let s = lesion_scores(&m);
            for v in [s.dice, s.precision, s.recall, s.jaccard] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((s.jaccard - s.dice / (2.0 - s.dice)).abs() < 1e-12);
        }

        #[test]
        fn pure_false_positive_never_helps(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_mask(&mut rng, 16);
            let reference = random_mask(&mut rng, 16);
            // isolated blob in a corner region the masks cannot reach
            let mut big_pred = Mask::zeros((20, 20));
            let mut big_ref = Mask::zeros((20, 20));
            big_pred.slice_mut(ndarray::s![..16, ..16]).assign(&pred);
            big_ref.slice_mut(ndarray::s![..16, ..16]).assign(&reference);
            let before = lesion_scores(&match_lesions(&big_pred, &big_ref, MatchPolicy::default()).unwrap());
            big_pred[[19, 19]] = 1;
            let after = lesion_scores(&match_lesions(&big_pred, &big_ref, MatchPolicy::default()).unwrap());
            prop_assert!(after.precision <= before.precision);
            prop_assert!(after.dice <= before.dice);
            prop_assert!(after.jaccard <= before.jaccard);
            prop_assert_eq!(after.recall, before.recall);
        }
    }
}
