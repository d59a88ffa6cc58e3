//! Misalignment diagnostics between classification confidence and
//! localization quality.
//!
//! Every prediction is scored by its maximum class probability (class labels
//! are ignored) and by its best IoU against any ground truth. The
//! best-regressed (BR) sample of a ground truth is the prediction with the
//! highest IoU against it, ties going to the lower index; the
//! high-confidence (HC) set at multiplier `m` is the top `m * N` predictions
//! by confidence, `N` being the number of ground truths.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::scene::{PredictionSet, Scene};

/// Index of the best-IoU prediction for every ground truth.
pub fn best_regressed(preds: &PredictionSet, gts: &Scene) -> Vec<usize> {
    gts.objects
        .iter()
        .map(|g| {
            let mut best = 0;
            let mut best_iou = f64::NEG_INFINITY;
            for (i, p) in preds.preds.iter().enumerate() {
                let u = iou(&p.bbox, &g.bbox);
                if u > best_iou {
                    best = i;
                    best_iou = u;
                }
            }
            best
        })
        .collect()
}

/// Indices of the `n` most confident predictions, ties to the lower index.
pub fn high_confidence(confidences: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// `(hits, |BR|)` for one scene, BR samples counted per ground truth.
fn br_hits(preds: &PredictionSet, gts: &Scene, m: usize) -> Result<(usize, usize)> {
    if gts.is_empty() {
        return Err(Error::EmptyScene);
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let br = best_regressed(preds, gts);
    let hc = high_confidence(&preds.confidences(), m * gts.len());
    let mut in_hc = vec![false; preds.len()];
    for i in hc {
        in_hc[i] = true;
    }
    Ok((br.iter().filter(|&&i| in_hc[i]).count(), br.len()))
}

/// Fraction of BR samples found among the top `m * N` confident predictions.
pub fn br_recall(preds: &PredictionSet, gts: &Scene, m: usize) -> Result<f64> {
    let (hits, total) = br_hits(preds, gts, m)?;
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of per-scene recalls.
    PerScene,
    /// Hits and BR counts summed over scenes before dividing.
    Pooled,
}

pub fn dataset_br_recall(
    items: &[(&PredictionSet, &Scene)],
    m: usize,
    aggregation: Aggregation,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = items
        .iter()
        .map(|(p, g)| br_hits(p, g, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(match aggregation {
        Aggregation::PerScene => {
            hits.iter().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / hits.len() as f64
        }
        Aggregation::Pooled => {
            let (h, n) = hits
                .iter()
                .fold((0, 0), |(h, n), &(dh, dn)| (h + dh, n + dn));
            h as f64 / n as f64
        }
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "{} vs {} samples",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Uniform 1D histogram over `[0, 1]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<u64>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be >= 1".into()));
    }
    let mut counts = vec![0; bins];
    for &v in values {
        counts[bin_of(v, bins)] += 1;
    }
    Ok(counts)
}

/// Confidence-by-IoU 2D histogram; row index is the confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityMap {
    pub bins: usize,
    pub counts: Vec<Vec<u64>>,
}

impl DensityMap {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Density of (confidence, IoU) pairs with confidences rescaled so their
/// maximum is 1.
pub fn density_map(confidences: &[f64], ious: &[f64], bins: usize) -> Result<DensityMap> {
    if bins < 2 {
        return Err(Error::InvalidConfig(
            "density map needs at least 2 bins".into(),
        ));
    }
    if confidences.len() != ious.len() {
        return Err(Error::Shape(format!(
            "{} confidences vs {} IoUs",
            confidences.len(),
            ious.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = confidences
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let mut counts = vec![vec![0; bins]; bins];
    for (&c, &u) in confidences.iter().zip(ious) {
        counts[bin_of(c * scale, bins)][bin_of(u, bins)] += 1;
    }
    Ok(DensityMap { bins, counts })
}

/// Best IoU of each prediction against any ground truth (0 for an empty scene).
pub fn prediction_ious(preds: &PredictionSet, gts: &Scene) -> Vec<f64> {
    preds
        .preds
        .iter()
        .map(|p| {
            gts.objects
                .iter()
                .map(|g| iou(&p.bbox, &g.bbox))
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub br_recall_at: BTreeMap<usize, f64>,
    /// `None` when either side has zero variance.
    pub pearson_r: Option<f64>,
    pub density: DensityMap,
    pub hc_iou_hist: Vec<u64>,
    pub br_iou_hist: Vec<u64>,
}

/// Diagnostics over a collection of scenes with their prediction sets.
///
/// Pearson correlation and the density map pool every prediction of every
/// scene; recall follows `aggregation`.
pub fn alignment_report(
    items: &[(&PredictionSet, &Scene)],
    multipliers: &[usize],
    bins: usize,
    aggregation: Aggregation,
) -> Result<AlignmentReport> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut br_recall_at = BTreeMap::new();
    for &m in multipliers {
        br_recall_at.insert(m, dataset_br_recall(items, m, aggregation)?);
    }

    let (mut confs, mut ious) = (Vec::new(), Vec::new());
    let (mut hc_ious, mut br_ious) = (Vec::new(), Vec::new());
    for (preds, gts) in items {
        let c = preds.confidences();
        let u = prediction_ious(preds, gts);
        for i in high_confidence(&c, gts.len()) {
            hc_ious.push(u[i]);
        }
        for (g, i) in best_regressed(preds, gts).into_iter().enumerate() {
            br_ious.push(iou(&preds.preds[i].bbox, &gts.objects[g].bbox));
        }
        confs.extend(c);
        ious.extend(u);
    }

    let pearson_r = match pearson(&confs, &ious) {
        Ok(r) => Some(r),
        Err(Error::DegenerateVariance) | Err(Error::EmptyInput) => None,
        Err(e) => return Err(e),
    };
    Ok(AlignmentReport {
        br_recall_at,
        pearson_r,
        density: density_map(&confs, &ious, bins)?,
        hc_iou_hist: histogram(&hc_ious, bins)?,
        br_iou_hist: histogram(&br_ious, bins)?,
    })
}
