//! Detection training criterion: IoU-aware soft-target BCE with prime sample
//! weighting, down-weighted box regression, and the mixed matching schedule
//! over decoder layers. Baseline classification losses share the same
//! machinery through [`Variant`].
//!
//! Every loss is evaluated in two phases. [`build_targets`] freezes the
//! matching, quality targets, ranks and weights at the current predictions;
//! the loss and its analytic gradient are then computed with those targets
//! held constant, so no gradient flows through the matching or through the
//! quality target.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, iou, l1, l1_grad};
use crate::matching::{match_many_to_one, match_one_to_one, Assignment, CostParams, LOG_EPS};
use crate::scene::{sigmoid, PredictionSet, Scene};

/// Rows of the weighting-variant ablation, in the order
/// `(1, 0)`, `(t, 0)`, `((t-s)^2, (t-s)^2)`, `((t-s)^2, (1-t) s^2)`, `(t, 1-t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightingRow {
    PlainCe,
    TargetOnly,
    SquaredGap,
    SquaredGapFocalNeg,
    SoftTarget,
}

impl WeightingRow {
    pub const ALL: [WeightingRow; 5] = [
        WeightingRow::PlainCe,
        WeightingRow::TargetOnly,
        WeightingRow::SquaredGap,
        WeightingRow::SquaredGapFocalNeg,
        WeightingRow::SoftTarget,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|r| *r == self).unwrap() + 1
    }
}

/// Classification loss family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Soft target `w * t` with `t = s^alpha * u^(1 - alpha)`.
    IaBce,
    /// Alpha-balanced focal loss with hard targets.
    Focal,
    /// Quality focal loss, IoU target, `|s - t|^beta` modulation (GFL at 2).
    Qfl { beta: f64 },
    /// Varifocal-style weights `(t * t, t * (1 - t))` with an IoU target.
    Vfl,
    /// Alternative weightings around the IA-BCE quality target.
    Weighting(WeightingRow),
}

impl Variant {
    /// Every variant covered by the gradient suite.
    pub fn all() -> Vec<Variant> {
        let mut v = vec![
            Variant::IaBce,
            Variant::Focal,
            Variant::Qfl { beta: 1.0 },
            Variant::Qfl { beta: 2.0 },
            Variant::Vfl,
        ];
        v.extend(WeightingRow::ALL.iter().map(|r| Variant::Weighting(*r)));
        v
    }

    /// Whether the positive target is built from the quality metric and
    /// therefore subject to prime sample weighting.
    pub fn uses_quality(&self) -> bool {
        matches!(self, Variant::IaBce | Variant::Weighting(_))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::IaBce => write!(f, "ia-bce"),
            Variant::Focal => write!(f, "focal"),
            Variant::Qfl { beta } => write!(f, "qfl:{beta}"),
            Variant::Vfl => write!(f, "vfl"),
            Variant::Weighting(r) => write!(f, "weighting:{}", r.index()),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let unknown = || Error::InvalidConfig(format!("unknown loss variant `{s}`"));
        Ok(match lower.as_str() {
            "ia-bce" | "iabce" | "ia_bce" => Variant::IaBce,
            "focal" => Variant::Focal,
            "gfl" | "qfl" => Variant::Qfl { beta: 2.0 },
            "vfl" => Variant::Vfl,
            other => {
                if let Some(beta) = other.strip_prefix("qfl:") {
                    let beta: f64 = beta.parse().map_err(|_| unknown())?;
                    if !(beta.is_finite() && beta >= 0.0) {
                        return Err(unknown());
                    }
                    Variant::Qfl { beta }
                } else if let Some(row) = other.strip_prefix("weighting:") {
                    let row = row
                        .parse::<usize>()
                        .ok()
                        .and_then(|r| r.checked_sub(1))
                        .and_then(|i| WeightingRow::ALL.get(i))
                        .ok_or_else(unknown)?;
                    Variant::Weighting(*row)
                } else {
                    return Err(unknown());
                }
            }
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriterionConfig {
    /// Exponent of the confidence in the quality metric.
    pub alpha: f64,
    /// Temperature of the rank weights.
    pub tau: f64,
    /// Ground-truth replication count for the intermediate layers.
    pub k: usize,
    /// Background focal exponent.
    pub gamma: f64,
    pub loss_class: f64,
    pub loss_bbox: f64,
    pub loss_giou: f64,
    pub variant: Variant,
    pub prime_weighting: bool,
    /// Class balance of the focal baseline.
    pub focal_alpha: f64,
    pub cost: CostParams,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            tau: 1.5,
            k: 3,
            gamma: 2.0,
            loss_class: 1.0,
            loss_bbox: 5.0,
            loss_giou: 2.0,
            variant: Variant::IaBce,
            prime_weighting: true,
            focal_alpha: 0.25,
            cost: CostParams::default(),
        }
    }
}

impl CriterionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau must be > 0");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return bad("gamma must be >= 0");
        }
        if [self.loss_class, self.loss_bbox, self.loss_giou]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return bad("loss weights must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return bad("focal_alpha must be in [0, 1]");
        }
        self.cost.validate()
    }
}

/// Quality target `t = s^alpha * u^(1 - alpha)`.
pub fn quality(s: f64, u: f64, alpha: f64) -> f64 {
    let s = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
    let u = u.clamp(0.0, 1.0);
    s.powf(alpha) * u.powf(1.0 - alpha)
}

/// Rank of each entry under a descending sort; ties go to the lower index.
pub fn descending_ranks(ts: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| ts[b].total_cmp(&ts[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; ts.len()];
    for (rank, idx) in order.into_iter().enumerate() {
        ranks[idx] = rank;
    }
    ranks
}

/// Prime sample weights `exp(-rank / tau)` for one ground truth's group.
pub fn prime_weights(ts: &[f64], tau: f64) -> Vec<f64> {
    descending_ranks(ts)
        .into_iter()
        .map(|r| (-(r as f64) / tau).exp())
        .collect()
}

/// A matched prediction with its frozen training target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositiveTarget {
    pub pred: usize,
    pub gt: usize,
    pub replica: usize,
    pub class: usize,
    pub iou: f64,
    pub quality: f64,
    pub rank: usize,
    /// Prime sample weight, or 1 when weighting is off or unused.
    pub weight: f64,
}

/// Matching and targets for one layer, frozen for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTargets {
    pub assignment: Assignment,
    pub positives: Vec<PositiveTarget>,
    pub n_gt: usize,
}

impl LayerTargets {
    fn normalizer(&self) -> f64 {
        self.n_gt.max(1) as f64
    }
}

/// Computes IoU, quality, in-group rank and weight for every matched pair.
pub fn build_targets(
    preds: &PredictionSet,
    gts: &Scene,
    assignment: Assignment,
    cfg: &CriterionConfig,
) -> Result<LayerTargets> {
    let mut positives: Vec<PositiveTarget> = assignment
        .pairs
        .iter()
        .map(|p| {
            let g = &gts.objects[p.gt];
            let pred = &preds.preds[p.pred];
            let u = iou(&pred.bbox, &g.bbox);
            let t = quality(pred.score(g.class), u, cfg.alpha);
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidTarget(t));
            }
            Ok(PositiveTarget {
                pred: p.pred,
                gt: p.gt,
                replica: p.replica,
                class: g.class,
                iou: u,
                quality: t,
                rank: 0,
                weight: 1.0,
            })
        })
        .collect::<Result<_>>()?;

    let weighted = cfg.prime_weighting && cfg.variant.uses_quality();
    for gt in 0..gts.len() {
        let members: Vec<usize> = (0..positives.len())
            .filter(|&i| positives[i].gt == gt)
            .collect();
        let ts: Vec<f64> = members.iter().map(|&i| positives[i].quality).collect();
        for (&i, rank) in members.iter().zip(descending_ranks(&ts)) {
            positives[i].rank = rank;
            if weighted {
                positives[i].weight = (-(rank as f64) / cfg.tau).exp();
            }
        }
    }

    Ok(LayerTargets {
        assignment,
        positives,
        n_gt: gts.len(),
    })
}

/// `x^p` and its derivative, with `0^0 = 1`.
fn pow_d(x: f64, p: f64) -> (f64, f64) {
    if p == 0.0 {
        (1.0, 0.0)
    } else if x == 0.0 {
        (0.0, if p == 1.0 { 1.0 } else { 0.0 })
    } else {
        (x.powf(p), p * x.powf(p - 1.0))
    }
}

/// Positive and negative BCE weights of one cell as functions of `s`, with
/// their derivatives in `s`.
#[derive(Debug, Clone, Copy)]
struct CellWeights {
    pos: f64,
    d_pos: f64,
    neg: f64,
    d_neg: f64,
}

impl CellWeights {
    fn constant(pos: f64, neg: f64) -> Self {
        Self {
            pos,
            d_pos: 0.0,
            neg,
            d_neg: 0.0,
        }
    }
}

/// `-pos * ln s - neg * ln(1 - s)` at logit `z`, and its derivative in `z`.
fn weighted_bce(z: f64, w: CellWeights) -> (f64, f64) {
    let s = sigmoid(z);
    let sc = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
    let (ln_s, ln_1s) = (sc.ln(), (1.0 - sc).ln());
    let value = -w.pos * ln_s - w.neg * ln_1s;
    let ds_dz = s * (1.0 - s);
    let grad = (-w.d_pos * ln_s - w.d_neg * ln_1s) * ds_dz - w.pos * (1.0 - s) + w.neg * s;
    (value, grad)
}

fn positive_weights(variant: Variant, s: f64, target: f64, cfg: &CriterionConfig) -> CellWeights {
    match variant {
        Variant::IaBce | Variant::Weighting(WeightingRow::SoftTarget) => {
            CellWeights::constant(target, 1.0 - target)
        }
        Variant::Focal => {
            let (m, dm) = pow_d(1.0 - s, cfg.gamma);
            CellWeights {
                pos: cfg.focal_alpha * m,
                d_pos: -cfg.focal_alpha * dm,
                neg: 0.0,
                d_neg: 0.0,
            }
        }
        Variant::Qfl { beta } => {
            let gap = s - target;
            let (m, dm) = pow_d(gap.abs(), beta);
            let dm = dm * gap.signum();
            CellWeights {
                pos: m * target,
                d_pos: dm * target,
                neg: m * (1.0 - target),
                d_neg: dm * (1.0 - target),
            }
        }
        Variant::Vfl => CellWeights::constant(target * target, target * (1.0 - target)),
        Variant::Weighting(WeightingRow::PlainCe) => CellWeights::constant(1.0, 0.0),
        Variant::Weighting(WeightingRow::TargetOnly) => CellWeights::constant(target, 0.0),
        Variant::Weighting(WeightingRow::SquaredGap) => {
            let gap = target - s;
            CellWeights {
                pos: gap * gap,
                d_pos: -2.0 * gap,
                neg: gap * gap,
                d_neg: -2.0 * gap,
            }
        }
        Variant::Weighting(WeightingRow::SquaredGapFocalNeg) => {
            let gap = target - s;
            CellWeights {
                pos: gap * gap,
                d_pos: -2.0 * gap,
                neg: (1.0 - target) * s * s,
                d_neg: 2.0 * (1.0 - target) * s,
            }
        }
    }
}

fn background_weights(variant: Variant, s: f64, cfg: &CriterionConfig) -> CellWeights {
    let (scale, exponent) = match variant {
        Variant::Focal => (1.0 - cfg.focal_alpha, cfg.gamma),
        Variant::Qfl { beta } => (1.0, beta),
        _ => (1.0, cfg.gamma),
    };
    let (m, dm) = pow_d(s, exponent);
    CellWeights {
        pos: 0.0,
        d_pos: 0.0,
        neg: scale * m,
        d_neg: scale * dm,
    }
}

/// The soft target a variant assigns to a matched cell.
fn positive_target(variant: Variant, p: &PositiveTarget) -> f64 {
    match variant {
        Variant::Focal => 1.0,
        Variant::Qfl { .. } | Variant::Vfl => p.iou,
        Variant::IaBce | Variant::Weighting(_) => p.weight * p.quality,
    }
}

/// Classification terms of one layer, already divided by the GT count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTerms {
    pub pos: f64,
    pub neg: f64,
    /// Derivatives of `pos + neg` with respect to each logit.
    pub grad_logits: Vec<Vec<f64>>,
}

/// Classification loss under an explicit variant.
pub fn comparison_loss(
    preds: &PredictionSet,
    targets: &LayerTargets,
    variant: Variant,
    cfg: &CriterionConfig,
) -> Result<ClassificationTerms> {
    let norm = targets.normalizer();
    let mut positive_class: Vec<Option<(usize, f64)>> = vec![None; preds.len()];
    for p in &targets.positives {
        let t = positive_target(variant, p);
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTarget(t));
        }
        positive_class[p.pred] = Some((p.class, t));
    }

    let (mut pos, mut neg) = (0.0, 0.0);
    let mut grad_logits = Vec::with_capacity(preds.len());
    for (pred, target) in preds.preds.iter().zip(&positive_class) {
        let mut row = Vec::with_capacity(pred.logits.len());
        for (c, &z) in pred.logits.iter().enumerate() {
            let s = sigmoid(z);
            let (value, grad) = match target {
                Some((class, t)) if *class == c => {
                    let (v, g) = weighted_bce(z, positive_weights(variant, s, *t, cfg));
                    pos += v;
                    (v, g)
                }
                _ => {
                    let (v, g) = weighted_bce(z, background_weights(variant, s, cfg));
                    neg += v;
                    (v, g)
                }
            };
            debug_assert!(value.is_finite());
            row.push(grad / norm);
        }
        grad_logits.push(row);
    }
    Ok(ClassificationTerms {
        pos: pos / norm,
        neg: neg / norm,
        grad_logits,
    })
}

/// IoU-aware BCE: soft target `w * t` on matched cells, focal-weighted BCE
/// towards 0 on every other cell.
pub fn ia_bce_loss(
    preds: &PredictionSet,
    targets: &LayerTargets,
    cfg: &CriterionConfig,
) -> Result<ClassificationTerms> {
    comparison_loss(preds, targets, Variant::IaBce, cfg)
}

/// Regression terms of one layer, weighted by the prime weights and divided
/// by the GT count. The loss weights are not applied to `l1` and `giou`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTerms {
    pub l1: f64,
    pub giou: f64,
    /// Derivatives of `loss_bbox * l1 + loss_giou * giou` per box coordinate.
    pub grad_boxes: Vec<[f64; 4]>,
}

impl RegressionTerms {
    pub fn weighted(&self, cfg: &CriterionConfig) -> f64 {
        cfg.loss_bbox * self.l1 + cfg.loss_giou * self.giou
    }
}

pub fn regression_loss(
    preds: &PredictionSet,
    gts: &Scene,
    targets: &LayerTargets,
    cfg: &CriterionConfig,
) -> RegressionTerms {
    let norm = targets.normalizer();
    let mut grad_boxes = vec![[0.0; 4]; preds.len()];
    let (mut l1_sum, mut giou_sum) = (0.0, 0.0);
    for p in &targets.positives {
        let pb = &preds.preds[p.pred].bbox;
        let gb = &gts.objects[p.gt].bbox;
        let (g, dg) = giou_with_grad(pb, gb);
        let dl1 = l1_grad(pb, gb);
        l1_sum += p.weight * l1(pb, gb);
        giou_sum += p.weight * (1.0 - g);
        for i in 0..4 {
            grad_boxes[p.pred][i] +=
                p.weight * (cfg.loss_bbox * dl1[i] - cfg.loss_giou * dg[i]) / norm;
        }
    }
    RegressionTerms {
        l1: l1_sum / norm,
        giou: giou_sum / norm,
        grad_boxes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLoss {
    pub matching: MatchingKind,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub reg_l1: f64,
    pub reg_giou: f64,
    pub total: f64,
    pub positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchingKind {
    OneToOne,
    ManyToOne,
}

/// Gradient of the total loss with respect to one layer's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub logits: Vec<Vec<f64>>,
    /// With respect to `(cx, cy, w, h)`.
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub layers: Vec<LayerLoss>,
    #[serde(skip)]
    pub grads: Vec<LayerGrads>,
}

pub fn layer_loss(
    preds: &PredictionSet,
    gts: &Scene,
    targets: &LayerTargets,
    kind: MatchingKind,
    cfg: &CriterionConfig,
) -> Result<(LayerLoss, LayerGrads)> {
    let cls = comparison_loss(preds, targets, cfg.variant, cfg)?;
    let reg = regression_loss(preds, gts, targets, cfg);
    let total = cfg.loss_class * (cls.pos + cls.neg) + reg.weighted(cfg);
    let logits = cls
        .grad_logits
        .into_iter()
        .map(|row| row.into_iter().map(|g| cfg.loss_class * g).collect())
        .collect();
    Ok((
        LayerLoss {
            matching: kind,
            cls_pos: cls.pos,
            cls_neg: cls.neg,
            reg_l1: reg.l1,
            reg_giou: reg.giou,
            total,
            positives: targets.positives.len(),
        },
        LayerGrads {
            logits,
            boxes: reg.grad_boxes,
        },
    ))
}

/// Matching schedule: many-to-one on every layer but the last.
pub fn matching_kind(layer: usize, n_layers: usize) -> MatchingKind {
    if layer + 1 < n_layers {
        MatchingKind::ManyToOne
    } else {
        MatchingKind::OneToOne
    }
}

/// Matches every layer and freezes its targets.
pub fn plan_targets(
    layers: &[PredictionSet],
    gts: &Scene,
    cfg: &CriterionConfig,
) -> Result<Vec<LayerTargets>> {
    cfg.validate()?;
    if layers.is_empty() {
        return Err(Error::EmptyInput);
    }
    layers
        .iter()
        .enumerate()
        .map(|(l, preds)| {
            let assignment = match matching_kind(l, layers.len()) {
                MatchingKind::ManyToOne => match_many_to_one(preds, gts, &cfg.cost, cfg.k)?,
                MatchingKind::OneToOne => match_one_to_one(preds, gts, &cfg.cost)?,
            };
            build_targets(preds, gts, assignment, cfg)
        })
        .collect()
}

/// Loss and gradients with matching and targets held fixed.
pub fn loss_with_targets(
    layers: &[PredictionSet],
    gts: &Scene,
    targets: &[LayerTargets],
    cfg: &CriterionConfig,
) -> Result<LossReport> {
    if layers.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} layers but {} target sets",
            layers.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut grads = Vec::with_capacity(layers.len());
    for (l, (preds, t)) in layers.iter().zip(targets).enumerate() {
        let (loss, g) = layer_loss(preds, gts, t, matching_kind(l, layers.len()), cfg)?;
        total += loss.total;
        per_layer.push(loss);
        grads.push(g);
    }
    Ok(LossReport {
        total,
        layers: per_layer,
        grads,
    })
}

/// Mixed-matching loss over all decoder layers.
pub fn total_loss(
    layers: &[PredictionSet],
    gts: &Scene,
    cfg: &CriterionConfig,
) -> Result<LossReport> {
    let targets = plan_targets(layers, gts, cfg)?;
    loss_with_targets(layers, gts, &targets, cfg)
}

/// Expected positives per ground truth across `n_layers` layers when every
/// layer has enough predictions.
pub fn positives_per_gt(n_layers: usize, k: usize) -> usize {
    (n_layers - 1) * (k - 1) + n_layers
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::geometry::BBox;
    use crate::scene::{GtObject, Prediction};
    use proptest::prelude::*;

    fn unit_box() -> impl Strategy<Value = BBox> {
        (0.2..0.8f64, 0.2..0.8f64, 0.05..0.4f64, 0.05..0.4f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    fn layer(n: usize) -> impl Strategy<Value = PredictionSet> {
        proptest::collection::vec((proptest::collection::vec(-4.0..4.0f64, 2), unit_box()), n)
            .prop_map(|ps| {
                PredictionSet::new(
                    2,
                    ps.into_iter().map(|(l, b)| Prediction::new(l, b)).collect(),
                )
                .unwrap()
            })
    }

    /// `(layers, scene, k)` with every layer large enough for `k`.
    fn problem() -> impl Strategy<Value = (Vec<PredictionSet>, Scene, usize)> {
        (1..=3usize, 1..=3usize, 1..=4usize).prop_flat_map(|(n_gt, k, n_layers)| {
            let gts = proptest::collection::vec((0..2usize, unit_box()), n_gt);
            let layers = proptest::collection::vec(layer(n_gt * k + 2), n_layers);
            (layers, gts, Just(k)).prop_map(|(layers, gts, k)| {
                let objects = gts
                    .into_iter()
                    .map(|(class, bbox)| GtObject { class, bbox })
                    .collect();
                (layers, Scene::new(2, objects).unwrap(), k)
            })
        })
    }

    proptest! {
        #[test]
        fn quality_bounded_and_monotone(s in 0.0..1.0f64, u in 0.0..1.0f64, alpha in 0.0..1.0f64, d in 0.0..0.1f64) {
            let t = quality(s, u, alpha);
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert!(quality((s + d).min(1.0), u, alpha) >= t - 1e-15);
            prop_assert!(quality(s, (u + d).min(1.0), alpha) >= t - 1e-15);
        }

        #[test]
        fn prime_weights_follow_quality(ts in proptest::collection::vec(0.0..1.0f64, 1..8), tau in 0.1..10.0f64) {
            let w = prime_weights(&ts, tau);
            prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
            prop_assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 1);
            for i in 0..ts.len() {
                for j in 0..ts.len() {
                    if ts[i] > ts[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }

        #[test]
        fn positive_count_bookkeeping((layers, gts, k) in problem()) {
            let cfg = CriterionConfig { k, ..Default::default() };
            let targets = plan_targets(&layers, &gts, &cfg).unwrap();
            for g in 0..gts.len() {
                let n: usize = targets
                    .iter()
                    .map(|t| t.positives.iter().filter(|p| p.gt == g).count())
                    .sum();
                prop_assert_eq!(n, positives_per_gt(layers.len(), k));
            }
        }

        #[test]
        fn every_variant_is_finite_and_nonnegative((layers, gts, k) in problem()) {
            for variant in Variant::all() {
                let cfg = CriterionConfig { k, variant, ..Default::default() };
                let r = total_loss(&layers, &gts, &cfg).unwrap();
                prop_assert!(r.total.is_finite() && r.total >= 0.0, "{variant}: {}", r.total);
                for l in &r.layers {
                    prop_assert!(l.cls_pos >= 0.0 && l.cls_neg >= 0.0);
                }
            }
        }

        #[test]
        fn k1_is_tau_independent((layers, gts, _k) in problem(), tau in 0.1..100.0f64) {
            let base = CriterionConfig { k: 1, ..Default::default() };
            let other = CriterionConfig { tau, ..base.clone() };
            prop_assert_eq!(
                total_loss(&layers, &gts, &base).unwrap().total,
                total_loss(&layers, &gts, &other).unwrap().total
            );
        }

        #[test]
        fn focal_ignores_quality_alpha((layers, gts, k) in problem(), alpha in 0.0..1.0f64) {
            let base = CriterionConfig { k, variant: Variant::Focal, ..Default::default() };
            let other = CriterionConfig { alpha, ..base.clone() };
            prop_assert_eq!(
                total_loss(&layers, &gts, &base).unwrap().total,
                total_loss(&layers, &gts, &other).unwrap().total
            );
        }
    }
}
