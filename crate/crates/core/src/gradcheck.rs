//! Central finite-difference check of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::criterion::{loss_with_targets, plan_targets, CriterionConfig, LayerTargets};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::{Prediction, PredictionSet, Scene};
use crate::toytrain::{generate_scene, SceneSpec};

/// Finite-difference step on logits.
pub const LOGIT_STEP: f64 = 1e-5;
/// Finite-difference step on box coordinates.
pub const BOX_STEP: f64 = 1e-6;
/// Denominator floor of the relative error; gradients smaller than this are
/// compared absolutely at `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x0`, using a
/// per-coordinate step.
pub fn gradcheck(
    f: impl Fn(&[f64]) -> Result<f64>,
    x0: &[f64],
    analytic: &[f64],
    steps: &[f64],
    tol: f64,
) -> Result<GradcheckReport> {
    if x0.len() != analytic.len() || x0.len() != steps.len() {
        return Err(Error::Shape("gradcheck vectors differ in length".into()));
    }
    let mut report = GradcheckReport {
        n_params: x0.len(),
        max_rel_err: 0.0,
        worst_param: 0,
        analytic: 0.0,
        numeric: 0.0,
        pass: true,
    };
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        let h = steps[i];
        x[i] = x0[i] + h;
        let plus = f(&x)?;
        x[i] = x0[i] - h;
        let minus = f(&x)?;
        x[i] = x0[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite {
                what: "loss at probe point",
                step: i,
            });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || i == 0 {
            report.max_rel_err = err;
            report.worst_param = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Smallest box distance to a kink of L1 or GIoU.
pub const KINK_MARGIN: f64 = 1e-5;

/// Distance from `a` to the nearest nonsmooth point of `l1(a, b)` and
/// `giou(a, b)`: equal coordinates, or coinciding edges on either axis.
pub fn kink_distance(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let mut d: f64 = a
        .to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .fold(f64::INFINITY, f64::min);
    for (ea, eb) in [
        ([ca.x1, ca.x2], [cb.x1, cb.x2]),
        ([ca.y1, ca.y2], [cb.y1, cb.y2]),
    ] {
        for x in ea {
            for y in eb {
                d = d.min((x - y).abs());
            }
        }
    }
    d
}

/// A seeded gradient-check problem: a generated scene and `n_layers` random
/// prediction sets, half of the boxes jittered around ground truths. Boxes
/// closer than [`KINK_MARGIN`] to a kink are redrawn.
pub fn random_case(
    seed: u64,
    n_layers: usize,
    n_queries: usize,
    n_classes: usize,
    n_gt: usize,
) -> Result<(Vec<PredictionSet>, Scene)> {
    let scene = generate_scene(&SceneSpec {
        n_gt,
        n_classes,
        seed,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut preds = Vec::with_capacity(n_queries);
        for _ in 0..n_queries {
            let logits = (0..n_classes)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let bbox = loop {
                let b = if rng.random_bool(0.5) {
                    let g = scene.objects[rng.random_range(0..scene.len())].bbox;
                    BBox::new(
                        (g.cx() + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
                        (g.cy() + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
                        (g.w() * rng.random_range(0.7..1.3)).min(1.0),
                        (g.h() * rng.random_range(0.7..1.3)).min(1.0),
                    )?
                } else {
                    BBox::new(
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.05..0.5),
                        rng.random_range(0.05..0.5),
                    )?
                };
                if scene
                    .objects
                    .iter()
                    .all(|o| kink_distance(&b, &o.bbox) > KINK_MARGIN)
                {
                    break b;
                }
            };
            preds.push(Prediction::new(logits, bbox));
        }
        layers.push(PredictionSet::new(n_classes, preds)?);
    }
    Ok((layers, scene))
}

/// Flattens layers as `[layer][query][logits.., cx, cy, w, h]`.
pub fn flatten(layers: &[PredictionSet]) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::new();
    let mut steps = Vec::new();
    for set in layers {
        for p in &set.preds {
            x.extend_from_slice(&p.logits);
            steps.extend(std::iter::repeat_n(LOGIT_STEP, p.logits.len()));
            x.extend_from_slice(&p.bbox.to_array());
            steps.extend([BOX_STEP; 4]);
        }
    }
    (x, steps)
}

/// Writes a flat parameter vector back into layers shaped like `like`.
pub fn unflatten(like: &[PredictionSet], x: &[f64]) -> Result<Vec<PredictionSet>> {
    let mut out = like.to_vec();
    let mut pos = 0;
    for set in &mut out {
        for p in &mut set.preds {
            let n = p.logits.len();
            p.logits.copy_from_slice(&x[pos..pos + n]);
            pos += n;
            p.bbox = BBox::from_array([x[pos], x[pos + 1], x[pos + 2], x[pos + 3]])?;
            pos += 4;
        }
    }
    Ok(out)
}

fn flatten_grads(report: &crate::criterion::LossReport) -> Vec<f64> {
    let mut g = Vec::new();
    for layer in &report.grads {
        for (logits, bbox) in layer.logits.iter().zip(&layer.boxes) {
            g.extend_from_slice(logits);
            g.extend_from_slice(bbox);
        }
    }
    g
}

/// Checks the full multi-layer criterion at `layers`, with matching and
/// quality targets frozen at that point.
pub fn check_criterion(
    layers: &[PredictionSet],
    gts: &Scene,
    cfg: &CriterionConfig,
    tol: f64,
) -> Result<GradcheckReport> {
    let targets: Vec<LayerTargets> = plan_targets(layers, gts, cfg)?;
    let report = loss_with_targets(layers, gts, &targets, cfg)?;
    let analytic = flatten_grads(&report);
    let (x0, steps) = flatten(layers);
    gradcheck(
        |x| {
            let probe = unflatten(layers, x)?;
            Ok(loss_with_targets(&probe, gts, &targets, cfg)?.total)
        },
        &x0,
        &analytic,
        &steps,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let f = |x: &[f64]| Ok(x[0] * x[0] + 3.0 * x[0] * x[1]);
        let x0 = [1.5, -2.0];
        let analytic = [2.0 * 1.5 + 3.0 * -2.0, 3.0 * 1.5];
        let r = gradcheck(f, &x0, &analytic, &[1e-5, 1e-5], 1e-8).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| Ok(x[0].sin());
        let r = gradcheck(f, &[0.3], &[0.3f64.cos() * 1.01], &[1e-5], 1e-4).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn random_cases_pass_for_every_variant() {
        for seed in 0..3 {
            let (layers, scene) = random_case(seed, 3, 6, 3, 2).unwrap();
            for variant in crate::criterion::Variant::all() {
                let cfg = CriterionConfig {
                    variant,
                    k: 2,
                    ..Default::default()
                };
                let r = check_criterion(&layers, &scene, &cfg, 1e-4).unwrap();
                assert!(r.pass, "{variant} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn kink_distance_sees_shared_edges() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = BBox::new(0.7, 0.45, 0.2, 0.3).unwrap();
        assert!(kink_distance(&a, &b) < 1e-12);
        let c = BBox::new(0.31, 0.52, 0.23, 0.17).unwrap();
        assert!(kink_distance(&a, &c) > 1e-3);
    }

    #[test]
    fn non_finite_probe() {
        let f = |x: &[f64]| Ok(x[0].ln());
        assert!(matches!(
            gradcheck(f, &[0.0], &[1.0], &[1e-5], 1e-4),
            Err(Error::NonFinite { .. })
        ));
    }
}
