//! Desk-scale direct set prediction.
//!
//! The learnable state is one bank of per-query class logits and
//! unconstrained box parameters per decoder layer; boxes are obtained by a
//! logistic squash of the box parameters. Training minimizes the mixed
//! matching criterion with matching recomputed at every step and Adam
//! updates driven by the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criterion::{loss_with_targets, plan_targets, CriterionConfig};
use crate::diagnostics::{br_recall, pearson, prediction_ious};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, MIN_EXTENT};
use crate::scene::{sigmoid, GtObject, Prediction, PredictionSet, Scene};

/// Largest pairwise IoU between generated ground truths.
pub const MAX_GT_OVERLAP: f64 = 0.7;
pub const RESAMPLE_BUDGET: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub n_gt: usize,
    pub n_classes: usize,
    pub center_range: [f64; 2],
    pub size_range: [f64; 2],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_gt: 3,
            n_classes: 5,
            center_range: [0.15, 0.85],
            size_range: [0.1, 0.4],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(1..=8).contains(&self.n_gt) {
            return bad("n_gt must be in [1, 8]");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1");
        }
        let [c0, c1] = self.center_range;
        let [s0, s1] = self.size_range;
        if !(0.0 <= c0 && c0 <= c1 && c1 <= 1.0) {
            return bad("center_range must be an ordered sub-range of [0, 1]");
        }
        if !(MIN_EXTENT <= s0 && s0 <= s1 && s1 <= 1.0) {
            return bad("size_range must be an ordered sub-range of (0, 1]");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Samples a scene; boxes overlapping an earlier one above
/// [`MAX_GT_OVERLAP`] are redrawn.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut objects: Vec<GtObject> = Vec::with_capacity(spec.n_gt);
    let mut tries = 0;
    while objects.len() < spec.n_gt {
        if tries == RESAMPLE_BUDGET {
            return Err(Error::ResamplingExhausted { tries });
        }
        tries += 1;
        let bbox = BBox::new(
            uniform(&mut rng, spec.center_range),
            uniform(&mut rng, spec.center_range),
            uniform(&mut rng, spec.size_range),
            uniform(&mut rng, spec.size_range),
        )?;
        let class = rng.random_range(0..spec.n_classes);
        if objects
            .iter()
            .all(|o| iou(&o.bbox, &bbox) <= MAX_GT_OVERLAP)
        {
            objects.push(GtObject { class, bbox });
        }
    }
    Scene::new(spec.n_classes, objects)
}

/// One scene per run: run `i` uses seed `seed + i` and cycles `n_gt` through
/// the inclusive range `n_gt`.
pub fn seeded_runs(
    template: &SceneSpec,
    n_gt: [usize; 2],
    runs: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    let [lo, hi] = n_gt;
    if lo == 0 || hi < lo {
        return Err(Error::InvalidConfig(
            "n_gt range must be ordered and start at >= 1".into(),
        ));
    }
    (0..runs)
        .map(|i| {
            generate_scene(&SceneSpec {
                n_gt: lo + i % (hi - lo + 1),
                seed: seed.wrapping_add(i as u64),
                ..template.clone()
            })
        })
        .collect()
}

/// How the per-layer banks combine into layer outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// Every layer owns its outputs outright.
    Independent,
    /// Layer `l` outputs the sum of banks `0..=l`, so later layers refine
    /// earlier ones.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_queries: usize,
    pub layers: usize,
    pub steps: usize,
    pub lr_logits: f64,
    pub lr_boxes: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub parameterization: Parameterization,
    pub criterion: CriterionConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_queries: 20,
            layers: 3,
            steps: 2000,
            lr_logits: 0.05,
            lr_boxes: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            parameterization: Parameterization::Independent,
            criterion: CriterionConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate_for(&self, scene: &Scene) -> Result<()> {
        self.criterion.validate()?;
        if self.layers == 0 || self.n_queries == 0 {
            return Err(Error::InvalidConfig(
                "layers and n_queries must be >= 1".into(),
            ));
        }
        if self.layers > 1 && self.n_queries < self.criterion.k * scene.len() {
            return Err(Error::InfeasibleReplication {
                k: self.criterion.k,
                n_gt: scene.len(),
                n_pred: self.n_queries,
            });
        }
        if scene.is_empty() {
            return Err(Error::EmptyScene);
        }
        Ok(())
    }
}

/// One optimization step, evaluated before the parameter update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub reg_l1: f64,
    pub reg_giou: f64,
    /// Loss of the one-to-one output layer alone.
    pub last_layer: f64,
    pub pearson: Option<f64>,
    pub br_recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub final_layers: Vec<PredictionSet>,
}

impl TrainTrace {
    pub fn final_layer(&self) -> &PredictionSet {
        self.final_layers.last().expect("at least one layer")
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr[i] * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Flat parameter layout: `[bank][query][logits.., box params (4)]`.
struct Model {
    layers: usize,
    queries: usize,
    classes: usize,
    params: Vec<f64>,
    param: Parameterization,
}

impl Model {
    fn stride(&self) -> usize {
        self.classes + 4
    }

    fn bank_len(&self) -> usize {
        self.queries * self.stride()
    }

    fn init(cfg: &TrainConfig, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let logit_init = Normal::new(-2.0, 0.1).expect("valid normal");
        let box_init = Normal::new(0.0, 0.5).expect("valid normal");
        let stride = classes + 4;
        let mut params = vec![0.0; cfg.layers * cfg.n_queries * stride];
        let init_banks = match cfg.parameterization {
            Parameterization::Independent => cfg.layers,
            Parameterization::Residual => 1,
        };
        for q in params[..init_banks * cfg.n_queries * stride].chunks_mut(stride) {
            for z in &mut q[..classes] {
                *z = logit_init.sample(&mut rng);
            }
            for b in &mut q[classes..] {
                *b = box_init.sample(&mut rng);
            }
        }
        Self {
            layers: cfg.layers,
            queries: cfg.n_queries,
            classes,
            params,
            param: cfg.parameterization,
        }
    }

    /// Effective pre-activation outputs per layer.
    fn outputs(&self) -> Vec<Vec<f64>> {
        let n = self.bank_len();
        let banks: Vec<&[f64]> = self.params.chunks(n).collect();
        match self.param {
            Parameterization::Independent => banks.iter().map(|b| b.to_vec()).collect(),
            Parameterization::Residual => {
                let mut acc = vec![0.0; n];
                banks
                    .iter()
                    .map(|b| {
                        for (a, x) in acc.iter_mut().zip(b.iter()) {
                            *a += x;
                        }
                        acc.clone()
                    })
                    .collect()
            }
        }
    }

    fn prediction_sets(&self, outputs: &[Vec<f64>]) -> Result<Vec<PredictionSet>> {
        outputs
            .iter()
            .map(|out| {
                let preds = out
                    .chunks(self.stride())
                    .map(|q| {
                        let b: [f64; 4] =
                            std::array::from_fn(|i| sigmoid(q[self.classes + i]).max(MIN_EXTENT));
                        Ok(Prediction::new(
                            q[..self.classes].to_vec(),
                            BBox::from_array(b)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                PredictionSet::new(self.classes, preds)
            })
            .collect()
    }

    /// Chains output gradients back to the banks.
    fn backward(
        &self,
        outputs: &[Vec<f64>],
        report_grads: &[crate::criterion::LayerGrads],
    ) -> Vec<f64> {
        let stride = self.stride();
        let out_grads: Vec<Vec<f64>> = outputs
            .iter()
            .zip(report_grads)
            .map(|(out, g)| {
                let mut flat = vec![0.0; out.len()];
                for (q, chunk) in flat.chunks_mut(stride).enumerate() {
                    chunk[..self.classes].copy_from_slice(&g.logits[q]);
                    for i in 0..4 {
                        let s = sigmoid(out[q * stride + self.classes + i]);
                        chunk[self.classes + i] = g.boxes[q][i] * s * (1.0 - s);
                    }
                }
                flat
            })
            .collect();
        match self.param {
            Parameterization::Independent => out_grads.concat(),
            Parameterization::Residual => {
                // Bank j feeds every layer l >= j.
                let n = self.bank_len();
                let mut grads = vec![0.0; self.layers * n];
                let mut suffix = vec![0.0; n];
                for l in (0..self.layers).rev() {
                    for (s, g) in suffix.iter_mut().zip(&out_grads[l]) {
                        *s += g;
                    }
                    grads[l * n..(l + 1) * n].copy_from_slice(&suffix);
                }
                grads
            }
        }
    }

    fn learning_rates(&self, cfg: &TrainConfig) -> Vec<f64> {
        (0..self.params.len())
            .map(|i| {
                if i % self.stride() < self.classes {
                    cfg.lr_logits
                } else {
                    cfg.lr_boxes
                }
            })
            .collect()
    }
}

/// Trains one set of query banks on a list of scenes.
///
/// The queries carry no scene input, so the same predictions face every
/// scene; the objective is the mean criterion over scenes. Alignment
/// statistics are taken on the output layer, with Pearson correlation
/// pooled over all (scene, query) pairs and recall averaged over scenes.
pub fn train(scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainTrace> {
    let Some(first) = scenes.first() else {
        return Err(Error::EmptyInput);
    };
    for scene in scenes {
        cfg.validate_for(scene)?;
        if scene.classes != first.classes {
            return Err(Error::Shape("scenes disagree on the class count".into()));
        }
    }
    let mut model = Model::init(cfg, first.classes);
    let lrs = model.learning_rates(cfg);
    let mut adam = Adam::new(model.params.len());
    let mut records = Vec::with_capacity(cfg.steps);
    let inv = 1.0 / scenes.len() as f64;

    for step in 0..cfg.steps {
        let outputs = model.outputs();
        let layers = model.prediction_sets(&outputs)?;
        let mut record = StepRecord {
            step,
            total: 0.0,
            cls_pos: 0.0,
            cls_neg: 0.0,
            reg_l1: 0.0,
            reg_giou: 0.0,
            last_layer: 0.0,
            pearson: None,
            br_recall: 0.0,
        };
        let mut grads = vec![0.0; model.params.len()];
        for scene in scenes {
            let targets = plan_targets(&layers, scene, &cfg.criterion)?;
            let report = loss_with_targets(&layers, scene, &targets, &cfg.criterion)?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite { what: "loss", step });
            }
            record.total += inv * report.total;
            for l in &report.layers {
                record.cls_pos += inv * l.cls_pos;
                record.cls_neg += inv * l.cls_neg;
                record.reg_l1 += inv * l.reg_l1;
                record.reg_giou += inv * l.reg_giou;
            }
            record.last_layer += inv * report.layers.last().expect("at least one layer").total;
            for (g, d) in grads
                .iter_mut()
                .zip(model.backward(&outputs, &report.grads))
            {
                *g += inv * d;
            }
        }
        let last = layers.last().expect("at least one layer");
        record.pearson = pooled_pearson(last, scenes);
        record.br_recall = mean_br_recall(last, scenes)?;
        records.push(record);

        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                step,
            });
        }
        adam.step(&mut model.params, &grads, &lrs, cfg);
    }

    let final_layers = model.prediction_sets(&model.outputs())?;
    Ok(TrainTrace {
        records,
        final_layers,
    })
}

/// Pearson correlation of confidence and best IoU, pooled over scenes.
pub fn pooled_pearson(preds: &PredictionSet, scenes: &[Scene]) -> Option<f64> {
    let conf = preds.confidences();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for scene in scenes {
        xs.extend_from_slice(&conf);
        ys.extend(prediction_ious(preds, scene));
    }
    pearson(&xs, &ys).ok()
}

/// BR recall at `m = 1`, averaged over scenes.
pub fn mean_br_recall(preds: &PredictionSet, scenes: &[Scene]) -> Result<f64> {
    let mut sum = 0.0;
    for scene in scenes {
        sum += br_recall(preds, scene, 1)?;
    }
    Ok(sum / scenes.len() as f64)
}

/// One arm of a comparison: a named training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmScene {
    pub scene: usize,
    pub final_loss: f64,
    pub final_last_layer: f64,
    pub pearson: Option<f64>,
    pub br_recall: f64,
    /// `None` when the threshold is never reached.
    pub steps_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub runs: Vec<ArmScene>,
    pub mean_final_loss: f64,
    pub mean_pearson: f64,
    pub se_pearson: f64,
    pub mean_br_recall: f64,
    pub se_br_recall: f64,
    /// Unreached thresholds count as `steps`.
    pub median_steps_to_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub threshold_factor: f64,
    pub arms: Vec<ArmSummary>,
    #[serde(skip)]
    pub traces: Vec<Vec<TrainTrace>>,
}

/// Steps-to-threshold compares this factor times the best value any arm
/// reached on the same scene.
pub const THRESHOLD_FACTOR: f64 = 1.25;

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every arm on every scene and summarizes alignment and speed.
///
/// Runs execute in parallel; results are collected in (arm, scene) order, so
/// the output does not depend on scheduling.
pub fn compare_variants(datasets: &[Vec<Scene>], arms: &[Arm]) -> Result<Comparison> {
    let scenes = datasets;
    if scenes.is_empty() || arms.is_empty() {
        return Err(Error::EmptyInput);
    }
    let jobs: Vec<(usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..scenes.len()).map(move |s| (a, s)))
        .collect();
    let flat: Vec<TrainTrace> = jobs
        .par_iter()
        .map(|&(a, s)| train(&scenes[s], &arms[a].config))
        .collect::<Result<_>>()?;
    let mut traces: Vec<Vec<TrainTrace>> = Vec::with_capacity(arms.len());
    let mut it = flat.into_iter();
    for _ in arms {
        traces.push(it.by_ref().take(scenes.len()).collect());
    }

    // Best last-layer loss of any arm, per scene.
    let best: Vec<f64> = (0..scenes.len())
        .map(|s| {
            traces
                .iter()
                .flat_map(|arm| arm[s].records.iter().map(|r| r.last_layer))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let mut summaries = Vec::with_capacity(arms.len());
    for (arm, arm_traces) in arms.iter().zip(&traces) {
        let runs: Vec<ArmScene> = arm_traces
            .iter()
            .enumerate()
            .map(|(s, trace)| {
                let last = trace.final_layer();
                let threshold = THRESHOLD_FACTOR * best[s];
                Ok(ArmScene {
                    scene: s,
                    final_loss: trace.records.last().map_or(f64::NAN, |r| r.total),
                    final_last_layer: trace.records.last().map_or(f64::NAN, |r| r.last_layer),
                    pearson: pooled_pearson(last, &scenes[s]),
                    br_recall: mean_br_recall(last, &scenes[s])?,
                    steps_to_threshold: trace
                        .records
                        .iter()
                        .find(|r| r.last_layer <= threshold)
                        .map(|r| r.step),
                })
            })
            .collect::<Result<_>>()?;
        let pearsons: Vec<f64> = runs.iter().map(|r| r.pearson.unwrap_or(0.0)).collect();
        let recalls: Vec<f64> = runs.iter().map(|r| r.br_recall).collect();
        let steps: Vec<f64> = runs
            .iter()
            .map(|r| r.steps_to_threshold.unwrap_or(arm.config.steps) as f64)
            .collect();
        let (mean_pearson, se_pearson) = mean_and_se(&pearsons);
        let (mean_br_recall, se_br_recall) = mean_and_se(&recalls);
        summaries.push(ArmSummary {
            name: arm.name.clone(),
            mean_final_loss: mean_and_se(&runs.iter().map(|r| r.final_loss).collect::<Vec<_>>()).0,
            mean_pearson,
            se_pearson,
            mean_br_recall,
            se_br_recall,
            median_steps_to_threshold: median(&steps),
            runs,
        });
    }
    Ok(Comparison {
        threshold_factor: THRESHOLD_FACTOR,
        arms: summaries,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_generation_is_deterministic() {
        let spec = SceneSpec {
            seed: 17,
            n_gt: 5,
            ..Default::default()
        };
        assert_eq!(
            generate_scene(&spec).unwrap(),
            generate_scene(&spec).unwrap()
        );
    }

    #[test]
    fn single_gt_scene_in_bounds() {
        let spec = SceneSpec {
            n_gt: 1,
            ..Default::default()
        };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.len(), 1);
        let b = s.objects[0].bbox;
        assert!((0.15..=0.85).contains(&b.cx()) && (0.1..=0.4).contains(&b.w()));
    }

    #[test]
    fn resampling_budget() {
        let spec = SceneSpec {
            n_gt: 2,
            center_range: [0.5, 0.5],
            size_range: [0.3, 0.3],
            ..Default::default()
        };
        assert_eq!(
            generate_scene(&spec),
            Err(Error::ResamplingExhausted {
                tries: RESAMPLE_BUDGET
            })
        );
    }

    #[test]
    fn zero_steps_gives_initial_state() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let trace = train(std::slice::from_ref(&scene), &cfg).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.final_layers.len(), 3);
        assert!(trace.final_layer().confidences().iter().all(|&c| c < 0.2));
    }

    #[test]
    fn infeasible_queries_rejected() {
        let scene = generate_scene(&SceneSpec {
            n_gt: 8,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            train(&[scene], &TrainConfig::default()),
            Err(Error::InfeasibleReplication { .. })
        ));
    }

    #[test]
    fn residual_backward_sums_later_layers() {
        let cfg = TrainConfig {
            n_queries: 1,
            layers: 3,
            parameterization: Parameterization::Residual,
            ..Default::default()
        };
        let model = Model::init(&cfg, 1);
        let outputs = model.outputs();
        let grads: Vec<_> = (0..3)
            .map(|l| crate::criterion::LayerGrads {
                logits: vec![vec![(l + 1) as f64]],
                boxes: vec![[0.0; 4]],
            })
            .collect();
        let g = model.backward(&outputs, &grads);
        assert_eq!([g[0], g[5], g[10]], [6.0, 5.0, 3.0]);
    }

    #[test]
    fn seeded_runs_cycle_sizes() {
        let scenes = seeded_runs(&SceneSpec::default(), [1, 3], 5, 40).unwrap();
        let sizes: Vec<usize> = scenes.iter().map(Scene::len).collect();
        assert_eq!(sizes, [1, 2, 3, 1, 2]);
        assert_ne!(scenes[0], scenes[3]);
        assert!(seeded_runs(&SceneSpec::default(), [3, 2], 1, 0).is_err());
    }

    #[test]
    fn statistics_helpers() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
