//! Experiment configuration files for `train` and `compare`.

use align_criterion::toytrain::{Arm, Parameterization, SceneSpec, TrainConfig};
use align_criterion::{CriterionConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// Inclusive range; run `i` gets `lo + i mod (hi - lo + 1)` objects.
    pub n_gt_range: [usize; 2],
    pub n_classes: usize,
    pub center_range: [f64; 2],
    pub size_range: [f64; 2],
}

impl Default for SceneSection {
    fn default() -> Self {
        let spec = SceneSpec::default();
        Self {
            n_gt_range: [1, 6],
            n_classes: spec.n_classes,
            center_range: spec.center_range,
            size_range: spec.size_range,
        }
    }
}

impl SceneSection {
    pub fn template(&self) -> SceneSpec {
        SceneSpec {
            n_classes: self.n_classes,
            center_range: self.center_range,
            size_range: self.size_range,
            ..Default::default()
        }
    }
}

/// Optimizer and model shape; the criterion and seed are set elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n_queries: usize,
    pub layers: usize,
    pub steps: usize,
    pub lr_logits: f64,
    pub lr_boxes: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub parameterization: Parameterization,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            n_queries: t.n_queries,
            layers: t.layers,
            steps: t.steps,
            lr_logits: t.lr_logits,
            lr_boxes: t.lr_boxes,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            parameterization: t.parameterization,
        }
    }
}

impl TrainSection {
    pub fn config(&self, criterion: CriterionConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            n_queries: self.n_queries,
            layers: self.layers,
            steps: self.steps,
            lr_logits: self.lr_logits,
            lr_boxes: self.lr_boxes,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            parameterization: self.parameterization,
            criterion,
            seed,
        }
    }
}

/// An extra named arm with its own complete criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    pub name: String,
    pub criterion: CriterionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneSection,
    pub train: TrainSection,
    /// Base criterion; `train` uses it as is and `compare` swaps in each
    /// listed variant.
    pub criterion: CriterionConfig,
    pub variants: Vec<Variant>,
    pub arms: Vec<ArmSection>,
    pub runs: usize,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneSection::default(),
            train: TrainSection::default(),
            criterion: CriterionConfig::default(),
            variants: vec![Variant::IaBce, Variant::Focal],
            arms: Vec::new(),
            runs: 20,
            output_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    /// Arms for `compare`: one per listed variant, then the explicit arms.
    pub fn compare_arms(&self, seed: u64) -> Result<Vec<Arm>, String> {
        let arms: Vec<Arm> = self
            .variants
            .iter()
            .map(|&variant| Arm {
                name: variant.to_string(),
                config: self.train.config(
                    CriterionConfig {
                        variant,
                        ..self.criterion.clone()
                    },
                    seed,
                ),
            })
            .chain(self.arms.iter().map(|a| Arm {
                name: a.name.clone(),
                config: self.train.config(a.criterion.clone(), seed),
            }))
            .collect();
        if arms.is_empty() {
            return Err("compare needs at least one variant or arm".into());
        }
        let mut names: Vec<String> = arms.iter().map(|a| file_stem(&a.name)).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err("arm names must be distinct (after file-name sanitizing)".into());
        }
        Ok(arms)
    }

    pub fn train_arm(&self, seed: u64) -> Arm {
        Arm {
            name: self.criterion.variant.to_string(),
            config: self.train.config(self.criterion.clone(), seed),
        }
    }
}

/// File-name-safe form of an arm name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
