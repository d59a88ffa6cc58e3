//! Ground-truth scenes, per-layer prediction sets, and their JSON file forms.
//!
//! Scene file: `{"classes": C, "objects": [{"class": c, "box": [cx, cy, w, h]}]}`.
//! Prediction file: `{"layers": [[{"scores": [..C..], "box": [..4..]}]]}`,
//! scores being sigmoid-activated probabilities. Floats are written with at
//! most nine significant digits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtObject {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub classes: usize,
    pub objects: Vec<GtObject>,
}

impl Scene {
    pub fn new(classes: usize, objects: Vec<GtObject>) -> Result<Self> {
        let scene = Self { classes, objects };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidConfig(
                "scene needs at least one class".into(),
            ));
        }
        if let Some(o) = self.objects.iter().find(|o| o.class >= self.classes) {
            return Err(Error::Shape(format!(
                "object class {} out of range for {} classes",
                o.class, self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Scene =
            serde_json::from_str(s).map_err(|e| Error::Shape(format!("scene json: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        let raw = SceneOut {
            classes: self.classes,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectOut {
                    class: o.class,
                    bbox: round_all(o.bbox.to_array()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("scene serializes")
    }
}

#[derive(Serialize)]
struct SceneOut {
    classes: usize,
    objects: Vec<ObjectOut>,
}

#[derive(Serialize)]
struct ObjectOut {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// One query's output: per-class logits and a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub bbox: BBox,
}

impl Prediction {
    pub fn new(logits: Vec<f64>, bbox: BBox) -> Self {
        Self { logits, bbox }
    }

    /// Builds a prediction from activated scores, which must lie in `(0, 1)`.
    pub fn from_scores(scores: &[f64], bbox: BBox) -> Result<Self> {
        let logits = scores
            .iter()
            .enumerate()
            .map(|(class, &s)| {
                if s > 0.0 && s < 1.0 {
                    Ok(logit(s))
                } else {
                    Err(Error::InvalidProbability {
                        pred: 0,
                        class,
                        value: s,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { logits, bbox })
    }

    pub fn score(&self, class: usize) -> f64 {
        sigmoid(self.logits[class])
    }

    pub fn scores(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Maximum class probability.
    pub fn confidence(&self) -> f64 {
        sigmoid(self.logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z)))
    }
}

/// The outputs of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub classes: usize,
    pub preds: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(classes: usize, preds: Vec<Prediction>) -> Result<Self> {
        if let Some((i, p)) = preds
            .iter()
            .enumerate()
            .find(|(_, p)| p.logits.len() != classes)
        {
            return Err(Error::Shape(format!(
                "prediction {i} has {} scores, expected {classes}",
                p.logits.len()
            )));
        }
        Ok(Self { classes, preds })
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.preds.iter().map(Prediction::confidence).collect()
    }

    /// Checks that every activated score is a usable probability. Finite
    /// logits always are; saturation is handled by clamping downstream.
    pub fn check_probabilities(&self) -> Result<()> {
        for (i, p) in self.preds.iter().enumerate() {
            for (c, &z) in p.logits.iter().enumerate() {
                if !z.is_finite() {
                    let s = sigmoid(z);
                    return Err(Error::InvalidProbability {
                        pred: i,
                        class: c,
                        value: s,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredOut {
    scores: Vec<f64>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredFile {
    layers: Vec<Vec<PredOut>>,
}

/// Parses a prediction file into one set per layer.
pub fn layers_from_json(s: &str, classes: usize) -> Result<Vec<PredictionSet>> {
    let file: PredFile =
        serde_json::from_str(s).map_err(|e| Error::Shape(format!("prediction json: {e}")))?;
    if file.layers.is_empty() {
        return Err(Error::Shape("prediction file has no layers".into()));
    }
    file.layers
        .into_iter()
        .map(|layer| {
            let preds = layer
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let bbox = BBox::from_array(p.bbox)?;
                    Prediction::from_scores(&p.scores, bbox).map_err(|e| match e {
                        Error::InvalidProbability { class, value, .. } => {
                            Error::InvalidProbability {
                                pred: i,
                                class,
                                value,
                            }
                        }
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            PredictionSet::new(classes, preds)
        })
        .collect()
}

pub fn layers_to_json(layers: &[PredictionSet]) -> String {
    let file = PredFile {
        layers: layers
            .iter()
            .map(|set| {
                set.preds
                    .iter()
                    .map(|p| PredOut {
                        // Saturated scores would round to 0 or 1 and fail to parse back.
                        scores: p
                            .scores()
                            .into_iter()
                            .map(|s| round_sig(s.clamp(1e-8, 1.0 - 1e-8)))
                            .collect(),
                        bbox: round_all(p.bbox.to_array()),
                    })
                    .collect()
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("predictions serialize")
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(s: f64) -> f64 {
    (s / (1.0 - s)).ln()
}

/// Rounds to nine significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn round_all<const N: usize>(v: [f64; N]) -> [f64; N] {
    v.map(round_sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_round_trip() {
        let json = r#"{"classes": 3, "objects": [{"class": 2, "box": [0.5, 0.4, 0.2, 0.3]}]}"#;
        let scene = Scene::from_json(json).unwrap();
        assert_eq!(scene.objects[0].class, 2);
        let again = Scene::from_json(&scene.to_json()).unwrap();
        assert_eq!(scene, again);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_class() {
        assert!(Scene::from_json(r#"{"classes": 1, "objects": [], "x": 1}"#).is_err());
        assert!(Scene::from_json(
            r#"{"classes": 1, "objects": [{"class": 1, "box": [0.5,0.5,0.1,0.1]}]}"#
        )
        .is_err());
        assert!(Scene::from_json(
            r#"{"classes": 1, "objects": [{"class": 0, "box": [0.5,0.5,0.0,0.1]}]}"#
        )
        .is_err());
    }

    #[test]
    fn prediction_file_rejects_saturated_scores() {
        let json = r#"{"layers": [[{"scores": [1.0], "box": [0.5,0.5,0.1,0.1]}]]}"#;
        assert!(matches!(
            layers_from_json(json, 1),
            Err(Error::InvalidProbability {
                pred: 0,
                class: 0,
                ..
            })
        ));
        let json = r#"{"layers": [[{"scores": [0.3, 0.2], "box": [0.5,0.5,0.1,0.1]}]]}"#;
        assert!(matches!(layers_from_json(json, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(round_sig(0.123456789123), 0.123456789);
        assert_eq!(round_sig(0.1), 0.1);
        assert_eq!(round_sig(-2.5e-7), -2.5e-7);
    }

    #[test]
    fn sigmoid_logit_inverse() {
        for s in [1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((sigmoid(logit(s)) - s).abs() < 1e-12);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn scene() -> impl Strategy<Value = Scene> {
        let object = (
            0..4usize,
            0.2..0.8f64,
            0.2..0.8f64,
            0.01..0.4f64,
            0.01..0.4f64,
        )
            .prop_map(|(class, cx, cy, w, h)| GtObject {
                class,
                bbox: BBox::new(cx, cy, w, h).unwrap(),
            });
        proptest::collection::vec(object, 0..6).prop_map(|objects| Scene::new(4, objects).unwrap())
    }

    proptest! {
        #[test]
        fn scene_json_round_trip(s in scene()) {
            let first = Scene::from_json(&s.to_json()).unwrap();
            let text = first.to_json();
            let second = Scene::from_json(&text).unwrap();
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(text, second.to_json());
        }

        #[test]
        fn layers_json_round_trip(scores in proptest::collection::vec(0.001..0.999f64, 1..12)) {
            let bbox = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
            let preds = scores
                .chunks(2)
                .filter(|c| c.len() == 2)
                .map(|c| Prediction::from_scores(c, bbox).unwrap())
                .collect();
            let set = PredictionSet::new(2, preds).unwrap();
            let text = layers_to_json(&[set]);
            let back = layers_from_json(&text, 2).unwrap();
            prop_assert_eq!(text, layers_to_json(&back));
        }
    }
}
