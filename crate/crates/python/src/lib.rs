//! Python bindings: boxes, scenes and prediction files, matching, the
//! criterion, gradient checks, diagnostics and the toy trainer.
//!
//! Structured results come back as plain dicts and lists.

use align_criterion::diagnostics;
use align_criterion::gradcheck::{check_criterion, random_case};
use align_criterion::scene::{layers_from_json, layers_to_json};
use align_criterion::toytrain::{self, SceneSpec, TrainConfig};
use align_criterion::{
    brute_force_match, hungarian, match_many_to_one, BBox, CostMatrix, CostParams, CriterionConfig,
    Error, PredictionSet, Scene, Variant,
};
use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde_json::Value;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Axis-aligned box in normalized center format.
#[pyclass(name = "Box", frozen, from_py_object)]
#[derive(Clone)]
struct PyBox(BBox);

#[pymethods]
impl PyBox {
    #[new]
    fn new(cx: f64, cy: f64, w: f64, h: f64) -> PyResult<Self> {
        BBox::new(cx, cy, w, h).map(PyBox).map_err(err)
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx()
    }

    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy()
    }

    #[getter]
    fn w(&self) -> f64 {
        self.0.w()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h()
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn to_list(&self) -> [f64; 4] {
        self.0.to_array()
    }

    fn __repr__(&self) -> String {
        let [cx, cy, w, h] = self.0.to_array();
        format!("Box(cx={cx}, cy={cy}, w={w}, h={h})")
    }
}

#[pyclass(name = "Scene", frozen, from_py_object)]
#[derive(Clone)]
struct PyScene(Scene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Scene::from_json(text).map(PyScene).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes
    }

    /// `(class, Box)` for every object.
    fn objects(&self) -> Vec<(usize, PyBox)> {
        self.0
            .objects
            .iter()
            .map(|o| (o.class, PyBox(o.bbox)))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Per-layer prediction sets, as read from a prediction file.
#[pyclass(name = "Predictions", frozen, from_py_object)]
#[derive(Clone)]
struct PyPredictions(Vec<PredictionSet>);

impl PyPredictions {
    fn layer(&self, layer: Option<usize>) -> PyResult<&PredictionSet> {
        let i = layer.unwrap_or(self.0.len() - 1);
        self.0
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("layer {i} out of range")))
    }
}

#[pymethods]
impl PyPredictions {
    #[staticmethod]
    fn from_json(text: &str, classes: usize) -> PyResult<Self> {
        layers_from_json(text, classes)
            .map(PyPredictions)
            .map_err(err)
    }

    fn to_json(&self) -> String {
        layers_to_json(&self.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Max-class probability per query; the last layer by default.
    #[pyo3(signature = (layer=None))]
    fn confidences(&self, layer: Option<usize>) -> PyResult<Vec<f64>> {
        Ok(self.layer(layer)?.confidences())
    }

    #[pyo3(signature = (layer=None))]
    fn boxes(&self, layer: Option<usize>) -> PyResult<Vec<PyBox>> {
        Ok(self
            .layer(layer)?
            .preds
            .iter()
            .map(|p| PyBox(p.bbox))
            .collect())
    }
}

#[pyfunction]
fn iou(a: &PyBox, b: &PyBox) -> f64 {
    align_criterion::iou(&a.0, &b.0)
}

#[pyfunction]
fn giou(a: &PyBox, b: &PyBox) -> f64 {
    align_criterion::giou(&a.0, &b.0)
}

#[pyfunction]
fn quality(s: f64, u: f64, alpha: f64) -> f64 {
    align_criterion::quality(s, u, alpha)
}

#[pyfunction]
fn prime_weights(ts: Vec<f64>, tau: f64) -> Vec<f64> {
    align_criterion::prime_weights(&ts, tau)
}

/// Minimum-cost assignment of a rectangular cost matrix given as rows.
#[pyfunction]
#[pyo3(signature = (cost, brute_force=false))]
fn assign<'py>(
    py: Python<'py>,
    cost: Vec<Vec<f64>>,
    brute_force: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let m = CostMatrix::from_rows(&cost).map_err(err)?;
    let a = if brute_force {
        brute_force_match(&m)
    } else {
        hungarian(&m)
    }
    .map_err(err)?;
    serialize(py, &a)
}

/// Matches one layer's predictions with `k` copies of every ground truth.
#[pyfunction]
#[pyo3(signature = (preds, scene, k=1, layer=None))]
fn match_layer<'py>(
    py: Python<'py>,
    preds: &PyPredictions,
    scene: &PyScene,
    k: usize,
    layer: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let a =
        match_many_to_one(preds.layer(layer)?, &scene.0, &CostParams::default(), k).map_err(err)?;
    serialize(py, &a)
}

fn criterion(
    variant: &str,
    alpha: Option<f64>,
    tau: Option<f64>,
    k: Option<usize>,
    prime_weighting: Option<bool>,
) -> PyResult<CriterionConfig> {
    let d = CriterionConfig::default();
    let cfg = CriterionConfig {
        variant: variant.parse::<Variant>().map_err(err)?,
        alpha: alpha.unwrap_or(d.alpha),
        tau: tau.unwrap_or(d.tau),
        k: k.unwrap_or(d.k),
        prime_weighting: prime_weighting.unwrap_or(d.prime_weighting),
        ..d
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Mixed-matching loss over all layers with a per-term breakdown.
#[pyfunction]
#[pyo3(signature = (preds, scene, variant="ia-bce", alpha=None, tau=None, k=None, prime_weighting=None))]
#[allow(clippy::too_many_arguments)]
fn total_loss<'py>(
    py: Python<'py>,
    preds: &PyPredictions,
    scene: &PyScene,
    variant: &str,
    alpha: Option<f64>,
    tau: Option<f64>,
    k: Option<usize>,
    prime_weighting: Option<bool>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = criterion(variant, alpha, tau, k, prime_weighting)?;
    let report = align_criterion::total_loss(&preds.0, &scene.0, &cfg).map_err(err)?;
    serialize(py, &report)
}

/// Finite-difference check of one variant on a seeded random problem.
#[pyfunction]
#[pyo3(signature = (variant, seed, tol=1e-4))]
fn gradcheck<'py>(
    py: Python<'py>,
    variant: &str,
    seed: u64,
    tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = CriterionConfig {
        k: 2,
        ..criterion(variant, None, None, None, None)?
    };
    let (layers, scene) = random_case(seed, 3, 6, 3, 2).map_err(err)?;
    serialize(
        py,
        &check_criterion(&layers, &scene, &cfg, tol).map_err(err)?,
    )
}

#[pyfunction]
#[pyo3(signature = (preds, scene, m=1, layer=None))]
fn br_recall(
    preds: &PyPredictions,
    scene: &PyScene,
    m: usize,
    layer: Option<usize>,
) -> PyResult<f64> {
    diagnostics::br_recall(preds.layer(layer)?, &scene.0, m).map_err(err)
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    diagnostics::pearson(&xs, &ys).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (n_gt, seed, n_classes=5))]
fn generate_scene(n_gt: usize, seed: u64, n_classes: usize) -> PyResult<PyScene> {
    toytrain::generate_scene(&SceneSpec {
        n_gt,
        n_classes,
        seed,
        ..Default::default()
    })
    .map(PyScene)
    .map_err(err)
}

/// Trains the toy model on one scene; returns the per-step records and the
/// final predictions.
#[pyfunction]
#[pyo3(signature = (scene, variant="ia-bce", steps=2000, seed=0, k=3, n_queries=20, layers=3))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    scene: &PyScene,
    variant: &str,
    steps: usize,
    seed: u64,
    k: usize,
    n_queries: usize,
    layers: usize,
) -> PyResult<(Bound<'py, PyAny>, PyPredictions)> {
    let cfg = TrainConfig {
        steps,
        seed,
        n_queries,
        layers,
        criterion: criterion(variant, None, None, Some(k), None)?,
        ..Default::default()
    };
    let scenes = [scene.0.clone()];
    let trace = py.detach(|| toytrain::train(&scenes, &cfg)).map_err(err)?;
    Ok((
        serialize(py, &trace.records)?,
        PyPredictions(trace.final_layers),
    ))
}

#[pymodule]
#[pyo3(name = "align_criterion")]
fn align_criterion_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyPredictions>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(quality, m)?)?;
    m.add_function(wrap_pyfunction!(prime_weights, m)?)?;
    m.add_function(wrap_pyfunction!(assign, m)?)?;
    m.add_function(wrap_pyfunction!(match_layer, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(br_recall, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
