use std::fs;
use std::path::{Path, PathBuf};

use align_criterion::diagnostics::{alignment_report, Aggregation};
use align_criterion::gradcheck::{check_criterion, random_case, GradcheckReport};
use align_criterion::scene::layers_from_json;
use align_criterion::toytrain::{compare_variants, seeded_runs, Arm, Comparison};
use align_criterion::{
    brute_force_match, hungarian, match_many_to_one_with, total_loss, Assignment, CostParams,
    CriterionConfig, Error, PredictionSet, Scene, Variant,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{file_stem, ExperimentConfig};
use crate::output::{json, num, opt, Table};

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input; exit 2.
    Parse(String),
    /// `k` copies of the ground truths do not fit; exit 3.
    Infeasible(String),
    /// Anything else, including failed checks; exit 1.
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "input error: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InfeasibleReplication { .. } => CliError::Infeasible(e.to_string()),
            Error::InvalidBox { .. }
            | Error::InvalidProbability { .. }
            | Error::Shape(_)
            | Error::InvalidConfig(_)
            | Error::EmptyScene
            | Error::SizeCapExceeded { .. } => CliError::Parse(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))
}

fn load_scene(path: &Path) -> CliResult<Scene> {
    Scene::from_json(&read(path)?).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn load_layers(path: &Path, scene: &Scene) -> CliResult<Vec<PredictionSet>> {
    layers_from_json(&read(path)?, scene.classes)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn pick_layer(
    layers: &[PredictionSet],
    layer: Option<usize>,
) -> CliResult<(usize, &PredictionSet)> {
    let i = layer.unwrap_or(layers.len() - 1);
    layers
        .get(i)
        .map(|l| (i, l))
        .ok_or_else(|| CliError::Parse(format!("layer {i} out of range ({} layers)", layers.len())))
}

#[derive(Serialize)]
struct MatchOut<'a> {
    layer: usize,
    k: usize,
    solver: &'static str,
    #[serde(flatten)]
    assignment: &'a Assignment,
}

pub fn run_match(
    scene: &Path,
    preds: &Path,
    layer: Option<usize>,
    k: usize,
    brute: bool,
) -> CliResult<String> {
    let scene = load_scene(scene)?;
    let layers = load_layers(preds, &scene)?;
    let (index, set) = pick_layer(&layers, layer)?;
    let params = CostParams::default();
    let assignment = if brute {
        match_many_to_one_with(set, &scene, &params, k, brute_force_match)?
    } else {
        match_many_to_one_with(set, &scene, &params, k, hungarian)?
    };
    Ok(json(&MatchOut {
        layer: index,
        k,
        solver: if brute { "brute-force" } else { "hungarian" },
        assignment: &assignment,
    }))
}

pub struct LossOptions {
    pub config: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub no_prime_weighting: bool,
}

impl LossOptions {
    fn criterion(&self) -> CliResult<CriterionConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?)
                .map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?,
            None => CriterionConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if self.no_prime_weighting {
            cfg.prime_weighting = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct LossOut<'a> {
    criterion: &'a CriterionConfig,
    #[serde(flatten)]
    report: &'a align_criterion::LossReport,
}

pub fn run_loss(scene: &Path, preds: &Path, opts: &LossOptions) -> CliResult<String> {
    let cfg = opts.criterion()?;
    let scene = load_scene(scene)?;
    let layers = load_layers(preds, &scene)?;
    let report = total_loss(&layers, &scene, &cfg)?;
    Ok(json(&LossOut {
        criterion: &cfg,
        report: &report,
    }))
}

pub struct GradcheckOptions {
    pub variants: Vec<Variant>,
    pub seeds: u64,
    pub seed: u64,
    pub tol: f64,
    pub layers: usize,
    pub queries: usize,
    pub classes: usize,
    pub gts: usize,
    pub k: usize,
}

/// Returns the CSV table and whether every case passed.
pub fn run_gradcheck(o: &GradcheckOptions) -> CliResult<(String, bool)> {
    if o.seeds == 0 {
        return Err(CliError::Parse("--seeds must be >= 1".into()));
    }
    let jobs: Vec<(Variant, u64)> = o
        .variants
        .iter()
        .flat_map(|&v| (0..o.seeds).map(move |i| (v, o.seed.wrapping_add(i))))
        .collect();
    let reports: Vec<GradcheckReport> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let (layers, scene) = random_case(seed, o.layers, o.queries, o.classes, o.gts)?;
            let cfg = CriterionConfig {
                variant,
                k: o.k,
                ..Default::default()
            };
            check_criterion(&layers, &scene, &cfg, o.tol)
        })
        .collect::<Result<_, Error>>()?;
    let mut table = Table::new(&[
        "variant",
        "seed",
        "n_params",
        "max_rel_err",
        "worst_param",
        "analytic",
        "numeric",
        "pass",
    ]);
    for ((variant, seed), r) in jobs.iter().zip(&reports) {
        table.row([
            variant.to_string(),
            seed.to_string(),
            r.n_params.to_string(),
            num(r.max_rel_err),
            r.worst_param.to_string(),
            num(r.analytic),
            num(r.numeric),
            r.pass.to_string(),
        ]);
    }
    Ok((table.finish(), reports.iter().all(|r| r.pass)))
}

pub fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    cfg.criterion.validate()?;
    if cfg.runs == 0 {
        return Err(CliError::Parse("runs must be >= 1".into()));
    }
    Ok(cfg)
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "run",
    "step",
    "total",
    "cls_pos",
    "cls_neg",
    "reg_l1",
    "reg_giou",
    "last_layer",
    "pearson",
    "br_recall",
];

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    comparison: &'a Comparison,
}

/// Trains every arm on the configured runs and writes one trace CSV per arm
/// plus `summary.json` into `out`. Returns the summary text.
pub fn run_experiment(
    command: &'static str,
    cfg: &ExperimentConfig,
    arms: &[Arm],
    seed: u64,
    out: &Path,
) -> CliResult<String> {
    let scenes = seeded_runs(&cfg.scene.template(), cfg.scene.n_gt_range, cfg.runs, seed)?;
    let datasets: Vec<Vec<Scene>> = scenes.into_iter().map(|s| vec![s]).collect();
    let comparison = compare_variants(&datasets, arms)?;
    create_dir(out)?;
    for (arm, traces) in arms.iter().zip(&comparison.traces) {
        let mut table = Table::new(&TRACE_COLUMNS);
        for (run, trace) in traces.iter().enumerate() {
            for r in &trace.records {
                table.row([
                    run.to_string(),
                    r.step.to_string(),
                    num(r.total),
                    num(r.cls_pos),
                    num(r.cls_neg),
                    num(r.reg_l1),
                    num(r.reg_giou),
                    num(r.last_layer),
                    opt(r.pearson),
                    num(r.br_recall),
                ]);
            }
        }
        write(
            &out.join(format!("{}.csv", file_stem(&arm.name))),
            &table.finish(),
        )?;
    }
    let summary = json(&RunSummary {
        command,
        seed,
        config: cfg,
        comparison: &comparison,
    });
    write(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub struct DiagnoseOptions {
    pub scenes: Vec<PathBuf>,
    pub preds: Vec<PathBuf>,
    pub layer: Option<usize>,
    pub bins: usize,
    pub pooled: bool,
    pub m: Vec<usize>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct DiagnoseOut<'a> {
    aggregation: Aggregation,
    scenes: usize,
    #[serde(flatten)]
    report: &'a align_criterion::diagnostics::AlignmentReport,
}

pub fn run_diagnose(o: &DiagnoseOptions) -> CliResult<String> {
    if o.scenes.len() != o.preds.len() {
        return Err(CliError::Parse(format!(
            "{} scene files but {} prediction files",
            o.scenes.len(),
            o.preds.len()
        )));
    }
    if o.bins < 2 {
        return Err(CliError::Parse("--bins must be >= 2".into()));
    }
    if o.m.is_empty() || o.m.contains(&0) {
        return Err(CliError::Parse("--m values must be >= 1".into()));
    }
    let mut loaded = Vec::with_capacity(o.scenes.len());
    for (s, p) in o.scenes.iter().zip(&o.preds) {
        let scene = load_scene(s)?;
        let layers = load_layers(p, &scene)?;
        let (_, set) = pick_layer(&layers, o.layer)?;
        loaded.push((set.clone(), scene));
    }
    let items: Vec<(&PredictionSet, &Scene)> = loaded.iter().map(|(p, s)| (p, s)).collect();
    let aggregation = if o.pooled {
        Aggregation::Pooled
    } else {
        Aggregation::PerScene
    };
    let report = alignment_report(&items, &o.m, o.bins, aggregation)?;
    create_dir(&o.out)?;

    let mut recall = Table::new(&["m", "br_recall"]);
    for (m, r) in &report.br_recall_at {
        recall.row([m.to_string(), num(*r)]);
    }
    write(&o.out.join("recall.csv"), &recall.finish())?;

    let edge = |i: usize| num(i as f64 / o.bins as f64);
    let mut density = Table::new(&[
        "conf_bin", "conf_lo", "conf_hi", "iou_bin", "iou_lo", "iou_hi", "count",
    ]);
    for (ci, row) in report.density.counts.iter().enumerate() {
        for (ui, count) in row.iter().enumerate() {
            density.row([
                ci.to_string(),
                edge(ci),
                edge(ci + 1),
                ui.to_string(),
                edge(ui),
                edge(ui + 1),
                count.to_string(),
            ]);
        }
    }
    write(&o.out.join("density.csv"), &density.finish())?;

    let mut hist = Table::new(&["bin", "iou_lo", "iou_hi", "hc_count", "br_count"]);
    for (i, (hc, br)) in report
        .hc_iou_hist
        .iter()
        .zip(&report.br_iou_hist)
        .enumerate()
    {
        hist.row([
            i.to_string(),
            edge(i),
            edge(i + 1),
            hc.to_string(),
            br.to_string(),
        ]);
    }
    write(&o.out.join("histograms.csv"), &hist.finish())?;

    let summary = json(&DiagnoseOut {
        aggregation,
        scenes: items.len(),
        report: &report,
    });
    write(&o.out.join("summary.json"), &summary)?;
    Ok(summary)
}
