//! Pair-wise matching cost and exact minimum-cost bipartite assignment.
//!
//! Rows of a [`CostMatrix`] are predictions and columns are ground truths.
//! Many-to-one matching replicates the ground-truth columns `k` times and
//! reduces the solved replica columns back to the original ids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, l1};
use crate::scene::{PredictionSet, Scene};

/// Probability floor inside logarithms and the clamp bound for scores.
pub const LOG_EPS: f64 = 1e-8;

/// Largest `min(rows, cols)` the brute-force oracle accepts.
pub const BRUTE_FORCE_CAP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub class_weight: f64,
    pub bbox_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            class_weight: 2.0,
            bbox_weight: 5.0,
            giou_weight: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.class_weight, self.bbox_weight, self.giou_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(
                "cost weights must be finite and >= 0".into(),
            ));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidConfig(
                "at least one cost weight must be > 0".into(),
            ));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::InvalidConfig(
                "cost focal_alpha must be in (0, 1)".into(),
            ));
        }
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return Err(Error::InvalidConfig("cost focal_gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Focal-style classification cost: positive focal term minus negative focal term.
pub fn focal_class_cost(s: f64, alpha: f64, gamma: f64) -> f64 {
    let s = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
    let pos = alpha * (1.0 - s).powf(gamma) * -(s + LOG_EPS).ln();
    let neg = (1.0 - alpha) * s.powf(gamma) * -(1.0 - s + LOG_EPS).ln();
    pos - neg
}

/// Dense row-major cost matrix, predictions by ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Tiles the columns `k` times; column `r * cols + j` is replica `r` of `j`.
    pub fn replicate_columns(&self, k: usize) -> CostMatrix {
        let cols = self.cols * k;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            for _ in 0..k {
                data.extend_from_slice(self.row(i));
            }
        }
        CostMatrix {
            rows: self.rows,
            cols,
            data,
        }
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(Error::NonFiniteCost {
                row: p / self.cols,
                col: p % self.cols,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    /// Which copy of `gt` this pair was matched to; always 0 for one-to-one.
    pub replica: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Sorted by prediction index.
    pub pairs: Vec<MatchedPair>,
    /// Sorted ascending.
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, cost: &CostMatrix) -> Self {
        pairs.sort_unstable();
        let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
        let mut used = vec![false; cost.rows];
        for &(i, _) in &pairs {
            used[i] = true;
        }
        Assignment {
            pairs: pairs
                .into_iter()
                .map(|(pred, gt)| MatchedPair {
                    pred,
                    gt,
                    replica: 0,
                })
                .collect(),
            unmatched: (0..cost.rows).filter(|&i| !used[i]).collect(),
            total_cost,
        }
    }

    fn unmatched_all(n_pred: usize) -> Self {
        Assignment {
            pairs: Vec::new(),
            unmatched: (0..n_pred).collect(),
            total_cost: 0.0,
        }
    }

    /// Number of pairs assigned to ground truth `gt`.
    pub fn count_for(&self, gt: usize) -> usize {
        self.pairs.iter().filter(|p| p.gt == gt).count()
    }
}

/// Builds the `n_pred x n_gt` matching cost matrix.
pub fn cost_matrix(preds: &PredictionSet, gts: &Scene, params: &CostParams) -> Result<CostMatrix> {
    params.validate()?;
    preds.check_probabilities()?;
    if preds.classes != gts.classes {
        return Err(Error::Shape(format!(
            "predictions have {} classes, scene has {}",
            preds.classes, gts.classes
        )));
    }
    let cols = gts.len();
    let data: Vec<f64> = preds
        .preds
        .par_iter()
        .flat_map_iter(|p| {
            gts.objects.iter().map(move |g| {
                let s = p.score(g.class);
                params.class_weight * focal_class_cost(s, params.focal_alpha, params.focal_gamma)
                    + params.bbox_weight * l1(&p.bbox, &g.bbox)
                    + params.giou_weight * (1.0 - giou(&p.bbox, &g.bbox))
            })
        })
        .collect();
    CostMatrix::new(preds.len(), cols, data)
}

/// Exact minimum-cost assignment (Kuhn-Munkres with potentials, O(n^2 m)).
///
/// Every row is matched when `rows <= cols`, otherwise every column is.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Assignment::unmatched_all(cost.rows));
    }
    let pairs = if cost.cols <= cost.rows {
        // Assign each ground truth to a distinct prediction.
        solve_rect(cost.cols, cost.rows, |gt, pred| cost.get(pred, gt))
            .into_iter()
            .map(|(gt, pred)| (pred, gt))
            .collect()
    } else {
        solve_rect(cost.rows, cost.cols, |pred, gt| cost.get(pred, gt))
    };
    Ok(Assignment::from_pairs(pairs, cost))
}

/// Shortest augmenting path solver for an `n x m` problem with `n <= m`.
/// Returns `(row, col)` for every row.
fn solve_rect(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}

/// Exhaustive minimum over all injective maps from the smaller side into the
/// larger side. Test oracle; limited to `min(rows, cols) <= BRUTE_FORCE_CAP`.
pub fn brute_force_match(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    let small = cost.rows.min(cost.cols);
    if small > BRUTE_FORCE_CAP {
        return Err(Error::SizeCapExceeded {
            size: small,
            cap: BRUTE_FORCE_CAP,
        });
    }
    if small == 0 {
        return Ok(Assignment::unmatched_all(cost.rows));
    }
    let by_gt = cost.cols <= cost.rows;
    let (n, m) = if by_gt {
        (cost.cols, cost.rows)
    } else {
        (cost.rows, cost.cols)
    };
    let entry = |i: usize, j: usize| {
        if by_gt {
            cost.get(j, i)
        } else {
            cost.get(i, j)
        }
    };

    struct Search<'a, F> {
        n: usize,
        m: usize,
        entry: &'a F,
        taken: Vec<bool>,
        chosen: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl<F: Fn(usize, usize) -> f64> Search<'_, F> {
        fn visit(&mut self, i: usize) {
            if i == self.n {
                let total: f64 = (0..self.n).map(|r| (self.entry)(r, self.chosen[r])).sum();
                if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                    self.best = Some((total, self.chosen.clone()));
                }
                return;
            }
            for j in 0..self.m {
                if !self.taken[j] {
                    self.taken[j] = true;
                    self.chosen.push(j);
                    self.visit(i + 1);
                    self.chosen.pop();
                    self.taken[j] = false;
                }
            }
        }
    }

    let mut search = Search {
        n,
        m,
        entry: &entry,
        taken: vec![false; m],
        chosen: Vec::with_capacity(n),
        best: None,
    };
    search.visit(0);
    let (_, best) = search.best.expect("at least one injective map exists");
    let pairs = best
        .into_iter()
        .enumerate()
        .map(|(i, j)| if by_gt { (j, i) } else { (i, j) })
        .collect();
    Ok(Assignment::from_pairs(pairs, cost))
}

/// One-to-one Hungarian matching of predictions to ground truths.
pub fn match_one_to_one(
    preds: &PredictionSet,
    gts: &Scene,
    params: &CostParams,
) -> Result<Assignment> {
    if gts.is_empty() {
        return Ok(Assignment::unmatched_all(preds.len()));
    }
    hungarian(&cost_matrix(preds, gts, params)?)
}

/// Many-to-one matching: each ground truth is copied `k` times before solving.
pub fn match_many_to_one(
    preds: &PredictionSet,
    gts: &Scene,
    params: &CostParams,
    k: usize,
) -> Result<Assignment> {
    match_many_to_one_with(preds, gts, params, k, hungarian)
}

/// [`match_many_to_one`] with a caller-chosen assignment solver.
pub fn match_many_to_one_with(
    preds: &PredictionSet,
    gts: &Scene,
    params: &CostParams,
    k: usize,
    solve: impl Fn(&CostMatrix) -> Result<Assignment>,
) -> Result<Assignment> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "replication count k must be >= 1".into(),
        ));
    }
    if k * gts.len() > preds.len() {
        return Err(Error::InfeasibleReplication {
            k,
            n_gt: gts.len(),
            n_pred: preds.len(),
        });
    }
    if gts.is_empty() {
        return Ok(Assignment::unmatched_all(preds.len()));
    }
    let base = cost_matrix(preds, gts, params)?;
    let replicated = base.replicate_columns(k);
    let mut assignment = solve(&replicated)?;
    let n_gt = gts.len();
    for p in &mut assignment.pairs {
        p.replica = p.gt / n_gt;
        p.gt %= n_gt;
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::scene::{logit, GtObject, Prediction};
    use approx::assert_abs_diff_eq;

    fn pairs(a: &Assignment) -> Vec<(usize, usize)> {
        a.pairs.iter().map(|p| (p.pred, p.gt)).collect()
    }

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(pairs(&a), vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        assert_eq!(brute_force_match(&c).unwrap().total_cost, 2.0);
    }

    #[test]
    fn diagonal_dominance() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        let a = hungarian(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(pairs(&a), (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn single_column_picks_argmin() {
        let c = CostMatrix::from_rows(&[vec![5.0], vec![2.0], vec![7.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(pairs(&a), vec![(1, 0)]);
        assert_eq!(a.unmatched, vec![0, 2]);
        assert_eq!(brute_force_match(&c).unwrap(), a);
    }

    #[test]
    fn wide_matrix_matches_every_row() {
        let c = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.total_cost, 3.0);
        assert!(a.unmatched.is_empty());
        assert_eq!(brute_force_match(&c).unwrap().total_cost, 3.0);
    }

    #[test]
    fn ties_compare_by_cost() {
        let c = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().total_cost, 2.0);
        assert_eq!(brute_force_match(&c).unwrap().total_cost, 2.0);
    }

    #[test]
    fn one_by_one() {
        let c = CostMatrix::from_rows(&[vec![42.0]]).unwrap();
        assert_eq!(pairs(&brute_force_match(&c).unwrap()), vec![(0, 0)]);
        assert_eq!(pairs(&hungarian(&c).unwrap()), vec![(0, 0)]);
    }

    #[test]
    fn rejects_non_finite() {
        let c = CostMatrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert_eq!(hungarian(&c), Err(Error::NonFiniteCost { row: 0, col: 1 }));
    }

    #[test]
    fn brute_force_cap() {
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(
            brute_force_match(&c),
            Err(Error::SizeCapExceeded { size: 9, cap: 8 })
        ));
    }

    #[test]
    fn focal_cost_at_half() {
        // 0.25 * 0.25 * ln2 - 0.75 * 0.25 * ln2
        let expected = -0.125 * std::f64::consts::LN_2;
        assert_abs_diff_eq!(focal_class_cost(0.5, 0.25, 2.0), expected, epsilon = 1e-7);
        assert_abs_diff_eq!(focal_class_cost(0.5, 0.25, 2.0), -0.0866, epsilon = 1e-4);
    }

    fn scene_one(class: usize, b: [f64; 4]) -> Scene {
        Scene::new(
            3,
            vec![GtObject {
                class,
                bbox: BBox::from_array(b).unwrap(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn cost_entry_for_identical_box() {
        let gt = [0.4, 0.5, 0.2, 0.3];
        let scene = scene_one(1, gt);
        let p = Prediction::new(vec![0.0; 3], BBox::from_array(gt).unwrap());
        let preds = PredictionSet::new(3, vec![p]).unwrap();
        let c = cost_matrix(&preds, &scene, &CostParams::default()).unwrap();
        assert_abs_diff_eq!(
            c.get(0, 0),
            2.0 * focal_class_cost(0.5, 0.25, 2.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn perfect_prediction_is_row_minimum() {
        let gt = [0.4, 0.5, 0.2, 0.3];
        let scene = scene_one(0, gt);
        let perfect = Prediction::new(
            vec![logit(1.0 - LOG_EPS), 0.0, 0.0],
            BBox::from_array(gt).unwrap(),
        );
        let off = Prediction::new(vec![0.0; 3], BBox::new(0.6, 0.6, 0.3, 0.3).unwrap());
        let preds = PredictionSet::new(3, vec![off, perfect]).unwrap();
        let c = cost_matrix(&preds, &scene, &CostParams::default()).unwrap();
        assert!(c.get(1, 0) < c.get(0, 0));
        assert_eq!(
            pairs(&match_one_to_one(&preds, &scene, &CostParams::default()).unwrap()),
            vec![(1, 0)]
        );
    }

    #[test]
    fn empty_scene_leaves_everything_unmatched() {
        let scene = Scene::new(3, vec![]).unwrap();
        let preds = PredictionSet::new(
            3,
            vec![Prediction::new(vec![0.0; 3], BBox::new(0.5, 0.5, 0.1, 0.1).unwrap()); 4],
        )
        .unwrap();
        let a = match_one_to_one(&preds, &scene, &CostParams::default()).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched, vec![0, 1, 2, 3]);
    }

    #[test]
    fn replication_structure_and_feasibility() {
        let scene = scene_one(0, [0.5, 0.5, 0.2, 0.2]);
        let preds = PredictionSet::new(
            3,
            (0..3)
                .map(|i| {
                    Prediction::new(
                        vec![-1.0 + i as f64 * 0.3; 3],
                        BBox::new(0.45 + 0.05 * i as f64, 0.5, 0.2, 0.2).unwrap(),
                    )
                })
                .collect(),
        )
        .unwrap();
        let a = match_many_to_one(&preds, &scene, &CostParams::default(), 2).unwrap();
        assert_eq!(a.count_for(0), 2);
        assert_eq!(a.unmatched.len(), 1);
        let mut replicas: Vec<_> = a.pairs.iter().map(|p| p.replica).collect();
        replicas.sort();
        assert_eq!(replicas, vec![0, 1]);

        assert_eq!(
            match_many_to_one(&preds, &scene, &CostParams::default(), 4),
            Err(Error::InfeasibleReplication {
                k: 4,
                n_gt: 1,
                n_pred: 3
            })
        );
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::geometry::BBox;
    use crate::scene::{GtObject, Prediction};
    use proptest::prelude::*;

    fn matrix() -> impl Strategy<Value = CostMatrix> {
        (1..=6usize, 1..=6usize).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0..5.0f64, r * c)
                .prop_map(move |data| CostMatrix::new(r, c, data).unwrap())
        })
    }

    fn unit_box() -> impl Strategy<Value = BBox> {
        (0.2..0.8f64, 0.2..0.8f64, 0.05..0.4f64, 0.05..0.4f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    fn problem() -> impl Strategy<Value = (PredictionSet, Scene, usize)> {
        (1..=3usize, 1..=3usize).prop_flat_map(|(n_gt, k)| {
            let preds = proptest::collection::vec(
                (proptest::collection::vec(-4.0..4.0f64, 2), unit_box()),
                n_gt * k..n_gt * k + 4,
            );
            let gts = proptest::collection::vec((0..2usize, unit_box()), n_gt);
            (preds, gts, Just(k)).prop_map(|(preds, gts, k)| {
                let preds = preds
                    .into_iter()
                    .map(|(l, b)| Prediction::new(l, b))
                    .collect();
                let objects = gts
                    .into_iter()
                    .map(|(class, bbox)| GtObject { class, bbox })
                    .collect();
                (
                    PredictionSet::new(2, preds).unwrap(),
                    Scene::new(2, objects).unwrap(),
                    k,
                )
            })
        })
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(c in matrix()) {
            let fast = hungarian(&c).unwrap();
            let slow = brute_force_match(&c).unwrap();
            prop_assert!((fast.total_cost - slow.total_cost).abs() < 1e-9);
            prop_assert_eq!(fast.pairs.len(), c.rows().min(c.cols()));
        }

        #[test]
        fn assignment_is_injective(c in matrix()) {
            let a = hungarian(&c).unwrap();
            let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.pred).collect();
            let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.gt).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), a.pairs.len());
            prop_assert_eq!(cols.len(), a.pairs.len());
            prop_assert_eq!(a.unmatched.len() + a.pairs.len(), c.rows());
        }

        #[test]
        fn k1_equals_one_to_one((preds, gts, _k) in problem()) {
            let params = CostParams::default();
            let one = match_one_to_one(&preds, &gts, &params).unwrap();
            let many = match_many_to_one(&preds, &gts, &params, 1).unwrap();
            prop_assert_eq!(one.total_cost, many.total_cost);
        }

        #[test]
        fn every_gt_gets_k((preds, gts, k) in problem()) {
            let a = match_many_to_one(&preds, &gts, &CostParams::default(), k).unwrap();
            for g in 0..gts.len() {
                prop_assert_eq!(a.count_for(g), k);
            }
            prop_assert!(a.pairs.iter().all(|p| p.replica < k));
        }
    }
}
