//! Bipartite matching between predictions and ground truths.

use crate::error::{Error, Result};
use crate::geometry::{giou, Bbox};
use crate::tensor::Tensor;

/// Lower/upper clamp on probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Cost weights `(λ_cls, λ_bbox, λ_giou)`, shared by matching and loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWeights {
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            bbox: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Focal {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl Focal {
    /// Positive-target focal term minus negative-target focal term at `p`.
    pub fn class_cost(&self, p: f64) -> f64 {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let pos = self.alpha * (1.0 - p).powf(self.gamma) * -p.ln();
        let neg = (1.0 - self.alpha) * p.powf(self.gamma) * -(1.0 - p).ln();
        pos - neg
    }
}

/// Per-term matching costs, row-major `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTerms {
    pub cls: Vec<f64>,
    pub bbox: Vec<f64>,
    pub giou: Vec<f64>,
}

/// Rows are predictions, columns ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub terms: Option<CostTerms>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "{} cost entries for a {rows}×{cols} matrix",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry ({}, {})", k / cols, k % cols)));
        }
        Ok(Self {
            rows,
            cols,
            values,
            terms: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Sum of entries over `pairs` taken in prediction order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        let mut sorted = pairs.to_vec();
        sorted.sort_unstable();
        sorted.iter().map(|&(i, j)| self.at(i, j)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(prediction, ground truth)`, sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    fn from_pairs(c: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let cost = c.total(&pairs);
        Self { pairs, cost }
    }

    /// Ground-truth index per prediction.
    pub fn targets(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; n_pred];
        for &(i, j) in &self.pairs {
            t[i] = Some(j);
        }
        t
    }
}

/// `λ_cls·cls + λ_bbox·L1 + λ_giou·(1 − giou)` for every prediction/ground
/// truth pair. `logits` is `N × (C+1)` with background last; `boxes` is
/// `N × 4`.
pub fn match_cost(
    logits: &Tensor,
    boxes: &Tensor,
    gt_classes: &[usize],
    gt_boxes: &[Bbox],
    weights: MatchWeights,
    focal: Focal,
) -> Result<CostMatrix> {
    let n = logits.shape()[0];
    let c1 = logits.shape().get(1).copied().unwrap_or(0);
    if boxes.shape() != [n, 4] {
        return Err(Error::shape("match_cost", boxes.shape(), &[n, 4]));
    }
    if gt_classes.len() != gt_boxes.len() {
        return Err(Error::Invalid("ground-truth classes and boxes differ in length".into()));
    }
    if let Some(&k) = gt_classes.iter().find(|&&k| k + 1 >= c1) {
        return Err(Error::Invalid(format!("ground-truth class {k} out of range")));
    }
    for i in 0..n {
        if !logits.row(i).iter().chain(boxes.row(i)).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("detection {i}")));
        }
    }
    let g = gt_classes.len();
    let mut terms = CostTerms {
        cls: Vec::with_capacity(n * g),
        bbox: Vec::with_capacity(n * g),
        giou: Vec::with_capacity(n * g),
    };
    let mut values = Vec::with_capacity(n * g);
    for i in 0..n {
        let b = Bbox::from_slice(boxes.row(i));
        for (&k, gb) in gt_classes.iter().zip(gt_boxes) {
            let p = crate::geometry::sigmoid(logits.at(i, k));
            let cls = focal.class_cost(p);
            let l1 = b.l1(gb);
            let gi = 1.0 - giou(&b, gb);
            values.push(weights.cls * cls + weights.bbox * l1 + weights.giou * gi);
            terms.cls.push(cls);
            terms.bbox.push(l1);
            terms.giou.push(gi);
        }
    }
    let mut m = CostMatrix::new(n, g, values)?;
    m.terms = Some(terms);
    Ok(m)
}

/// Shortest-augmenting-path assignment of every row to a distinct column.
/// Requires `n ≤ m`.
fn solve_rows(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let (mut p, mut way) = (vec![0usize; m + 1], vec![0usize; m + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal pairs between the listed rows and columns.
fn optimal_pairs(c: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    if rows.len() <= cols.len() {
        let a = solve_rows(rows.len(), cols.len(), |i, j| c.at(rows[i], cols[j]));
        a.iter().enumerate().map(|(i, &j)| (rows[i], cols[j])).collect()
    } else {
        let a = solve_rows(cols.len(), rows.len(), |j, i| c.at(rows[i], cols[j]));
        a.iter().enumerate().map(|(j, &i)| (rows[i], cols[j])).collect()
    }
}

fn tie_tolerance(best: f64) -> f64 {
    1e-12 * best.abs().max(1.0)
}

/// Minimum-cost assignment of `min(N, G)` pairs. Among optima (equal up to
/// rounding), returns the lexicographically smallest pair list.
pub fn hungarian_assign(c: &CostMatrix) -> Assignment {
    let (n, m) = (c.rows, c.cols);
    let k = n.min(m);
    if k == 0 {
        return Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        };
    }
    let all_cols: Vec<usize> = (0..m).collect();
    let all_rows: Vec<usize> = (0..n).collect();
    let best = c.total(&optimal_pairs(c, &all_rows, &all_cols));
    let limit = best + tie_tolerance(best);

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    let mut free = all_cols;
    for i in 0..n {
        if fixed.len() == k {
            break;
        }
        let rows_after: Vec<usize> = (i + 1..n).collect();
        let need = k - fixed.len() - 1;
        let mut chosen = None;
        let mut fallback: Option<(f64, usize)> = None;
        if rows_after.len().min(free.len() - 1) == need {
            for (slot, &j) in free.iter().enumerate() {
                let cols_after: Vec<usize> = free.iter().copied().filter(|&x| x != j).collect();
                let rest = optimal_pairs(c, &rows_after, &cols_after);
                let total = fixed_cost + c.at(i, j) + rest.iter().map(|&(a, b)| c.at(a, b)).sum::<f64>();
                if total <= limit {
                    chosen = Some(slot);
                    break;
                }
                if fallback.is_none_or(|(t, _)| total < t) {
                    fallback = Some((total, slot));
                }
            }
        }
        // Leaving row i unmatched is only possible if the rest can still
        // supply every remaining pair.
        let can_skip = rows_after.len().min(free.len()) == k - fixed.len();
        let slot = match chosen {
            Some(s) => Some(s),
            None if can_skip => None,
            None => fallback.map(|(_, s)| s),
        };
        if let Some(s) = slot {
            let j = free.remove(s);
            fixed_cost += c.at(i, j);
            fixed.push((i, j));
        }
    }
    Assignment::from_pairs(c, fixed)
}

/// Number of injections enumerated by [`brute_force_assign`] before it gives
/// up.
pub const BRUTE_FORCE_LIMIT: u64 = 20_000_000;

fn injections(small: usize, large: usize) -> Option<u64> {
    (0..small).try_fold(1u64, |acc, i| acc.checked_mul((large - i) as u64))
}

/// Calls `visit` with every assignment of `min(N, G)` pairs.
fn enumerate(c: &CostMatrix, visit: &mut dyn FnMut(&[(usize, usize)])) {
    fn rec(
        c: &CostMatrix,
        depth: usize,
        small: usize,
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize)>,
        transpose: bool,
        visit: &mut dyn FnMut(&[(usize, usize)]),
    ) {
        if depth == small {
            visit(pairs);
            return;
        }
        for x in 0..used.len() {
            if used[x] {
                continue;
            }
            used[x] = true;
            pairs.push(if transpose { (x, depth) } else { (depth, x) });
            rec(c, depth + 1, small, used, pairs, transpose, visit);
            pairs.pop();
            used[x] = false;
        }
    }
    let transpose = c.rows > c.cols;
    let (small, large) = if transpose { (c.cols, c.rows) } else { (c.rows, c.cols) };
    rec(c, 0, small, &mut vec![false; large], &mut Vec::with_capacity(small), transpose, visit);
}

/// Exhaustive reference for [`hungarian_assign`] with the same tie rule.
pub fn brute_force_assign(c: &CostMatrix) -> Result<Assignment> {
    let (small, large) = (c.rows.min(c.cols), c.rows.max(c.cols));
    if small > 8 || injections(small, large).is_none_or(|k| k > BRUTE_FORCE_LIMIT) {
        return Err(Error::TooLarge {
            rows: c.rows,
            cols: c.cols,
        });
    }
    let mut best = f64::INFINITY;
    enumerate(c, &mut |p| best = best.min(c.total(p)));
    if small == 0 {
        best = 0.0;
    }
    let limit = best + tie_tolerance(best);
    let mut pick: Option<Vec<(usize, usize)>> = None;
    enumerate(c, &mut |p| {
        if c.total(p) <= limit {
            let mut s = p.to_vec();
            s.sort_unstable();
            if pick.as_ref().is_none_or(|q| s < *q) {
                pick = Some(s);
            }
        }
    });
    Ok(Assignment::from_pairs(c, pick.unwrap_or_default()))
}
