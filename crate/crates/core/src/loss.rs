//! Set-prediction loss with deep supervision.

use crate::error::Result;
use crate::geometry::{giou, Bbox};
use crate::matching::{hungarian_assign, match_cost, Assignment, Focal, MatchWeights};
use crate::model::LayerOutput;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossConfig {
    pub weights: MatchWeights,
    pub focal: Focal,
}

/// Unweighted loss terms of one decoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct CompositeLoss {
    /// Mean of the weighted per-layer losses.
    pub total: Var,
    pub layers: Vec<LossTerms>,
    pub assignments: Vec<Assignment>,
}

impl CompositeLoss {
    pub fn value(&self, tape: &Tape) -> f64 {
        tape.scalar(self.total)
    }

    /// Terms averaged over layers.
    pub fn mean_terms(&self) -> LossTerms {
        let n = self.layers.len().max(1) as f64;
        let mut m = LossTerms::default();
        for t in &self.layers {
            m.cls += t.cls / n;
            m.bbox += t.bbox / n;
            m.giou += t.giou / n;
            m.total += t.total / n;
        }
        m
    }
}

/// Sum of absolute corner differences.
pub fn l1_box_loss(a: &Bbox, b: &Bbox) -> f64 {
    a.l1(b)
}

pub fn giou_loss(a: &Bbox, b: &Bbox) -> f64 {
    1.0 - giou(a, b)
}

/// One-hot targets over `C + 1` classes; `None` targets background (last).
fn one_hot(targets: &[Option<usize>], n_classes: usize, gt_classes: &[usize]) -> Vec<f64> {
    let c1 = n_classes + 1;
    let mut t = vec![0.0; targets.len() * c1];
    for (i, g) in targets.iter().enumerate() {
        let k = g.map_or(n_classes, |j| gt_classes[j]);
        t[i * c1 + k] = 1.0;
    }
    t
}

/// Per-class sigmoid focal loss summed over classes and averaged over rows.
/// `classes[i]` is the target class of row `i`, background being `C`.
pub fn focal_loss(tape: &mut Tape, logits: Var, classes: &[usize], focal: Focal) -> Result<Var> {
    let c1 = tape.shape(logits)[1];
    let mut t = vec![0.0; classes.len() * c1];
    for (i, &k) in classes.iter().enumerate() {
        t[i * c1 + k] = 1.0;
    }
    let s = tape.sigmoid_focal(logits, &t, focal.alpha, focal.gamma)?;
    Ok(tape.scale(s, 1.0 / classes.len().max(1) as f64))
}

/// Matches every layer independently and averages the weighted losses. The
/// assignment is computed from current values and is not differentiated.
pub fn composite_loss(
    tape: &mut Tape,
    layers: &[LayerOutput],
    gt_classes: &[usize],
    gt_boxes: &[Bbox],
    cfg: LossConfig,
) -> Result<CompositeLoss> {
    composite_loss_with(tape, layers, gt_classes, gt_boxes, cfg, None)
}

/// [`composite_loss`] with optional per-layer assignments used instead of
/// fresh matches.
pub fn composite_loss_with(
    tape: &mut Tape,
    layers: &[LayerOutput],
    gt_classes: &[usize],
    gt_boxes: &[Bbox],
    cfg: LossConfig,
    fixed: Option<&[Assignment]>,
) -> Result<CompositeLoss> {
    if let Some(f) = fixed {
        if f.len() != layers.len() {
            return Err(crate::Error::Invalid(format!("{} assignments for {} layers", f.len(), layers.len())));
        }
    }
    let w = cfg.weights;
    let g = gt_classes.len();
    let norm = 1.0 / g.max(1) as f64;
    let mut sum: Option<Var> = None;
    let mut terms = Vec::with_capacity(layers.len());
    let mut assignments = Vec::with_capacity(layers.len());
    for (li, l) in layers.iter().enumerate() {
        let n = tape.shape(l.logits)[0];
        let n_classes = tape.shape(l.logits)[1] - 1;
        let a = match fixed {
            Some(f) => f[li].clone(),
            None => {
                let cost = match_cost(
                    &tape.tensor(l.logits),
                    &tape.tensor(l.boxes),
                    gt_classes,
                    gt_boxes,
                    w,
                    cfg.focal,
                )?;
                hungarian_assign(&cost)
            }
        };
        let targets = one_hot(&a.targets(n), n_classes, gt_classes);
        let cls = tape.sigmoid_focal(l.logits, &targets, cfg.focal.alpha, cfg.focal.gamma)?;
        let cls = tape.scale(cls, 1.0 / n as f64);
        let mut layer = tape.scale(cls, w.cls);
        let mut t = LossTerms {
            cls: tape.scalar(cls),
            ..LossTerms::default()
        };
        if !a.pairs.is_empty() {
            let preds: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
            let target: Vec<f64> = a.pairs.iter().flat_map(|p| gt_boxes[p.1].to_array()).collect();
            let matched = tape.gather_rows(l.boxes, &preds)?;
            let l1 = tape.l1_loss(matched, &target)?;
            let l1 = tape.scale(l1, norm);
            let gi = tape.giou_loss(matched, &target)?;
            let gi = tape.scale(gi, norm);
            t.bbox = tape.scalar(l1);
            t.giou = tape.scalar(gi);
            let l1w = tape.scale(l1, w.bbox);
            let giw = tape.scale(gi, w.giou);
            layer = tape.add(layer, l1w)?;
            layer = tape.add(layer, giw)?;
        }
        t.total = tape.scalar(layer);
        sum = Some(match sum {
            None => layer,
            Some(s) => tape.add(s, layer)?,
        });
        terms.push(t);
        assignments.push(a);
    }
    let total = match sum {
        Some(s) => tape.scale(s, 1.0 / layers.len() as f64),
        None => tape.constant(vec![1], vec![0.0])?,
    };
    Ok(CompositeLoss {
        total,
        layers: terms,
        assignments,
    })
}
