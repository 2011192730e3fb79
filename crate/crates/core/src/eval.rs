//! COCO-style average precision and recall.

use crate::error::{Error, Result};
use crate::geometry::{iou, Bbox};
use serde_json::json;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Bbox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: Bbox,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Box-area fraction below which an object is small.
    pub small_max: f64,
    /// Box-area fraction above which an object is large.
    pub large_min: f64,
    /// Highest-scoring detections kept per scene.
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            small_max: (32.0f64 / 640.0).powi(2),
            large_min: (96.0f64 / 640.0).powi(2),
            max_dets: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64, cfg: &EvalConfig) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < cfg.small_max,
            AreaRange::Medium => area >= cfg.small_max && area <= cfg.large_min,
            AreaRange::Large => area > cfg.large_min,
        }
    }
}

/// Metrics are `None` when no ground truth falls in their scope.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar100: Option<f64>,
    /// AP over the ten thresholds, per class.
    pub per_class: Vec<Option<f64>>,
}

impl EvalResult {
    pub fn metrics(&self) -> Vec<(String, Option<f64>)> {
        let mut m: Vec<(String, Option<f64>)> = [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_S", self.ap_s),
            ("AP_M", self.ap_m),
            ("AP_L", self.ap_l),
            ("AR100", self.ar100),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (c, v) in self.per_class.iter().enumerate() {
            m.push((format!("AP_class{c}"), *v));
        }
        m
    }

    /// One `name value` line per metric; absent metrics print `-`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.metrics() {
            match v {
                Some(v) => writeln!(s, "{k:<10} {v:.4}"),
                None => writeln!(s, "{k:<10} -"),
            }
            .expect("writing to a String");
        }
        s
    }

    /// One JSON object per metric.
    pub fn records(&self, config_hash: &str, seed: u64) -> Vec<serde_json::Value> {
        self.metrics()
            .into_iter()
            .map(|(k, v)| json!({"metric": k, "value": v, "config_hash": config_hash, "seed": seed}))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched to, or only compatible with, an out-of-scope object.
    Ignored,
}

/// Greedy matching of score-sorted detections: each takes the highest-IoU
/// unmatched ground truth with IoU ≥ `threshold`, ties to the lower index.
/// Non-ignored ground truths are preferred over ignored ones.
pub fn match_with_ignores(
    dets: &[Bbox],
    gts: &[Bbox],
    gt_ignored: &[bool],
    det_ignored: &[bool],
    threshold: f64,
) -> (Vec<MatchFlag>, Vec<Option<usize>>) {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    let mut matches = Vec::with_capacity(dets.len());
    for (d, db) in dets.iter().enumerate() {
        let best = |want_ignored: bool, taken: &[bool]| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in gts.iter().enumerate() {
                if taken[g] || gt_ignored[g] != want_ignored {
                    continue;
                }
                let v = iou(db, gb);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| g)
        };
        if let Some(g) = best(false, &taken) {
            taken[g] = true;
            flags.push(MatchFlag::TruePositive);
            matches.push(Some(g));
        } else if let Some(g) = best(true, &taken) {
            taken[g] = true;
            flags.push(MatchFlag::Ignored);
            matches.push(Some(g));
        } else {
            flags.push(if det_ignored[d] { MatchFlag::Ignored } else { MatchFlag::FalsePositive });
            matches.push(None);
        }
    }
    (flags, matches)
}

/// [`match_with_ignores`] with every object in scope: TP flags and the matched
/// ground truth per detection.
pub fn greedy_match_at_iou(dets: &[Bbox], gts: &[Bbox], threshold: f64) -> (Vec<bool>, Vec<Option<usize>>) {
    let (f, m) = match_with_ignores(dets, gts, &vec![false; gts.len()], &vec![false; dets.len()], threshold);
    (f.into_iter().map(|f| f == MatchFlag::TruePositive).collect(), m)
}

/// 101-point interpolated AP of a score-ordered TP/FP sequence.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &x in tp {
        if x {
            t += 1;
        } else {
            f += 1;
        }
        precision.push(t as f64 / (t + f) as f64);
        recall.push(t as f64 / n_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let sum: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(sum / 101.0)
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-threshold AP and recall of one class over all scenes.
fn class_curves(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    range: AreaRange,
    cfg: &EvalConfig,
) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let ths = iou_thresholds();
    let mut scored: Vec<Vec<(f64, MatchFlag)>> = vec![Vec::new(); ths.len()];
    let mut n_gt = 0;
    for (sd, sg) in dets.iter().zip(gts) {
        let g: Vec<Bbox> = sg.iter().filter(|g| g.class_id == class_id).map(|g| g.bbox).collect();
        let g_ign: Vec<bool> = g.iter().map(|b| !range.contains(b.area(), cfg)).collect();
        n_gt += g_ign.iter().filter(|&&x| !x).count();
        let mut d: Vec<&Detection> = sd.iter().filter(|d| d.class_id == class_id).collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        let db: Vec<Bbox> = d.iter().map(|d| d.bbox).collect();
        let d_ign: Vec<bool> = db.iter().map(|b| !range.contains(b.area(), cfg)).collect();
        for (k, &t) in ths.iter().enumerate() {
            let (flags, _) = match_with_ignores(&db, &g, &g_ign, &d_ign, t);
            scored[k].extend(d.iter().zip(flags).map(|(d, f)| (d.score, f)));
        }
    }
    let mut aps = Vec::with_capacity(ths.len());
    let mut recalls = Vec::with_capacity(ths.len());
    for mut s in scored {
        s.sort_by(|a, b| b.0.total_cmp(&a.0));
        let tp: Vec<bool> = s
            .iter()
            .filter(|x| x.1 != MatchFlag::Ignored)
            .map(|x| x.1 == MatchFlag::TruePositive)
            .collect();
        aps.push(average_precision(&tp, n_gt));
        recalls.push((n_gt > 0).then(|| tp.iter().filter(|&&x| x).count() as f64 / n_gt as f64));
    }
    (aps, recalls)
}

/// Keeps the `max_dets` highest-scoring detections of every scene.
fn top_detections(dets: &[Vec<Detection>], max_dets: usize) -> Vec<Vec<Detection>> {
    dets.iter()
        .map(|d| {
            let mut d = d.clone();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(max_dets);
            d
        })
        .collect()
}

/// AP family and AR@`max_dets` over scenes, averaged over classes that have
/// ground truth in scope.
pub fn coco_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    n_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} detection lists for {} scenes",
            dets.len(),
            gts.len()
        )));
    }
    let bad_class = dets.iter().flatten().map(|d| d.class_id).chain(gts.iter().flatten().map(|g| g.class_id));
    if let Some(c) = bad_class.into_iter().find(|&c| c >= n_classes) {
        return Err(Error::Invalid(format!("class {c} out of range")));
    }
    if let Some(d) = dets.iter().flatten().find(|d| !d.score.is_finite()) {
        return Err(Error::NonFinite(format!("detection score {}", d.score)));
    }
    let dets = top_detections(dets, cfg.max_dets);
    let curves = |range| -> Vec<(Vec<Option<f64>>, Vec<Option<f64>>)> {
        (0..n_classes).map(|c| class_curves(&dets, gts, c, range, cfg)).collect()
    };
    let all = curves(AreaRange::All);
    let at = |k: usize| mean(all.iter().map(|(a, _)| a[k]));
    let overall = |c: &[(Vec<Option<f64>>, Vec<Option<f64>>)]| mean(c.iter().flat_map(|(a, _)| a.iter().copied()));
    Ok(EvalResult {
        ap: overall(&all),
        ap50: at(0),
        ap75: at(5),
        ap_s: overall(&curves(AreaRange::Small)),
        ap_m: overall(&curves(AreaRange::Medium)),
        ap_l: overall(&curves(AreaRange::Large)),
        ar100: mean(all.iter().flat_map(|(_, r)| r.iter().copied())),
        per_class: all.iter().map(|(a, _)| mean(a.iter().copied())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_drawn_curve() {
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
    }

    #[test]
    fn duplicates_become_false_positives() {
        let g = Bbox::new(0.1, 0.1, 0.4, 0.4);
        let (tp, m) = greedy_match_at_iou(&[g, Bbox::new(0.1, 0.1, 0.4, 0.39)], &[g], 0.5);
        assert_eq!(tp, vec![true, false]);
        assert_eq!(m, vec![Some(0), None]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = Bbox::new(0.1, 0.1, 0.4, 0.4);
        let (_, m) = greedy_match_at_iou(&[g], &[g, g], 0.5);
        assert_eq!(m, vec![Some(0)]);
    }
}
