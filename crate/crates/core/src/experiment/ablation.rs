use super::config::ExperimentConfig;
use super::train::{metrics_json, train};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::model::{Fusion, Strategy, Stream};
use crate::scene::Dataset;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Queries,
    Refpoints,
    Stream,
    Fusion,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Queries, Axis::Refpoints, Axis::Stream, Axis::Fusion];

    /// Config keys a variant on this axis may change.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Axis::Queries => &["model.appearance", "model.positional", "model.random"],
            Axis::Refpoints => &["model.strategy"],
            Axis::Stream => &["model.stream"],
            Axis::Fusion => &["model.fusion"],
        }
    }

    /// `(higher, lower)` row pairs expected to hold, by row index.
    pub fn expected_order(self) -> &'static [(usize, usize)] {
        match self {
            Axis::Queries => &[(3, 1), (3, 2), (1, 0), (2, 0)],
            Axis::Refpoints => &[(2, 1), (1, 0)],
            Axis::Stream => &[(1, 0)],
            Axis::Fusion => &[(2, 1), (1, 0)],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Queries => "queries",
            Axis::Refpoints => "refpoints",
            Axis::Stream => "stream",
            Axis::Fusion => "fusion",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

/// The rows of one ablation table, in the published row order. Every
/// variant differs from `base` only in the keys of `axis`.
pub fn variants(base: &ExperimentConfig, axis: Axis) -> Result<Vec<Variant>> {
    let with = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Variant {
            name: name.to_string(),
            config: c,
        }
    };
    let out = match axis {
        Axis::Queries => {
            let set = |a: bool, p: bool| {
                move |c: &mut ExperimentConfig| {
                    c.model.query.use_appearance = a;
                    c.model.query.use_positional = p;
                    c.model.query.use_random = true;
                }
            };
            vec![
                with("RQ only", &set(false, false)),
                with("G-DINO+RQ", &set(true, false)),
                with("SAM+RQ", &set(false, true)),
                with("all", &set(true, true)),
            ]
        }
        Axis::Refpoints => Strategy::ALL
            .iter()
            .map(|&s| with(&s.to_string(), &|c| c.model.strategy = s))
            .collect(),
        Axis::Stream => Stream::ALL
            .iter()
            .map(|&s| with(&s.to_string(), &|c| c.model.stream = s))
            .collect(),
        Axis::Fusion => Fusion::ALL
            .iter()
            .map(|&s| with(&s.to_string(), &|c| c.model.fusion = s))
            .collect(),
    };
    for v in &out {
        v.config.validate()?;
        if let Some((key, _, _)) = base.diff(&v.config).into_iter().find(|d| !axis.keys().contains(&d.0.as_str())) {
            return Err(Error::Config(format!("variant `{}` changes `{key}` outside the {axis} axis", v.name)));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedScore {
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    pub scores: Vec<SeedScore>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&SeedScore) -> f64) -> f64 {
        self.scores.iter().map(f).sum::<f64>() / self.scores.len().max(1) as f64
    }

    pub fn mean_ap(&self) -> f64 {
        self.mean(|s| s.ap)
    }

    pub fn mean_ap50(&self) -> f64 {
        self.mean(|s| s.ap50)
    }

    pub fn mean_ap75(&self) -> f64 {
        self.mean(|s| s.ap75)
    }
}

/// One expected ordering: per-seed AP wins of `higher` over `lower`.
#[derive(Clone, Debug)]
pub struct OrderingCheck {
    pub higher: String,
    pub lower: String,
    pub wins: usize,
    pub seeds: usize,
    pub mean_delta_ap: f64,
}

impl OrderingCheck {
    /// Majority vote over seeds; ties count for `higher`.
    pub fn holds(&self) -> bool {
        2 * self.wins > self.seeds
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn orderings(&self) -> Vec<OrderingCheck> {
        self.axis
            .expected_order()
            .iter()
            .map(|&(h, l)| {
                let (hi, lo) = (&self.rows[h], &self.rows[l]);
                let deltas: Vec<f64> = hi.scores.iter().zip(&lo.scores).map(|(a, b)| a.ap - b.ap).collect();
                OrderingCheck {
                    higher: hi.name.clone(),
                    lower: lo.name.clone(),
                    wins: deltas.iter().filter(|&&d| d >= 0.0).count(),
                    seeds: deltas.len(),
                    mean_delta_ap: deltas.iter().sum::<f64>() / deltas.len().max(1) as f64,
                }
            })
            .collect()
    }

    /// Mean AP difference `row j − row i` for every pair `i < j`.
    pub fn pairwise_deltas(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (i, a) in self.rows.iter().enumerate() {
            for b in &self.rows[i + 1..] {
                out.push((b.name.clone(), a.name.clone(), b.mean_ap() - a.mean_ap()));
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} axis", self.axis).expect("writing to a String");
        writeln!(s, "{:<18} {:>7} {:>7} {:>7}", "variant", "AP", "AP50", "AP75").expect("writing to a String");
        for r in &self.rows {
            writeln!(s, "{:<18} {:>7.4} {:>7.4} {:>7.4}", r.name, r.mean_ap(), r.mean_ap50(), r.mean_ap75())
                .expect("writing to a String");
        }
        for (a, b, d) in self.pairwise_deltas() {
            writeln!(s, "  {a} - {b}: {d:+.4} AP").expect("writing to a String");
        }
        for o in self.orderings() {
            let mark = if o.holds() { "ok" } else { "VIOLATED" };
            writeln!(
                s,
                "  expect {} >= {}: {}/{} seeds, mean dAP {:+.4} {mark}",
                o.higher, o.lower, o.wins, o.seeds, o.mean_delta_ap
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn to_json(&self) -> Value {
        json!({
            "axis": self.axis.to_string(),
            "rows": self.rows.iter().map(|r| json!({
                "variant": r.name,
                "config_hash": r.config_hash,
                "mean": {"AP": r.mean_ap(), "AP50": r.mean_ap50(), "AP75": r.mean_ap75()},
                "seeds": r.scores.iter().map(|s| json!({"seed": s.seed, "AP": s.ap, "AP50": s.ap50, "AP75": s.ap75})).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "deltas": self.pairwise_deltas().iter().map(|(a, b, d)| json!({"higher": a, "lower": b, "delta_AP": d})).collect::<Vec<_>>(),
            "orderings": self.orderings().iter().map(|o| json!({
                "higher": o.higher, "lower": o.lower, "wins": o.wins, "seeds": o.seeds,
                "mean_delta_AP": o.mean_delta_ap, "holds": o.holds(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Trains every variant of every axis once per seed. Configurations shared
/// between axes (the base row) are trained once.
pub fn run_ablation(
    base: &ExperimentConfig,
    axes: &[Axis],
    seeds: &[u64],
    train_set: &Dataset,
    val_set: &Dataset,
    log: &mut dyn FnMut(Value) -> Result<()>,
) -> Result<Vec<AblationResult>> {
    let mut done: HashMap<String, EvalResult> = HashMap::new();
    let mut results = Vec::with_capacity(axes.len());
    for &axis in axes {
        let mut rows = Vec::new();
        for v in variants(base, axis)? {
            let mut scores = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut cfg = v.config.clone();
                cfg.train.seed = seed;
                let hash = cfg.hash();
                if !done.contains_key(&hash) {
                    let out = train(&cfg, train_set, val_set, &mut |_| Ok(()))?;
                    log(json!({
                        "kind": "ablation", "axis": axis.to_string(), "variant": v.name,
                        "metrics": metrics_json(&out.final_eval), "config_hash": hash, "seed": seed,
                    }))?;
                    done.insert(hash.clone(), out.final_eval);
                }
                let r = &done[&hash];
                scores.push(SeedScore {
                    seed,
                    ap: r.ap.unwrap_or(0.0),
                    ap50: r.ap50.unwrap_or(0.0),
                    ap75: r.ap75.unwrap_or(0.0),
                });
            }
            rows.push(AblationRow {
                name: v.name,
                config_hash: v.config.hash(),
                scores,
            });
        }
        results.push(AblationResult { axis, rows });
    }
    Ok(results)
}
