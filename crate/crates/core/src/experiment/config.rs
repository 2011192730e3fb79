use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::query::StubConfig;
use crate::scene::DatasetSpec;
use crate::tensor::AdamW;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup: usize,
    /// Step after which the learning rate is divided by 10; 0 disables.
    pub lr_drop: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip: 1.0,
            warmup: 100,
            lr_drop: 1500,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self, step: usize) -> AdamW {
        let mut lr = self.lr;
        if self.warmup > 0 && step < self.warmup {
            lr *= (step + 1) as f64 / self.warmup as f64;
        }
        if self.lr_drop > 0 && step >= self.lr_drop {
            lr /= 10.0;
        }
        AdamW {
            lr,
            betas: (self.beta1, self.beta2),
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Everything that determines an experiment. `model.canvas` and
/// `model.n_classes` always mirror the data section.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub stub: StubConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    /// The reference run.
    fn default() -> Self {
        let mut loss = LossConfig::default();
        loss.weights.cls = 8.0;
        Self {
            data: DatasetSpec::default(),
            stub: StubConfig::default(),
            model: ModelConfig::default(),
            loss,
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("line {line}: bad value `{v}` for `{key}`")))
}

macro_rules! config_fields {
    ($($sec:literal $key:literal => $($path:ident).+;)*) => {
        impl ExperimentConfig {
            fn set_field(&mut self, sec: &str, key: &str, v: &str, line: usize) -> Result<bool> {
                match (sec, key) {
                    $(($sec, $key) => self.$($path).+ = parse_value(v, line, key)?,)*
                    _ => return Ok(false),
                }
                Ok(true)
            }

            fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
                vec![$(($sec, $key, self.$($path).+.to_string()),)*]
            }
        }
    };
}

config_fields! {
    "data" "n_scenes" => data.n_scenes;
    "data" "n_classes" => data.n_classes;
    "data" "min_objects" => data.min_objects;
    "data" "max_objects" => data.max_objects;
    "data" "min_size" => data.min_size;
    "data" "max_size" => data.max_size;
    "data" "occlusion_rate" => data.occlusion_rate;
    "data" "min_vertices" => data.min_vertices;
    "data" "max_vertices" => data.max_vertices;
    "data" "canvas" => data.canvas;
    "data" "seed" => data.seed;
    "stub" "p_detect" => stub.p_detect;
    "stub" "feature_noise" => stub.feature_noise;
    "stub" "distractor_rate" => stub.distractor_rate;
    "stub" "polygon_jitter" => stub.polygon_jitter;
    "stub" "mask_noise" => stub.mask_noise;
    "model" "d_f" => model.query.d_f;
    "model" "d_app" => model.query.d_app;
    "model" "d_pos" => model.query.d_pos;
    "model" "heads" => model.heads;
    "model" "enc_layers" => model.enc_layers;
    "model" "dec_layers" => model.dec_layers;
    "model" "ffn_mult" => model.ffn_mult;
    "model" "patch" => model.patch;
    "model" "n_freqs" => model.n_freqs;
    "model" "cap_app" => model.query.cap_app;
    "model" "cap_pos" => model.query.cap_pos;
    "model" "n_random" => model.query.n_random;
    "model" "vertices" => model.query.vertices;
    "model" "epsilon" => model.query.epsilon;
    "model" "appearance" => model.query.use_appearance;
    "model" "positional" => model.query.use_positional;
    "model" "random" => model.query.use_random;
    "model" "strategy" => model.strategy;
    "model" "stream" => model.stream;
    "model" "fusion" => model.fusion;
    "loss" "cls" => loss.weights.cls;
    "loss" "bbox" => loss.weights.bbox;
    "loss" "giou" => loss.weights.giou;
    "loss" "alpha" => loss.focal.alpha;
    "loss" "gamma" => loss.focal.gamma;
    "train" "steps" => train.steps;
    "train" "batch" => train.batch;
    "train" "lr" => train.lr;
    "train" "weight_decay" => train.weight_decay;
    "train" "beta1" => train.beta1;
    "train" "beta2" => train.beta2;
    "train" "clip" => train.clip;
    "train" "warmup" => train.warmup;
    "train" "lr_drop" => train.lr_drop;
    "train" "eval_every" => train.eval_every;
    "train" "seed" => train.seed;
}

impl ExperimentConfig {
    /// Parses `key = value` lines under `[section]` headers on top of the
    /// defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(s) = l.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let s = s.trim();
                if !["data", "stub", "model", "loss", "train"].contains(&s) {
                    return Err(Error::Config(format!("line {line}: unknown section [{s}]")));
                }
                section = Some(s.to_string());
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (k, v) = (k.trim(), v.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {line}: `{k}` outside a section")))?;
            if !seen.insert((sec.to_string(), k.to_string())) {
                return Err(Error::Config(format!("line {line}: duplicate key `{sec}.{k}`")));
            }
            if !cfg.set_field(sec, k, v, line)? {
                return Err(Error::Config(format!("line {line}: unknown key `{sec}.{k}`")));
            }
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn sync(&mut self) {
        self.model.canvas = self.data.canvas;
        self.model.n_classes = self.data.n_classes;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.canvas != self.data.canvas || self.model.n_classes != self.data.n_classes {
            return Err(Error::Config("model canvas/classes differ from the data section".into()));
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("train: batch > 0, lr > 0 and betas in [0,1) required".into()));
        }
        let s = &self.stub;
        for (name, v) in [("p_detect", s.p_detect), ("mask_noise", s.mask_noise)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("stub.{name} must be in [0,1]")));
            }
        }
        Ok(())
    }

    /// Canonical rendering: every field, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (sec, key, v) in self.entries() {
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{sec}]").expect("writing to a String");
                current = sec;
            }
            writeln!(out, "{key} = {v}").expect("writing to a String");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`ExperimentConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// `(section.key, left, right)` for every field that differs.
    pub fn diff(&self, other: &Self) -> Vec<(String, String, String)> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.2 != b.2)
            .map(|(a, b)| (format!("{}.{}", a.0, a.1), a.2, b.2))
            .collect()
    }

    pub fn with_data(mut self, data: DatasetSpec) -> Self {
        self.data = data;
        self.sync();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let t = "[model]\nstream = single\n[train]\nsteps = 3 # short\n";
        let p = ExperimentConfig::parse(t).unwrap();
        assert_eq!(p.train.steps, 3);
        assert_eq!(p.diff(&back).len(), 2);
        assert_ne!(p.hash(), back.hash());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in [
            "[model]\nstreem = dual\n",
            "[modle]\n",
            "steps = 1\n",
            "[train]\nsteps = many\n",
            "[train]\nsteps = 1\nsteps = 2\n",
            "[model]\nappearance = false\npositional = false\nrandom = false\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
