use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::io;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

const MAGIC: &str = "dualstream-checkpoint 1";

/// A saved model together with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: usize,
    pub model: Model,
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

impl Checkpoint {
    /// Writes `manifest.txt`, `config.txt` and one tensor file per
    /// parameter into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut m = String::new();
        let c = &self.config;
        writeln!(m, "{MAGIC}").expect("writing to a String");
        writeln!(m, "config_hash {}", c.hash()).expect("writing to a String");
        writeln!(m, "seed {}", c.train.seed).expect("writing to a String");
        writeln!(m, "step {}", self.step).expect("writing to a String");
        writeln!(m, "variant {} {} {}", c.model.strategy, c.model.stream, c.model.fusion).expect("writing to a String");
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            let file = format!("p{i:03}.dkt");
            io::write(&dir.join(&file), t)?;
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(m, "tensor {name} {file} {}", shape.join("x")).expect("writing to a String");
        }
        fs::write(dir.join("config.txt"), c.to_text())?;
        fs::write(dir.join("manifest.txt"), m)?;
        Ok(())
    }

    /// Reads a checkpoint, checking that the stored configuration still
    /// hashes to the recorded value and that every tensor matches the
    /// architecture it describes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let config = ExperimentConfig::parse(&fs::read_to_string(dir.join("config.txt"))?)?;
        let mut lines = manifest.lines().enumerate().map(|(i, l)| (i + 1, l));
        if lines.next().map(|l| l.1) != Some(MAGIC) {
            return Err(bad(1, "not a checkpoint manifest"));
        }
        let mut model = Model::new(config.model.clone(), config.train.seed)?;
        let mut hash = None;
        let mut step = None;
        let mut loaded = 0;
        for (line, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f.as_slice() {
                ["config_hash", h] => hash = Some(h.to_string()),
                ["step", s] => step = Some(s.parse().map_err(|_| bad(line, "bad step"))?),
                ["seed", s] => {
                    if *s != config.train.seed.to_string() {
                        return Err(bad(line, "seed differs from config.txt"));
                    }
                }
                ["variant", ..] => {}
                ["tensor", name, file, shape] => {
                    let t = io::read(&dir.join(file))?;
                    let want = model
                        .params
                        .get_mut(name)
                        .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
                    let got: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                    if got.join("x") != *shape || t.shape() != want.shape() {
                        return Err(Error::Invalid(format!(
                            "tensor `{name}` has shape {:?}, expected {:?}",
                            t.shape(),
                            want.shape()
                        )));
                    }
                    want.values_mut().copy_from_slice(t.values());
                    loaded += 1;
                }
                _ => return Err(bad(line, format!("unexpected record `{l}`"))),
            }
        }
        if hash.as_deref() != Some(config.hash().as_str()) {
            return Err(Error::Config("checkpoint config hash does not match config.txt".into()));
        }
        if loaded != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {loaded} of {} parameters",
                model.params.len()
            )));
        }
        Ok(Self {
            config,
            step: step.ok_or_else(|| bad(0, "missing step"))?,
            model,
        })
    }
}
