use clap::{Args, Parser, Subcommand};
use dualstream_core::eval::{coco_map, Detection, EvalConfig, EvalResult};
use dualstream_core::experiment::{
    combinations, evaluate, prepare, run_ablation, run_gradcheck, train, Axis, Checkpoint,
    ExperimentConfig,
};
use dualstream_core::model::ModelConfig;
use dualstream_core::scene::Dataset;
use dualstream_core::tensor::Fault;
use dualstream_core::Error;
use serde_json::Value;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dualstream", version, about = "Multi-modal-query detector: data, training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val scene files described by a config.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory for train.txt and val.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoints plus a records file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.txt and val.txt.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint (or a self-test detector) on a scene file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene file, or a directory whose val.txt is used.
        #[arg(long)]
        data: PathBuf,
        /// Where to write one JSON record per metric.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit the ground truth as detections.
        #[arg(long, conflicts_with = "empty")]
        oracle: bool,
        /// Emit no detections.
        #[arg(long)]
        empty: bool,
    },
    /// Train every variant of one ablation axis (or all) over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// queries, refpoints, stream, fusion or all.
        #[arg(long, default_value = "all")]
        axis: String,
        /// Directory holding train.txt and val.txt; generated from the
        /// config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient check of the whole model at toy size.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check the parameter-free `none` fusion mode.
        #[arg(long)]
        all_fusions: bool,
        /// Negate the layer-norm backward pass; the check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Parse { .. } => Failure::Io(e.to_string()),
            Error::Config(_) | Error::UnknownKind(_) | Error::Invalid(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Appends one JSON record per line, flushing each.
struct Records(BufWriter<File>);

impl Records {
    fn create(path: &Path) -> Result<Self, Error> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn push(&mut self, v: &Value) -> Result<(), Error> {
        writeln!(self.0, "{v}")?;
        self.0.flush()?;
        Ok(())
    }
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Outcome {
    match paths.iter().find(|p| p.exists()) {
        Some(p) if !force => Err(Failure::Usage(format!("{} exists; pass --force to overwrite", p.display()))),
        _ => Ok(()),
    }
}

fn read_split(dir: &Path, name: &str) -> Result<Dataset, Error> {
    Dataset::read(&dir.join(name))
}

fn generate(common: &Common, out: &Path, force: bool) -> Outcome {
    let cfg = common.load()?;
    let (train_p, val_p) = (out.join("train.txt"), out.join("val.txt"));
    refuse_existing(&[train_p.clone(), val_p.clone()], force)?;
    fs::create_dir_all(out)?;
    let (tr, va) = Dataset::generate(&cfg.data)?;
    tr.write(&train_p)?;
    va.write(&val_p)?;
    let objects = |d: &Dataset| d.scenes.iter().map(|s| s.objects.len()).sum::<usize>();
    println!("train {} scenes, {} objects", tr.scenes.len(), objects(&tr));
    println!("val {} scenes, {} objects", va.scenes.len(), objects(&va));
    println!("config_hash {} seed {}", cfg.hash(), cfg.data.seed);
    Ok(())
}

fn train_cmd(common: &Common, data: &Path, out: &Path, force: bool) -> Outcome {
    let cfg = common.load()?;
    let tr = read_split(data, "train.txt")?;
    let va = read_split(data, "val.txt")?;
    let metrics = out.join("metrics.jsonl");
    refuse_existing(&[metrics.clone()], force)?;
    fs::create_dir_all(out)?;
    let mut records = Records::create(&metrics)?;
    let hash = cfg.hash();
    let result = train(&cfg, &tr, &va, &mut |v| {
        if v["kind"] == "eval" {
            eprintln!("step {:>5} AP {} AP50 {}", v["step"], v["metrics"]["AP"], v["metrics"]["AP50"]);
        }
        records.push(&v)
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::NonFinite(_)) => {
            eprintln!("offending batch written to {}", metrics.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    Checkpoint {
        config: cfg.clone(),
        step: cfg.train.steps,
        model: outcome.model.clone(),
    }
    .save(&out.join("final"))?;
    let (best_step, best_ap) = match &outcome.best {
        Some((step, ap, model)) => {
            Checkpoint {
                config: cfg.clone(),
                step: *step,
                model: model.clone(),
            }
            .save(&out.join("best"))?;
            (*step, *ap)
        }
        None => (0, outcome.final_eval.ap.unwrap_or(0.0)),
    };
    let summary = format!(
        "config_hash {hash}\nseed {}\nsteps {}\nbest_step {best_step}\nbest_ap {best_ap}\nwall_seconds {:.3}\n",
        cfg.train.seed, cfg.train.steps, outcome.wall_seconds
    );
    fs::write(out.join("summary.txt"), &summary)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    println!("{}", outcome.final_eval.to_table());
    print!("{summary}");
    Ok(())
}

fn eval_cmd(
    common: &Common,
    checkpoint: Option<&Path>,
    data: &Path,
    out: Option<&Path>,
    oracle: bool,
    empty: bool,
) -> Outcome {
    let data = if data.is_dir() { data.join("val.txt") } else { data.to_path_buf() };
    let scenes = Dataset::read(&data)?;
    let (cfg, result) = if oracle || empty {
        let cfg = common.load()?;
        let gts: Vec<_> = scenes
            .scenes
            .iter()
            .map(|s| {
                s.classes()
                    .into_iter()
                    .zip(s.boxes())
                    .map(|(class_id, bbox)| dualstream_core::eval::GroundTruth { class_id, bbox })
                    .collect::<Vec<_>>()
            })
            .collect();
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                if empty {
                    Vec::new()
                } else {
                    g.iter()
                        .map(|g| Detection {
                            class_id: g.class_id,
                            score: 1.0,
                            bbox: g.bbox,
                        })
                        .collect()
                }
            })
            .collect();
        let r = coco_map(&dets, &gts, scenes.spec.n_classes, &EvalConfig::default())?;
        (cfg, r)
    } else {
        let dir = checkpoint.ok_or_else(|| Failure::Usage("--checkpoint is required unless --oracle or --empty".into()))?;
        let ck = Checkpoint::load(dir)?;
        if common.config.is_some() || common.seed.is_some() || common.steps.is_some() {
            let want = common.load()?;
            if want.hash() != ck.config.hash() {
                let diff: Vec<String> = want.diff(&ck.config).into_iter().map(|d| d.0).collect();
                return Err(Failure::Usage(format!(
                    "config hash {} does not match checkpoint {} (differs in {})",
                    want.hash(),
                    ck.config.hash(),
                    diff.join(", ")
                )));
            }
        }
        if scenes.spec != ck.config.data {
            return Err(Failure::Usage("scene file was generated from a different data section".into()));
        }
        let prepared = prepare(&ck.config, &ck.model, &scenes, 1)?;
        let r: EvalResult = evaluate(&ck.model, &prepared)?;
        (ck.config, r)
    };
    println!("{}", result.to_table());
    if let Some(out) = out {
        let mut records = Records::create(out)?;
        for r in result.records(&cfg.hash(), cfg.train.seed) {
            records.push(&r)?;
        }
    }
    Ok(())
}

fn ablate_cmd(common: &Common, axis: &str, data: Option<&Path>, out: &Path, seeds: &[u64], force: bool) -> Outcome {
    let cfg = common.load()?;
    let axes: Vec<Axis> = if axis == "all" {
        Axis::ALL.to_vec()
    } else {
        vec![axis.parse().map_err(|_| Failure::Usage(format!("unknown axis `{axis}`")))?]
    };
    if seeds.is_empty() {
        return Err(Failure::Usage("at least one seed is required".into()));
    }
    let (tr, va) = match data {
        Some(d) => (read_split(d, "train.txt")?, read_split(d, "val.txt")?),
        None => Dataset::generate(&cfg.data)?,
    };
    let records_path = out.join("records.jsonl");
    refuse_existing(&[records_path.clone()], force)?;
    fs::create_dir_all(out)?;
    let mut records = Records::create(&records_path)?;
    let results = run_ablation(&cfg, &axes, seeds, &tr, &va, &mut |v| {
        eprintln!("{} {} seed {}: AP {}", v["axis"], v["variant"], v["seed"], v["metrics"]["AP"]);
        records.push(&v)
    })?;
    let mut table = String::new();
    for r in &results {
        table.push_str(&r.to_table());
        table.push('\n');
    }
    let json = serde_json::json!({
        "config_hash": cfg.hash(),
        "seeds": seeds,
        "axes": results.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
    });
    fs::write(out.join("ablation.txt"), &table)?;
    fs::write(out.join("ablation.json"), format!("{json:#}\n"))?;
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(seed: u64, all_fusions: bool, inject_fault: bool) -> Outcome {
    let fault = inject_fault.then_some(Fault::NegateLayerNormGrad);
    let reports = run_gradcheck(&ModelConfig::toy(), &combinations(all_fusions), seed, fault)?;
    let mut failed = 0;
    for r in &reports {
        println!("{}", r.summary());
        failed += usize::from(!r.report.passed());
    }
    println!("{} combinations, {failed} failed", reports.len());
    if failed > 0 {
        return Err(Failure::Numerical(format!("gradient check failed for {failed} combinations")));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate { common, out, force } => generate(&common, &out, force),
        Command::Train {
            common,
            data,
            out,
            force,
        } => train_cmd(&common, &data, &out, force),
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            oracle,
            empty,
        } => eval_cmd(&common, checkpoint.as_deref(), &data, out.as_deref(), oracle, empty),
        Command::Ablate {
            common,
            axis,
            data,
            out,
            seeds,
            force,
        } => ablate_cmd(&common, &axis, data.as_deref(), &out, &seeds, force),
        Command::Gradcheck {
            seed,
            all_fusions,
            inject_fault,
        } => gradcheck_cmd(seed, all_fusions, inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind, msg) = match f {
                Failure::Usage(m) => (1, "error", m),
                Failure::Numerical(m) => (2, "numerical failure", m),
                Failure::Io(m) => (3, "i/o error", m),
            };
            eprintln!("{kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
