use crate::error::Result;
use crate::loss::{composite_loss, composite_loss_with, LossConfig};
use crate::model::{ForwardOptions, Fusion, Model, ModelConfig, Strategy, Stream};
use crate::query::{QueryInputs, StubConfig};
use crate::scene::{class_prototypes, generate_scene, DatasetSpec};
use crate::tensor::{grad_check, Fault, GradCheckReport, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::time::Instant;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ComboReport {
    pub strategy: Strategy,
    pub stream: Stream,
    pub fusion: Fusion,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl ComboReport {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.strategy, self.stream, self.fusion)
    }

    pub fn summary(&self) -> String {
        let status = if self.report.passed() { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} {:<30} params {:>3}  max rel err {:.2e}  {:.1}s",
            self.label(),
            self.report.params.len(),
            self.report.max_rel_error(),
            self.seconds
        );
        for f in self.report.failures() {
            s.push_str(&format!("\n     {} rel {:.2e} abs {:.2e}", f.name, f.max_rel_error, f.max_abs_error));
        }
        s
    }
}

/// Strategy × stream × fusion; without `none` unless asked, since that mode
/// has no fusion parameters.
pub fn combinations(with_none: bool) -> Vec<(Strategy, Stream, Fusion)> {
    let mut out = Vec::new();
    for &s in Strategy::ALL.iter() {
        for &st in Stream::ALL.iter() {
            for &f in Fusion::ALL.iter() {
                if with_none || f != Fusion::None {
                    out.push((s, st, f));
                }
            }
        }
    }
    out
}

/// Checks every parameter of a model at `cfg` dims on one synthetic scene.
/// Parameters get Gaussian noise first so zero-initialised layers carry
/// signal, and the matching is frozen at the unperturbed values.
pub fn gradcheck_model(cfg: &ModelConfig, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let noise = Normal::new(0.0, 0.2).expect("valid sigma");
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for n in &names {
        for v in model.params.get_mut(n).expect("listed").values_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let spec = DatasetSpec {
        canvas: cfg.canvas,
        n_classes: cfg.n_classes,
        min_size: 0.3,
        max_size: 0.45,
        max_objects: 2,
        ..DatasetSpec::default()
    };
    let scene = generate_scene(&spec, seed)?;
    let protos = class_prototypes(cfg.n_classes, cfg.query.d_f, seed)?;
    let vocab: Vec<Vec<f64>> = (0..cfg.n_classes).map(|i| protos.row(i).to_vec()).collect();
    let inputs = QueryInputs::from_scene(&scene, &vocab, &cfg.query, &StubConfig::default(), seed)?;
    let image = model.image_tensors(&scene)?;
    let (classes, boxes) = (scene.classes(), scene.boxes());
    let loss_cfg = LossConfig::default();

    let mut tape = Tape::new();
    let out = model.forward_pass(&mut tape, &image, &inputs, ForwardOptions::default())?;
    let frozen = composite_loss(&mut tape, &out.layers, &classes, &boxes, loss_cfg)?.assignments;

    grad_check(
        &model.params,
        |store, tape| {
            if let Some(f) = fault {
                tape.inject_fault(f);
            }
            let m = Model {
                cfg: cfg.clone(),
                params: store.clone(),
            };
            let out = m.forward_pass(tape, &image, &inputs, ForwardOptions::default())?;
            Ok(composite_loss_with(tape, &out.layers, &classes, &boxes, loss_cfg, Some(&frozen))?.total)
        },
        GRADCHECK_STEP,
        GRADCHECK_TOLERANCE,
    )
}

/// Runs [`gradcheck_model`] for each combination on top of `base`.
pub fn run_gradcheck(
    base: &ModelConfig,
    combos: &[(Strategy, Stream, Fusion)],
    seed: u64,
    fault: Option<Fault>,
) -> Result<Vec<ComboReport>> {
    combos
        .iter()
        .map(|&(strategy, stream, fusion)| {
            let cfg = ModelConfig {
                strategy,
                stream,
                fusion,
                ..base.clone()
            };
            let t = Instant::now();
            let report = gradcheck_model(&cfg, seed, fault)?;
            Ok(ComboReport {
                strategy,
                stream,
                fusion,
                report,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
