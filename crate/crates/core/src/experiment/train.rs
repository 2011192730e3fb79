use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{coco_map, Detection, EvalConfig, EvalResult, GroundTruth};
use crate::geometry::Bbox;
use crate::loss::{composite_loss, CompositeLoss};
use crate::model::{ForwardOptions, ImageTensors, Model};
use crate::query::QueryInputs;
use crate::scene::{class_prototypes, Dataset, Scene};
use crate::tensor::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::time::Instant;

/// Model inputs and targets of one scene, computed once per run.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: u64,
    pub image: ImageTensors,
    pub inputs: QueryInputs,
    pub gt_classes: Vec<usize>,
    pub gt_boxes: Vec<Bbox>,
}

impl PreparedScene {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.gt_classes
            .iter()
            .zip(&self.gt_boxes)
            .map(|(&class_id, &bbox)| GroundTruth { class_id, bbox })
            .collect()
    }
}

/// Class prototypes shared by the detector stub of every scene.
pub fn vocabulary(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let t = class_prototypes(cfg.data.n_classes, cfg.model.query.d_f, cfg.data.seed)?;
    Ok((0..cfg.data.n_classes).map(|i| t.row(i).to_vec()).collect())
}

/// Seed of the stub noise for one scene; `split` separates train from val.
fn stub_seed(train_seed: u64, split: u64, scene_id: u64) -> u64 {
    train_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(scene_id)
}

pub fn prepare_scene(cfg: &ExperimentConfig, model: &Model, vocab: &[Vec<f64>], scene: &Scene, split: u64) -> Result<PreparedScene> {
    let seed = stub_seed(cfg.train.seed, split, scene.id);
    Ok(PreparedScene {
        id: scene.id,
        image: model.image_tensors(scene)?,
        inputs: QueryInputs::from_scene(scene, vocab, &cfg.model.query, &cfg.stub, seed)?,
        gt_classes: scene.classes(),
        gt_boxes: scene.boxes(),
    })
}

pub fn prepare(cfg: &ExperimentConfig, model: &Model, data: &Dataset, split: u64) -> Result<Vec<PreparedScene>> {
    let vocab = vocabulary(cfg)?;
    data.scenes
        .iter()
        .map(|s| prepare_scene(cfg, model, &vocab, s, split))
        .collect()
}

/// Forward pass and set loss of one scene; `None` if the scene has no
/// queries at all.
pub fn scene_loss(cfg: &ExperimentConfig, model: &Model, tape: &mut Tape, s: &PreparedScene) -> Result<Option<CompositeLoss>> {
    let out = match model.forward_pass(tape, &s.image, &s.inputs, ForwardOptions::default()) {
        Err(Error::AllMasked) => return Ok(None),
        r => r?,
    };
    composite_loss(tape, &out.layers, &s.gt_classes, &s.gt_boxes, cfg.loss).map(Some)
}

/// Last-layer detections: one per active query, scored by its highest
/// foreground probability.
pub fn predict(model: &Model, s: &PreparedScene) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let out = match model.forward_pass(&mut tape, &s.image, &s.inputs, ForwardOptions::default()) {
        Err(Error::AllMasked) => return Ok(Vec::new()),
        r => r?,
    };
    let last = out.layers.last().expect("at least one decoder layer");
    let c1 = model.cfg.n_classes + 1;
    let logits = tape.value(last.logits);
    let boxes = tape.value(last.boxes);
    Ok((0..out.active.len())
        .map(|i| {
            let row = &logits[i * c1..i * c1 + c1 - 1];
            let (class_id, z) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &z)| if z > b.1 { (k, z) } else { b });
            Detection {
                class_id,
                score: crate::geometry::sigmoid(z),
                bbox: Bbox::from_slice(&boxes[4 * i..4 * i + 4]),
            }
        })
        .collect())
}

pub fn evaluate(model: &Model, scenes: &[PreparedScene]) -> Result<EvalResult> {
    let dets = scenes.iter().map(|s| predict(model, s)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(PreparedScene::ground_truth).collect();
    coco_map(&dets, &gts, model.cfg.n_classes, &EvalConfig::default())
}

pub fn metrics_json(r: &EvalResult) -> Value {
    let mut m = serde_json::Map::new();
    for (k, v) in r.metrics() {
        m.insert(k, json!(v));
    }
    Value::Object(m)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Step count, AP and parameters of the best evaluation.
    pub best: Option<(usize, f64, Model)>,
    pub final_eval: EvalResult,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub wall_seconds: f64,
}

/// Runs the training loop, handing each structured record to `log`.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    log: &mut dyn FnMut(Value) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.spec != cfg.data || val_set.spec != cfg.data {
        return Err(Error::Config("dataset was generated from a different data section".into()));
    }
    let started = Instant::now();
    let hash = cfg.hash();
    let seed = cfg.train.seed;
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let train_scenes = prepare(cfg, &model, train_set, 0)?;
    let val_scenes = prepare(cfg, &model, val_set, 1)?;
    if train_scenes.is_empty() && cfg.train.steps > 0 {
        return Err(Error::Invalid("training split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let (mut first_loss, mut last_loss) = (None, None);
    let mut final_eval = None;
    for step in 0..cfg.train.steps {
        model.params.zero_grad();
        let mut batch = Vec::with_capacity(cfg.train.batch);
        while batch.len() < cfg.train.batch {
            if order.is_empty() {
                order = (0..train_scenes.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let scale = 1.0 / batch.len() as f64;
        let (mut loss, mut cls, mut bbox, mut giou) = (0.0, 0.0, 0.0, 0.0);
        let mut per_layer = vec![0.0; cfg.model.dec_layers];
        let ids: Vec<u64> = batch.iter().map(|&j| train_scenes[j].id).collect();
        let mut dump = |scene: u64, detail: String| -> Result<Error> {
            log(json!({
                "kind": "nonfinite", "step": step, "scene": scene, "batch": ids, "detail": detail,
                "config_hash": hash, "seed": seed,
            }))?;
            Ok(Error::NonFinite(format!("{detail} at step {step} on scene {scene} (batch {ids:?})")))
        };
        for &i in &batch {
            let id = train_scenes[i].id;
            let mut tape = Tape::new();
            let l = match scene_loss(cfg, &model, &mut tape, &train_scenes[i]) {
                Ok(Some(l)) => l,
                Ok(None) => continue,
                Err(Error::NonFinite(what)) => return Err(dump(id, what)?),
                Err(e) => return Err(e),
            };
            let v = l.value(&tape);
            if !v.is_finite() {
                let terms: Vec<String> = l.layers.iter().map(|t| format!("{}/{}/{}", t.cls, t.bbox, t.giou)).collect();
                return Err(dump(id, format!("loss {v} (layer cls/bbox/giou {})", terms.join(" ")))?);
            }
            let m = l.mean_terms();
            for (acc, t) in per_layer.iter_mut().zip(&l.layers) {
                *acc += t.total * scale;
            }
            loss += v * scale;
            cls += m.cls * scale;
            bbox += m.bbox * scale;
            giou += m.giou * scale;
            let scaled = tape.scale(l.total, scale);
            tape.backward(scaled)?;
            model.params.accumulate_grads(&tape)?;
        }
        let norm = if cfg.train.clip > 0.0 {
            model.params.clip_grad_norm(cfg.train.clip)
        } else {
            model.params.grad_norm()
        };
        if !norm.is_finite() {
            return Err(dump(ids[0], format!("gradient norm {norm}"))?);
        }
        model.params.optimizer_step(&cfg.train.optimizer(step))?;
        first_loss.get_or_insert(loss);
        last_loss = Some(loss);
        log(json!({
            "kind": "step", "step": step + 1, "loss": loss, "cls": cls, "bbox": bbox, "giou": giou,
            "layers": per_layer, "grad_norm": norm, "config_hash": hash, "seed": seed,
        }))?;
        let done = step + 1 == cfg.train.steps;
        if done || (cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0) {
            let r = evaluate(&model, &val_scenes)?;
            log(json!({"kind": "eval", "step": step + 1, "metrics": metrics_json(&r), "config_hash": hash, "seed": seed}))?;
            let ap = r.ap.unwrap_or(0.0);
            if best.as_ref().is_none_or(|b| ap > b.1) {
                best = Some((step + 1, ap, model.clone()));
            }
            if done {
                final_eval = Some(r);
            }
        }
    }
    let final_eval = match final_eval {
        Some(r) => r,
        None => {
            let r = evaluate(&model, &val_scenes)?;
            log(json!({"kind": "eval", "step": 0, "metrics": metrics_json(&r), "config_hash": hash, "seed": seed}))?;
            r
        }
    };
    Ok(TrainOutcome {
        model,
        best,
        final_eval,
        first_loss,
        last_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
