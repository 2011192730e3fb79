//! Decoder query construction: stub proposal and mask providers, the three
//! query builders, and assembly into one padded query set.

use crate::error::{Error, Result};
use crate::geometry::{polygon_approximate, rasterize_polygon, BinaryMask, Polygon};
use crate::nn;
use crate::scene::Scene;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Knobs for the stand-in detector and segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct StubConfig {
    pub p_detect: f64,
    /// Std of Gaussian noise added to appearance features.
    pub feature_noise: f64,
    /// Poisson mean of distractor proposals per scene.
    pub distractor_rate: f64,
    /// Std of per-vertex jitter on proposal polygons, normalized units.
    pub polygon_jitter: f64,
    /// Flip probability for each pixel one step inside or outside a mask
    /// boundary.
    pub mask_noise: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            p_detect: 0.9,
            feature_noise: 0.1,
            distractor_rate: 1.0,
            polygon_jitter: 0.005,
            mask_noise: 0.1,
        }
    }
}

impl StubConfig {
    pub fn noiseless() -> Self {
        Self {
            p_detect: 1.0,
            feature_noise: 0.0,
            distractor_rate: 0.0,
            polygon_jitter: 0.0,
            mask_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub polygon: Polygon,
    pub appearance_feature: Vec<f64>,
    pub confidence: f64,
    pub source: &'static str,
}

fn stub_rng(seed: u64, scene_id: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(scene_id);
    rng
}

fn jittered(p: &Polygon, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Polygon> {
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let v = p
        .vertices()
        .iter()
        .map(|[x, y]| [(x + n.sample(rng)).clamp(0.0, 1.0), (y + n.sample(rng)).clamp(0.0, 1.0)])
        .collect();
    Polygon::new(v).or_else(|_| Ok(p.clone()))
}

fn noisy_feature(proto: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(proto.to_vec());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(proto.iter().map(|v| v + n.sample(rng)).collect())
}

/// Stand-in open-vocabulary detector. Each ground-truth object is proposed
/// with probability `p_detect` (polygon of its visible region, jittered);
/// Poisson-many distractors carry a random class prototype and a random
/// star polygon.
pub fn gdino_stub(scene: &Scene, vocabulary: &[Vec<f64>], cfg: &StubConfig, seed: u64) -> Result<Vec<Proposal>> {
    if vocabulary.is_empty() {
        return Err(Error::Invalid("empty vocabulary".into()));
    }
    let mut rng = stub_rng(seed, scene.id, 0x6d1);
    let mut out = Vec::new();
    for o in &scene.objects {
        let proto = vocabulary
            .get(o.class_id)
            .ok_or_else(|| Error::Invalid(format!("class {} missing from vocabulary", o.class_id)))?;
        if !rng.random_bool(cfg.p_detect.clamp(0.0, 1.0)) {
            continue;
        }
        let base = polygon_approximate(&o.visible, crate::geometry::DEFAULT_EPSILON)?;
        out.push(Proposal {
            polygon: jittered(&base, cfg.polygon_jitter, &mut rng)?,
            appearance_feature: noisy_feature(proto, cfg.feature_noise, &mut rng)?,
            confidence: rng.random_range(0.5..=1.0),
            source: "gdino_stub",
        });
    }
    let n_distractors = if cfg.distractor_rate > 0.0 {
        Poisson::new(cfg.distractor_rate)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_distractors {
        let proto = &vocabulary[rng.random_range(0..vocabulary.len())];
        let r = rng.random_range(0.05..0.15);
        let c = [rng.random_range(r..1.0 - r), rng.random_range(r..1.0 - r)];
        let n = rng.random_range(5..=8);
        let off: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let verts = (0..n)
            .map(|i| {
                let a = off + i as f64 * std::f64::consts::TAU / n as f64;
                let rr = r * rng.random_range(0.6..=1.0);
                [c[0] + rr * a.cos(), c[1] + rr * a.sin()]
            })
            .collect();
        out.push(Proposal {
            polygon: Polygon::new(verts)?,
            appearance_feature: noisy_feature(proto, cfg.feature_noise, &mut rng)?,
            confidence: rng.random_range(0.1..0.6),
            source: "gdino_stub",
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamOutput {
    pub masks: Vec<BinaryMask>,
    /// Prompts whose polygon rasterized to nothing.
    pub skipped: usize,
}

/// Stand-in promptable segmenter: rasterizes each prompt polygon, then flips
/// pixels in the one-pixel rings just inside and just outside the boundary
/// with probability `mask_noise`.
pub fn sam_stub(scene: &Scene, prompts: &[Proposal], mask_noise: f64, seed: u64) -> SamOutput {
    let mut rng = stub_rng(seed, scene.id, 0x5a3);
    let mut masks = Vec::with_capacity(prompts.len());
    let mut skipped = 0;
    for p in prompts {
        let clean = rasterize_polygon(&p.polygon, scene.width, scene.height);
        if clean.is_empty() {
            skipped += 1;
            continue;
        }
        if mask_noise <= 0.0 {
            masks.push(clean);
            continue;
        }
        let inner = clean.and_not(&clean.eroded());
        let outer = clean.dilated().and_not(&clean);
        let mut noisy = clean.clone();
        for y in 0..scene.height {
            for x in 0..scene.width {
                if (inner.get(x, y) || outer.get(x, y)) && rng.random_bool(mask_noise) {
                    noisy.set(x, y, !clean.get(x, y));
                }
            }
        }
        if noisy.is_empty() {
            noisy = clean;
        }
        masks.push(noisy);
    }
    SamOutput { masks, skipped }
}

/// Origin of a query row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Appearance,
    Positional,
    Random,
    Pad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryConfig {
    pub d_f: usize,
    pub d_app: usize,
    pub d_pos: usize,
    pub cap_app: usize,
    pub cap_pos: usize,
    pub n_random: usize,
    pub vertices: usize,
    pub epsilon: f64,
    pub use_appearance: bool,
    pub use_positional: bool,
    pub use_random: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            d_f: 32,
            d_app: 32,
            d_pos: 32,
            cap_app: 10,
            cap_pos: 10,
            n_random: 4,
            vertices: 16,
            epsilon: crate::geometry::DEFAULT_EPSILON,
            use_appearance: true,
            use_positional: true,
            use_random: true,
        }
    }
}

impl QueryConfig {
    pub fn effective_caps(&self) -> (usize, usize, usize) {
        (
            if self.use_appearance { self.cap_app } else { 0 },
            if self.use_positional { self.cap_pos } else { 0 },
            if self.use_random { self.n_random } else { 0 },
        )
    }

    pub fn n_queries(&self) -> usize {
        let (a, p, r) = self.effective_caps();
        a + p + r
    }

    pub fn d(&self) -> usize {
        self.d_app + self.d_pos
    }
}

/// Registers the query-side parameters: appearance projection, polygon MLP,
/// shared content-free vector and the random query matrix.
pub fn init_query_params<R: Rng>(store: &mut ParameterStore, cfg: &QueryConfig, rng: &mut R) {
    nn::init_linear(store, "query.app", cfg.d_f, cfg.d_app, rng);
    nn::init_mlp(store, "query.pos", &[2 * cfg.vertices, cfg.d_pos, cfg.d_pos], rng);
    store.insert("query.content", Tensor::randn(&[1, cfg.d_app], 1.0, rng));
    if cfg.use_random && cfg.n_random > 0 {
        store.insert("query.random", build_random_queries(cfg.n_random, cfg.d(), rng));
    }
}

/// Q_ran ~ N(0, I), `n_random × d`.
pub fn build_random_queries<R: Rng>(n_random: usize, d: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[n_random.max(1), d], 1.0, rng)
}

/// The proposals kept for appearance queries: highest confidence first,
/// ties in input order, at most `cap`.
pub fn select_proposals(proposals: &[Proposal], cap: usize) -> Vec<&Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].confidence.total_cmp(&proposals[a].confidence));
    order.into_iter().take(cap).map(|i| &proposals[i]).collect()
}

/// Polygons for positional queries: approximate, then resample to `k`
/// vertices. Masks that cannot be traced are skipped; at most `cap` kept in
/// input order.
pub fn positional_polygons(masks: &[BinaryMask], epsilon: f64, k: usize, cap: usize) -> Vec<Polygon> {
    masks
        .iter()
        .filter_map(|m| polygon_approximate(m, epsilon).and_then(|p| p.resample(k)).ok())
        .take(cap)
        .collect()
}

/// A builder output: `cap` rows with the first `filled` real and the rest
/// zero padding.
#[derive(Clone, Debug)]
pub struct Block {
    pub rows: Option<Var>,
    pub filled: usize,
    pub cap: usize,
}

impl Block {
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.cap).map(|i| i >= self.filled).collect()
    }
}

fn pad_rows(tape: &mut Tape, real: Option<Var>, filled: usize, cap: usize, width: usize) -> Result<Option<Var>> {
    if cap == 0 {
        return Ok(None);
    }
    let pad = (cap > filled).then(|| tape.constant(vec![cap - filled, width], vec![0.0; (cap - filled) * width]));
    Ok(Some(match (real, pad) {
        (Some(r), Some(p)) => tape.concat(&[r, p?], 0)?,
        (Some(r), None) => r,
        (None, Some(p)) => p?,
        (None, None) => unreachable!("cap > 0"),
    }))
}

/// `φ_proj` applied to each selected feature, padded to `cap`.
pub fn build_appearance_queries(
    tape: &mut Tape,
    store: &ParameterStore,
    selected: &[&Proposal],
    cap: usize,
) -> Result<Block> {
    let w = store
        .get("query.app.w")
        .ok_or_else(|| Error::UnknownParam("query.app.w".into()))?;
    let (d_f, d_app) = (w.shape()[0], w.shape()[1]);
    let filled = selected.len().min(cap);
    let real = if filled > 0 {
        let mut flat = Vec::with_capacity(filled * d_f);
        for p in &selected[..filled] {
            if p.appearance_feature.len() != d_f {
                return Err(Error::shape("appearance feature", &[p.appearance_feature.len()], &[d_f]));
            }
            flat.extend_from_slice(&p.appearance_feature);
        }
        let x = tape.constant(vec![filled, d_f], flat)?;
        Some(nn::linear(tape, store, "query.app", x)?)
    } else {
        None
    };
    Ok(Block {
        rows: pad_rows(tape, real, filled, cap, d_app)?,
        filled,
        cap,
    })
}

/// `MLP(Flatten(B))` for already-resampled polygons, no padding.
pub fn embed_polygons(tape: &mut Tape, store: &ParameterStore, polygons: &[Polygon]) -> Result<Option<Var>> {
    if polygons.is_empty() {
        return Ok(None);
    }
    let k = polygons[0].len();
    let mut flat = Vec::with_capacity(polygons.len() * 2 * k);
    for p in polygons {
        flat.extend(p.flatten_k(k)?);
    }
    let x = tape.constant(vec![polygons.len(), 2 * k], flat)?;
    Ok(Some(nn::mlp(tape, store, "query.pos", 2, x)?))
}

/// Polygon embedding per positional polygon, padded to `cap`.
pub fn build_positional_queries(
    tape: &mut Tape,
    store: &ParameterStore,
    polygons: &[Polygon],
    cap: usize,
) -> Result<Block> {
    let d_pos = store
        .get("query.pos.1.b")
        .ok_or_else(|| Error::UnknownParam("query.pos.1.b".into()))?
        .numel();
    let filled = polygons.len().min(cap);
    let real = embed_polygons(tape, store, &polygons[..filled])?;
    Ok(Block {
        rows: pad_rows(tape, real, filled, cap, d_pos)?,
        filled,
        cap,
    })
}

/// Assembled decoder queries.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `N × (d_app + d_pos)`, semantic channels first.
    pub embedding: Var,
    pub origins: Vec<Origin>,
    pub pad: Vec<bool>,
    pub polygons: Vec<Option<Polygon>>,
    pub d_app: usize,
    pub d_pos: usize,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.pad[i]).collect()
    }
}

/// Per-scene query inputs that do not depend on parameters.
#[derive(Clone, Debug)]
pub struct QueryInputs {
    pub appearance: Vec<Proposal>,
    /// Resampled polygons of the appearance proposals, same order.
    pub appearance_polygons: Vec<Polygon>,
    pub positional_polygons: Vec<Polygon>,
}

impl QueryInputs {
    /// Runs both stubs for one scene.
    pub fn from_scene(scene: &Scene, vocabulary: &[Vec<f64>], cfg: &QueryConfig, stub: &StubConfig, seed: u64) -> Result<Self> {
        let proposals = gdino_stub(scene, vocabulary, stub, seed)?;
        let (cap_app, cap_pos, _) = cfg.effective_caps();
        let appearance: Vec<Proposal> = select_proposals(&proposals, cap_app).into_iter().cloned().collect();
        let appearance_polygons = appearance
            .iter()
            .map(|p| p.polygon.resample(cfg.vertices))
            .collect::<Result<_>>()?;
        let sam = sam_stub(scene, &proposals, stub.mask_noise, seed);
        let positional_polygons = positional_polygons(&sam.masks, cfg.epsilon, cfg.vertices, cap_pos);
        Ok(Self {
            appearance,
            appearance_polygons,
            positional_polygons,
        })
    }
}

/// Stacks appearance, positional and random rows (in that order);
/// each row is `[semantic ; positional]`, pad rows are zero.
pub fn assemble_query_set(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &QueryConfig,
    inputs: &QueryInputs,
) -> Result<QuerySet> {
    let (cap_app, cap_pos, n_ran) = cfg.effective_caps();
    if cap_app + cap_pos + n_ran == 0 {
        return Err(Error::Config("at least one query type must be enabled".into()));
    }
    let d = cfg.d();
    let mut pieces = Vec::new();
    let mut origins = Vec::new();
    let mut polygons = Vec::new();

    if cap_app > 0 {
        let sel: Vec<&Proposal> = inputs.appearance.iter().collect();
        let sem = build_appearance_queries(tape, store, &sel, cap_app)?;
        let k = sem.filled;
        if k > 0 {
            let sem_rows = tape.gather_rows(sem.rows.expect("cap > 0"), &(0..k).collect::<Vec<_>>())?;
            let pos_rows = embed_polygons(tape, store, &inputs.appearance_polygons[..k])?.expect("k > 0");
            pieces.push(tape.concat(&[sem_rows, pos_rows], 1)?);
        }
        if cap_app > k {
            pieces.push(tape.constant(vec![cap_app - k, d], vec![0.0; (cap_app - k) * d])?);
        }
        for i in 0..cap_app {
            origins.push(if i < k { Origin::Appearance } else { Origin::Pad });
            polygons.push(inputs.appearance_polygons.get(i).filter(|_| i < k).cloned());
        }
    }
    if cap_pos > 0 {
        let block = build_positional_queries(tape, store, &inputs.positional_polygons, cap_pos)?;
        let k = block.filled;
        if k > 0 {
            let pos_rows = tape.gather_rows(block.rows.expect("cap > 0"), &(0..k).collect::<Vec<_>>())?;
            let content = store.bind(tape, "query.content")?;
            let sem_rows = tape.gather_rows(content, &vec![0; k])?;
            pieces.push(tape.concat(&[sem_rows, pos_rows], 1)?);
        }
        if cap_pos > k {
            pieces.push(tape.constant(vec![cap_pos - k, d], vec![0.0; (cap_pos - k) * d])?);
        }
        for i in 0..cap_pos {
            origins.push(if i < k { Origin::Positional } else { Origin::Pad });
            polygons.push(inputs.positional_polygons.get(i).filter(|_| i < k).cloned());
        }
    }
    if n_ran > 0 {
        let r = store.bind(tape, "query.random")?;
        if tape.shape(r) != [n_ran, d] {
            return Err(Error::shape("random queries", tape.shape(r), &[n_ran, d]));
        }
        pieces.push(r);
        origins.extend(std::iter::repeat_n(Origin::Random, n_ran));
        polygons.extend(std::iter::repeat_n(None, n_ran));
    }
    let embedding = if pieces.len() == 1 { pieces[0] } else { tape.concat(&pieces, 0)? };
    let pad = origins.iter().map(|o| *o == Origin::Pad).collect();
    Ok(QuerySet {
        embedding,
        origins,
        pad,
        polygons,
        d_app: cfg.d_app,
        d_pos: cfg.d_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, DatasetSpec};

    fn vocab(n: usize, d: usize) -> Vec<Vec<f64>> {
        let t = crate::scene::class_prototypes(n, d, 0).unwrap();
        (0..n).map(|i| t.row(i).to_vec()).collect()
    }

    fn proposal(conf: f64, feat: Vec<f64>) -> Proposal {
        Proposal {
            polygon: Polygon::new(vec![[0.1, 0.1], [0.3, 0.1], [0.2, 0.3]]).unwrap(),
            appearance_feature: feat,
            confidence: conf,
            source: "test",
        }
    }

    #[test]
    fn noiseless_gdino_is_one_exact_proposal_per_object() {
        let scene = generate_scene(&DatasetSpec::default(), 4).unwrap();
        let v = vocab(5, 32);
        let p = gdino_stub(&scene, &v, &StubConfig::noiseless(), 1).unwrap();
        assert_eq!(p.len(), scene.objects.len());
        for (prop, obj) in p.iter().zip(&scene.objects) {
            assert_eq!(prop.appearance_feature, v[obj.class_id]);
        }
        assert!(gdino_stub(&scene, &[], &StubConfig::default(), 1).is_err());
        let again = gdino_stub(&scene, &v, &StubConfig::default(), 9).unwrap();
        assert_eq!(again, gdino_stub(&scene, &v, &StubConfig::default(), 9).unwrap());
    }

    #[test]
    fn empty_scene_without_distractors_gives_nothing() {
        let spec = DatasetSpec {
            min_objects: 0,
            max_objects: 0,
            ..DatasetSpec::default()
        };
        let scene = generate_scene(&spec, 0).unwrap();
        let cfg = StubConfig {
            distractor_rate: 0.0,
            ..StubConfig::default()
        };
        assert!(gdino_stub(&scene, &vocab(3, 8), &cfg, 0).unwrap().is_empty());
    }

    #[test]
    fn noiseless_sam_equals_raster() {
        let scene = generate_scene(&DatasetSpec::default(), 2).unwrap();
        let p = gdino_stub(&scene, &vocab(5, 32), &StubConfig::noiseless(), 0).unwrap();
        let out = sam_stub(&scene, &p, 0.0, 0);
        assert_eq!(out.masks.len(), p.len());
        for (m, q) in out.masks.iter().zip(&p) {
            assert_eq!(*m, rasterize_polygon(&q.polygon, 64, 64));
        }
    }

    #[test]
    fn appearance_selection_and_identity_projection() {
        let mut store = ParameterStore::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.values_mut()[i * 3 + i] = 1.0;
        }
        store.insert("query.app.w", eye);
        store.insert("query.app.b", Tensor::zeros(&[3]));
        let props: Vec<Proposal> = [0.2, 0.9, 0.5, 0.9, 0.1]
            .iter()
            .enumerate()
            .map(|(i, &c)| proposal(c, vec![i as f64; 3]))
            .collect();
        let sel = select_proposals(&props, 3);
        let feats: Vec<f64> = sel.iter().map(|p| p.appearance_feature[0]).collect();
        assert_eq!(feats, vec![1.0, 3.0, 2.0]);
        let mut tape = Tape::new();
        let b = build_appearance_queries(&mut tape, &store, &sel, 4).unwrap();
        assert_eq!(b.pad_mask(), vec![false, false, false, true]);
        assert_eq!(tape.value(b.rows.unwrap()), &[1., 1., 1., 3., 3., 3., 2., 2., 2., 0., 0., 0.]);
        let e = build_appearance_queries(&mut tape, &store, &[], 2).unwrap();
        assert_eq!(e.filled, 0);
        assert!(tape.value(e.rows.unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        nn::init_mlp(&mut store, "query.pos", &[8, 4, 4], &mut rng);
        for n in ["query.pos.0.w", "query.pos.1.w"] {
            store.get_mut(n).unwrap().values_mut().fill(0.0);
        }
        store.get_mut("query.pos.1.b").unwrap().values_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let p = Polygon::new(vec![[0.1, 0.1], [0.4, 0.1], [0.4, 0.4], [0.1, 0.4]]).unwrap();
        let mut tape = Tape::new();
        let b = build_positional_queries(&mut tape, &store, &[p.clone(), p.translated(0.1, 0.2).unwrap()], 3).unwrap();
        assert_eq!(tape.value(b.rows.unwrap())[..8], [1., 2., 3., 4., 1., 2., 3., 4.]);
    }

    #[test]
    fn random_only_assembly() {
        let cfg = QueryConfig {
            use_appearance: false,
            use_positional: false,
            n_random: 2,
            ..QueryConfig::default()
        };
        let mut store = ParameterStore::new();
        init_query_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let inputs = QueryInputs {
            appearance: vec![],
            appearance_polygons: vec![],
            positional_polygons: vec![],
        };
        let mut tape = Tape::new();
        let q = assemble_query_set(&mut tape, &store, &cfg, &inputs).unwrap();
        assert_eq!(q.origins, vec![Origin::Random, Origin::Random]);
        assert_eq!(tape.shape(q.embedding), &[2, 64]);
    }
}
