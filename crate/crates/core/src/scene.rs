//! Synthetic polygon scenes: generation, occlusion, derived ground truth,
//! stub image features and the plain-text dataset format.

use crate::error::{Error, Result};
use crate::geometry::{polygon_approximate, rasterize_polygon, BinaryMask, Bbox, Polygon, DEFAULT_EPSILON};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::Path;

/// Objects whose visible area falls below this fraction of their full
/// raster are removed.
pub const MIN_VISIBLE_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Star-polygon outer radius range, normalized units.
    pub min_size: f64,
    pub max_size: f64,
    pub occlusion_rate: f64,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub canvas: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_scenes: 222,
            n_classes: 5,
            min_objects: 1,
            max_objects: 5,
            min_size: 0.08,
            max_size: 0.2,
            occlusion_rate: 0.3,
            min_vertices: 5,
            max_vertices: 12,
            canvas: 64,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must be in [0,1]");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 0.5) {
            return bad("sizes must satisfy 0 < min_size ≤ max_size < 0.5");
        }
        if self.min_vertices < 3 || self.min_vertices > self.max_vertices {
            return bad("vertex range must satisfy 3 ≤ min ≤ max");
        }
        if self.canvas < 8 {
            return bad("canvas must be at least 8 pixels");
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "spec n_scenes={} n_classes={} min_objects={} max_objects={} min_size={} max_size={} occlusion_rate={} min_vertices={} max_vertices={} canvas={} seed={}",
            self.n_scenes,
            self.n_classes,
            self.min_objects,
            self.max_objects,
            self.min_size,
            self.max_size,
            self.occlusion_rate,
            self.min_vertices,
            self.max_vertices,
            self.canvas,
            self.seed
        )
    }

    fn parse_header(line: &str, lineno: usize) -> Result<Self> {
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let rest = line
            .strip_prefix("spec ")
            .ok_or_else(|| perr("expected `spec` header".into()))?;
        let mut s = DatasetSpec::default();
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| perr(format!("malformed field `{kv}`")))?;
            let int = || v.parse::<usize>().map_err(|e| perr(format!("{k}: {e}")));
            let float = || v.parse::<f64>().map_err(|e| perr(format!("{k}: {e}")));
            match k {
                "n_scenes" => s.n_scenes = int()?,
                "n_classes" => s.n_classes = int()?,
                "min_objects" => s.min_objects = int()?,
                "max_objects" => s.max_objects = int()?,
                "min_size" => s.min_size = float()?,
                "max_size" => s.max_size = float()?,
                "occlusion_rate" => s.occlusion_rate = float()?,
                "min_vertices" => s.min_vertices = int()?,
                "max_vertices" => s.max_vertices = int()?,
                "canvas" => s.canvas = int()?,
                "seed" => s.seed = v.parse().map_err(|e| perr(format!("seed: {e}")))?,
                other => return Err(perr(format!("unknown spec field `{other}`"))),
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub polygon: Polygon,
    pub z: usize,
    /// Pixels of this object not covered by objects with higher `z`.
    pub visible: BinaryMask,
    /// Box of the polygonal approximation of the visible region.
    pub bbox: Bbox,
    /// Visible pixel count over canvas pixel count.
    pub area_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// Sorted by ascending `z` (painter's order).
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Builds a scene from raw `(class, polygon, z)` triples and derives the
    /// visible masks and boxes. Objects below the visibility floor are
    /// dropped.
    pub fn from_objects(id: u64, width: usize, height: usize, mut raw: Vec<(usize, Polygon, usize)>) -> Result<Self> {
        raw.sort_by_key(|(_, _, z)| *z);
        if raw.windows(2).any(|w| w[0].2 == w[1].2) {
            return Err(Error::Invalid("z-order must be a total order".into()));
        }
        let full: Vec<BinaryMask> = raw.iter().map(|(_, p, _)| rasterize_polygon(p, width, height)).collect();
        let mut keep: Vec<bool> = vec![true; raw.len()];
        let visible_of = |i: usize, keep: &[bool]| {
            let mut v = full[i].clone();
            for j in i + 1..raw.len() {
                if keep[j] {
                    v = v.and_not(&full[j]);
                }
            }
            v
        };
        for i in 0..raw.len() {
            let full_px = full[i].count();
            let vis = visible_of(i, &keep).count();
            if full_px == 0 || (vis as f64) < MIN_VISIBLE_FRACTION * full_px as f64 {
                keep[i] = false;
            }
        }
        let mut objects = Vec::new();
        for (i, (class_id, polygon, z)) in raw.iter().enumerate() {
            if !keep[i] {
                continue;
            }
            let visible = visible_of(i, &keep);
            let approx = polygon_approximate(&visible, DEFAULT_EPSILON)?;
            objects.push(SceneObject {
                class_id: *class_id,
                polygon: polygon.clone(),
                z: *z,
                bbox: approx.to_box(),
                area_fraction: visible.count() as f64 / (width * height) as f64,
                visible,
            });
        }
        Ok(Self {
            id,
            width,
            height,
            objects,
        })
    }

    pub fn boxes(&self) -> Vec<Bbox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class_id).collect()
    }

    /// Stub backbone input: `height × width × (n_classes + 1)` grid holding
    /// a one-hot of the visible object's class per pixel plus a channel
    /// marking object boundaries.
    pub fn features(&self, n_classes: usize) -> Tensor {
        let c = n_classes + 1;
        let mut grid = Tensor::zeros(&[self.height, self.width, c]);
        let v = grid.values_mut();
        for o in &self.objects {
            for y in 0..self.height {
                for x in 0..self.width {
                    if o.visible.get(x, y) {
                        let base = (y * self.width + x) * c;
                        v[base + o.class_id.min(n_classes - 1)] = 1.0;
                        if o.visible.is_boundary(x, y) {
                            v[base + n_classes] = 1.0;
                        }
                    }
                }
            }
        }
        grid
    }
}

/// Per-scene RNG stream derived from the master seed.
pub fn scene_rng(master_seed: u64, scene_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(scene_index);
    rng
}

fn star_polygon<R: Rng>(rng: &mut R, center: [f64; 2], radius: f64, n: usize) -> Result<Polygon> {
    let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let verts = (0..n)
        .map(|i| {
            let jitter: f64 = rng.random_range(-0.3..0.3);
            let ang = offset + (i as f64 + jitter) * std::f64::consts::TAU / n as f64;
            let r = radius * rng.random_range(0.6..=1.0);
            [center[0] + r * ang.cos(), center[1] + r * ang.sin()]
        })
        .collect();
    Polygon::new(verts)
}

struct Placed {
    center: [f64; 2],
    radius: f64,
    mask: BinaryMask,
}

/// Samples one scene. Object `i > 0` overlaps an earlier object with
/// probability `occlusion_rate`, and is otherwise placed clear of all
/// earlier objects (dropped if no clear spot is found).
pub fn generate_scene(spec: &DatasetSpec, scene_index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, scene_index);
    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);
    let canvas = spec.canvas;
    let mut placed: Vec<Placed> = Vec::new();
    let mut raw = Vec::new();
    for _ in 0..n_objects {
        let class_id = rng.random_range(0..spec.n_classes);
        let radius = rng.random_range(spec.min_size..=spec.max_size);
        let n_vertices = rng.random_range(spec.min_vertices..=spec.max_vertices);
        let occlude = !placed.is_empty() && rng.random_bool(spec.occlusion_rate);
        let clamp_center = |c: f64| c.clamp(radius, 1.0 - radius);
        let mut chosen = None;
        for _ in 0..64 {
            let center = if occlude {
                let target = &placed[rng.random_range(0..placed.len())];
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let d = rng.random_range(0.3..0.55) * (radius + target.radius);
                [
                    clamp_center(target.center[0] + d * ang.cos()),
                    clamp_center(target.center[1] + d * ang.sin()),
                ]
            } else {
                [
                    rng.random_range(radius..=1.0 - radius),
                    rng.random_range(radius..=1.0 - radius),
                ]
            };
            let poly = star_polygon(&mut rng, center, radius, n_vertices)?;
            let mask = rasterize_polygon(&poly, canvas, canvas);
            if mask.is_empty() {
                continue;
            }
            let overlaps = placed.iter().any(|p| !p.mask.and(&mask).is_empty());
            let clear = placed.iter().all(|p| {
                let d = ((p.center[0] - center[0]).powi(2) + (p.center[1] - center[1]).powi(2)).sqrt();
                d > p.radius + radius
            });
            if (occlude && overlaps) || (!occlude && clear && !overlaps) {
                chosen = Some((poly, mask, center));
                break;
            }
        }
        if let Some((poly, mask, center)) = chosen {
            raw.push((class_id, poly, raw.len()));
            placed.push(Placed { center, radius, mask });
        }
    }
    Scene::from_objects(scene_index, canvas, canvas, raw)
}

/// Unit-norm class prototypes with pairwise cosine similarity ≤ 0.3,
/// rejection sampled.
pub fn class_prototypes(n_classes: usize, d_f: usize, seed: u64) -> Result<Tensor> {
    const MAX_COS: f64 = 0.3;
    const MAX_TRIES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut tries = 0;
    while rows.len() < n_classes {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(Error::Invalid(format!(
                "could not place {n_classes} prototypes with cosine ≤ {MAX_COS} in {d_f} dims; use a larger d_f"
            )));
        }
        let mut v: Vec<f64> = (0..d_f).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let ok = rows
            .iter()
            .all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= MAX_COS);
        if ok {
            rows.push(v);
        }
    }
    Tensor::new(vec![n_classes, d_f], rows.concat())
}

/// Scenes with `index % 10 == 9` form the validation split.
pub fn is_val_index(index: u64) -> bool {
    index % 10 == 9
}

/// A split of generated scenes plus the spec they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
        spec.validate()?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for i in 0..spec.n_scenes as u64 {
            let s = generate_scene(spec, i)?;
            if is_val_index(i) {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        Ok((
            Dataset {
                spec: spec.clone(),
                scenes: train,
            },
            Dataset {
                spec: spec.clone(),
                scenes: val,
            },
        ))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# dualstream dataset v1\n");
        out.push_str(&self.spec.header());
        out.push('\n');
        let _ = writeln!(out, "scenes {}", self.scenes.len());
        for s in &self.scenes {
            let _ = writeln!(out, "scene {} {} {} {}", s.id, s.width, s.height, s.objects.len());
            for o in &s.objects {
                let _ = write!(out, "obj {} {}", o.class_id, o.z);
                for [x, y] in o.polygon.vertices() {
                    let _ = write!(out, " {x},{y}");
                }
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let perr = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| perr(0, &format!("unexpected end of file, expected {what}")));
        let (ln, magic) = next("header")?;
        if magic != "# dualstream dataset v1" {
            return Err(perr(ln, "missing dataset header"));
        }
        let (ln, header) = next("spec")?;
        let spec = DatasetSpec::parse_header(header, ln)?;
        let (ln, count) = next("scene count")?;
        let n: usize = count
            .strip_prefix("scenes ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(ln, "expected `scenes <n>`"))?;
        let mut scenes = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = next("scene record")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 || f[0] != "scene" {
                return Err(perr(ln, "expected `scene <id> <w> <h> <n_objects>`"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| perr(ln, &e.to_string()));
            let (id, w, h, k) = (num(f[1])?, num(f[2])? as usize, num(f[3])? as usize, num(f[4])? as usize);
            let mut raw = Vec::with_capacity(k);
            for _ in 0..k {
                let (ln, line) = next("object record")?;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() < 5 || f[0] != "obj" {
                    return Err(perr(ln, "expected `obj <class> <z> <x,y>...`"));
                }
                let class: usize = f[1].parse().map_err(|_| perr(ln, "bad class id"))?;
                let z: usize = f[2].parse().map_err(|_| perr(ln, "bad z"))?;
                let mut verts = Vec::with_capacity(f.len() - 3);
                for pair in &f[3..] {
                    let (x, y) = pair.split_once(',').ok_or_else(|| perr(ln, "bad vertex"))?;
                    let x: f64 = x.parse().map_err(|_| perr(ln, "bad vertex x"))?;
                    let y: f64 = y.parse().map_err(|_| perr(ln, "bad vertex y"))?;
                    verts.push([x, y]);
                }
                let poly = Polygon::new(verts).map_err(|e| perr(ln, &e.to_string()))?;
                raw.push((class, poly, z));
            }
            scenes.push(Scene::from_objects(id, w, h, raw).map_err(|e| perr(ln, &e.to_string()))?);
        }
        let (ln, end) = next("`end`")?;
        if end != "end" {
            return Err(perr(ln, "expected `end`"));
        }
        Ok(Dataset { spec, scenes })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
