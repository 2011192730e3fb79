use super::{BinaryMask, Bbox};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_VERTICES: usize = 16;

/// Closed ring in normalized image coordinates.
///
/// Stored canonically: positive signed area (counter-clockwise in `(x, y)`
/// number space), starting at the vertex with minimal `y`, ties broken by
/// minimal `x`. Zero-area rings keep their input order after rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

fn signed_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let [x1, y1] = v[i];
            let [x2, y2] = v[(i + 1) % n];
            x1 * y2 - x2 * y1
        })
        .sum::<f64>()
        / 2.0
}

impl Polygon {
    /// Canonicalizes `vertices`. Consecutive duplicates are merged.
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let mut v: Vec<[f64; 2]> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Invalid("non-finite polygon vertex".into()));
            }
            if v.last() != Some(&p) {
                v.push(p);
            }
        }
        while v.len() > 1 && v.first() == v.last() {
            v.pop();
        }
        if v.len() < 3 {
            return Err(Error::Degenerate(format!("polygon needs 3 distinct vertices, got {}", v.len())));
        }
        if signed_area(&v) < 0.0 {
            v.reverse();
        }
        let start = (0..v.len())
            .min_by(|&a, &b| {
                v[a][1]
                    .total_cmp(&v[b][1])
                    .then(v[a][0].total_cmp(&v[b][0]))
            })
            .unwrap();
        v.rotate_left(start);
        Ok(Self { vertices: v })
    }

    /// Builds from an already-canonical vertex list without reordering.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 || flat.len() < 6 {
            return Err(Error::Invalid(format!("flat polygon length {} is not 2K with K ≥ 3", flat.len())));
        }
        Ok(Self {
            vertices: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| dist(self.vertices[i], self.vertices[(i + 1) % n]))
            .sum()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.vertices.iter().map(|[x, y]| [x + dx, y + dy]).collect())
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(a, b), [x, y]| (a + x, b + y));
        [sx / n, sy / n]
    }

    /// `[x₁, y₁, …, x_K, y_K]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Flattened form after checking the vertex count.
    pub fn flatten_k(&self, k: usize) -> Result<Vec<f64>> {
        if self.len() != k {
            return Err(Error::Invalid(format!("expected {k} vertices, polygon has {}", self.len())));
        }
        Ok(self.flatten())
    }

    /// Axis-aligned bounding box of the vertices.
    pub fn to_box(&self) -> Bbox {
        let mut b = Bbox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &[x, y] in &self.vertices {
            b.x1 = b.x1.min(x);
            b.y1 = b.y1.min(y);
            b.x2 = b.x2.max(x);
            b.y2 = b.y2.max(y);
        }
        b
    }

    /// Even-odd point containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.vertices;
        let n = v.len();
        let mut inside = false;
        for i in 0..n {
            let [x1, y1] = v[i];
            let [x2, y2] = v[(i + 1) % n];
            if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
                inside = !inside;
            }
        }
        inside
    }

    /// `k` points at equal arc-length spacing, starting at the first vertex.
    pub fn resample(&self, k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::Invalid(format!("resample needs K ≥ 3, got {k}")));
        }
        let perim = self.perimeter();
        if !(perim > 1e-12) {
            return Err(Error::Degenerate("zero perimeter".into()));
        }
        let v = &self.vertices;
        let n = v.len();
        let step = perim / k as f64;
        let mut out = Vec::with_capacity(k);
        let mut edge = 0;
        let mut walked = 0.0;
        let mut edge_len = dist(v[0], v[1 % n]);
        for i in 0..k {
            let target = i as f64 * step;
            while walked + edge_len < target && edge < n - 1 {
                walked += edge_len;
                edge += 1;
                edge_len = dist(v[edge], v[(edge + 1) % n]);
            }
            let t = if edge_len > 0.0 {
                ((target - walked) / edge_len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (a, b) = (v[edge], v[(edge + 1) % n]);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
        Ok(Self { vertices: out })
    }

    /// Polygonal approximation of a mask: outer boundary of its largest
    /// 4-connected component, simplified by Douglas–Peucker.
    pub fn approximate(mask: &BinaryMask, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::Invalid(format!("epsilon must be ≥ 0, got {epsilon}")));
        }
        if mask.is_empty() {
            return Err(Error::NoObject);
        }
        let component = mask.largest_component();
        let ring = component.trace_outer_boundary().ok_or(Error::NoObject)?;
        let (w, h) = (mask.width() as f64, mask.height() as f64);
        let points: Vec<[f64; 2]> = ring.iter().map(|&(x, y)| [x as f64 / w, y as f64 / h]).collect();
        Self::new(simplify_ring(&points, epsilon))
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from `p` to the segment `a`–`b`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Douglas–Peucker on the open chain `points[lo..=hi]`; marks kept indices.
fn dp_chain(points: &[[f64; 2]], lo: usize, hi: usize, eps: f64, keep: &mut [bool]) {
    let mut stack = vec![(lo, hi)];
    while let Some((a, b)) = stack.pop() {
        if b <= a + 1 {
            continue;
        }
        let (mut best, mut best_d) = (a, -1.0);
        for i in a + 1..b {
            let d = point_segment_distance(points[i], points[a], points[b]);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d > eps {
            keep[best] = true;
            stack.push((a, best));
            stack.push((best, b));
        }
    }
}

/// Closed-ring Douglas–Peucker. Anchors are the first point and the point
/// farthest from it; a third vertex is forced if the tolerance would
/// otherwise collapse the ring to a segment.
pub fn simplify_ring(points: &[[f64; 2]], epsilon: f64) -> Vec<[f64; 2]> {
    let n = points.len();
    if n <= 3 {
        return points.to_vec();
    }
    let far = (1..n)
        .max_by(|&a, &b| dist(points[0], points[a]).total_cmp(&dist(points[0], points[b])))
        .unwrap();
    // closed chain: indices 0..=n where n wraps to 0
    let mut chain = points.to_vec();
    chain.push(points[0]);
    let mut keep = vec![false; n + 1];
    keep[0] = true;
    keep[far] = true;
    keep[n] = true;
    dp_chain(&chain, 0, far, epsilon, &mut keep);
    dp_chain(&chain, far, n, epsilon, &mut keep);
    if keep[..n].iter().filter(|&&k| k).count() < 3 {
        let extra = (1..n)
            .filter(|&i| i != far)
            .max_by(|&a, &b| {
                point_segment_distance(points[a], points[0], points[far])
                    .total_cmp(&point_segment_distance(points[b], points[0], points[far]))
            })
            .unwrap();
        keep[extra] = true;
    }
    (0..n).filter(|&i| keep[i]).map(|i| points[i]).collect()
}
