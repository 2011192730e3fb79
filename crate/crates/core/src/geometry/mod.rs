//! Masks, polygons and boxes: mask-to-polygon approximation, fixed-size
//! resampling for embedding, and the IoU/GIoU kernels shared by loss and
//! evaluation.

mod boxes;
mod mask;
mod polygon;

pub use boxes::{decode_box, giou, iou, logit, sigmoid, Bbox};
pub use mask::BinaryMask;
pub use polygon::{point_segment_distance, simplify_ring, Polygon, DEFAULT_EPSILON, DEFAULT_VERTICES};

use crate::error::Result;

pub fn rasterize_polygon(p: &Polygon, width: usize, height: usize) -> BinaryMask {
    BinaryMask::rasterize(p, width, height)
}

pub fn polygon_approximate(m: &BinaryMask, epsilon: f64) -> Result<Polygon> {
    Polygon::approximate(m, epsilon)
}

pub fn resample_polygon(p: &Polygon, k: usize) -> Result<Polygon> {
    p.resample(k)
}

pub fn flatten_polygon(p: &Polygon, k: usize) -> Result<Vec<f64>> {
    p.flatten_k(k)
}

pub fn polygon_to_box(p: &Polygon) -> Bbox {
    p.to_box()
}

/// Symmetric Hausdorff distance between two rings, measured from each
/// ring's vertices and densely sampled edge points to the other ring.
pub fn hausdorff_distance(a: &Polygon, b: &Polygon, samples_per_edge: usize) -> f64 {
    fn directed(a: &Polygon, b: &Polygon, s: usize) -> f64 {
        let (va, vb) = (a.vertices(), b.vertices());
        let mut worst: f64 = 0.0;
        for i in 0..va.len() {
            let (p, q) = (va[i], va[(i + 1) % va.len()]);
            for k in 0..s.max(1) {
                let t = k as f64 / s.max(1) as f64;
                let pt = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
                let d = (0..vb.len())
                    .map(|j| point_segment_distance(pt, vb[j], vb[(j + 1) % vb.len()]))
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(d);
            }
        }
        worst
    }
    directed(a, b, samples_per_edge).max(directed(b, a, samples_per_edge))
}
