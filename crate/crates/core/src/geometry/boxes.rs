use crate::error::{Error, Result};

/// Axis-aligned box in normalized corner form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(c(self.x1), c(self.y1), c(self.x2), c(self.y2))
    }

    fn intersection(&self, o: &Self) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    fn enclosing_area(&self, o: &Self) -> f64 {
        (self.x2.max(o.x2) - self.x1.min(o.x1)) * (self.y2.max(o.y2) - self.y1.min(o.y1))
    }

    pub fn l1(&self, o: &Self) -> f64 {
        (self.x1 - o.x1).abs() + (self.y1 - o.y1).abs() + (self.x2 - o.x2).abs() + (self.y2 - o.y2).abs()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU minus the empty fraction of the smallest enclosing box.
pub fn giou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let enc = a.enclosing_area(b);
    if enc > 0.0 {
        iou - (enc - union).max(0.0) / enc
    } else {
        iou
    }
}

const LOGIT_CLAMP: f64 = 1e-9;

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes corner displacements around a reference point in logit space:
/// `x1 = σ(logit(rx) − d0)`, `y1 = σ(logit(ry) − d1)`, `x2 = σ(logit(rx) + d2)`,
/// `y2 = σ(logit(ry) + d3)`, then reorders so the box is valid.
pub fn decode_box(reference: [f64; 2], displacements: [f64; 4]) -> Result<Bbox> {
    if !reference.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Invalid(format!("reference point {reference:?} outside [0,1]²")));
    }
    let (lx, ly) = (logit(reference[0]), logit(reference[1]));
    let a = sigmoid(lx - displacements[0]);
    let b = sigmoid(ly - displacements[1]);
    let c = sigmoid(lx + displacements[2]);
    let d = sigmoid(ly + displacements[3]);
    Ok(Bbox::new(a.min(c), b.min(d), a.max(c), b.max(d)))
}
