use super::Polygon;
use std::collections::VecDeque;

/// Row-major binary raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width * height).then_some(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-range coordinates read as unset.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Self) -> Self {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Self { bits, ..*self }
    }

    pub fn and_not(&self, other: &Self) -> Self {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect();
        Self { bits, ..*self }
    }

    pub fn or(&self, other: &Self) -> Self {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Self { bits, ..*self }
    }

    /// Intersection over union of the set pixels; 0 when both are empty.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.and(other).count();
        let union = self.or(other).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Set pixels whose 4-neighbourhood is entirely set.
    pub fn eroded(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let (xi, yi) = (x as isize, y as isize);
                let keep = self.get(x, y)
                    && self.get_signed(xi - 1, yi)
                    && self.get_signed(xi + 1, yi)
                    && self.get_signed(xi, yi - 1)
                    && self.get_signed(xi, yi + 1);
                out.set(x, y, keep);
            }
        }
        out
    }

    /// Pixels set or 4-adjacent to a set pixel.
    pub fn dilated(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let (xi, yi) = (x as isize, y as isize);
                let on = self.get(x, y)
                    || self.get_signed(xi - 1, yi)
                    || self.get_signed(xi + 1, yi)
                    || self.get_signed(xi, yi - 1)
                    || self.get_signed(xi, yi + 1);
                out.set(x, y, on);
            }
        }
        out
    }

    /// Pixels in the same set as `self` that differ from a 4-neighbour.
    pub fn is_boundary(&self, x: usize, y: usize) -> bool {
        let (xi, yi) = (x as isize, y as isize);
        let v = self.get(x, y);
        v && [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .iter()
            .any(|(dx, dy)| !self.get_signed(xi + dx, yi + dy))
    }

    /// Largest 4-connected component; ties go to the component found first in
    /// raster order.
    pub fn largest_component(&self) -> Self {
        let mut label = vec![usize::MAX; self.bits.len()];
        let mut best: Option<(usize, Vec<usize>)> = None;
        let mut queue = VecDeque::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] != usize::MAX {
                continue;
            }
            let mut members = Vec::new();
            label[start] = start;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                members.push(i);
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if self.get_signed(nx, ny) {
                        let j = ny as usize * self.width + nx as usize;
                        if label[j] == usize::MAX {
                            label[j] = start;
                            queue.push_back(j);
                        }
                    }
                }
            }
            if best.as_ref().is_none_or(|(n, _)| members.len() > *n) {
                best = Some((members.len(), members));
            }
        }
        let mut out = Self::new(self.width, self.height);
        if let Some((_, members)) = best {
            for i in members {
                out.bits[i] = true;
            }
        }
        out
    }

    /// Outer boundary of the component containing the top-left-most set
    /// pixel, as pixel-corner coordinates. Diagonal contacts are treated as
    /// disconnected.
    pub(crate) fn trace_outer_boundary(&self) -> Option<Vec<(i64, i64)>> {
        let first = self.bits.iter().position(|&b| b)?;
        let (sx, sy) = ((first % self.width) as i64, (first / self.width) as i64);
        let inside = |x: i64, y: i64| self.get_signed(x as isize, y as isize);
        // Walk along pixel edges keeping the component on the left-hand side
        // (y grows downward, so "left" of direction (dx, dy) is (dy, -dx)).
        // Direction vectors: E, S, W, N.
        const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
        // pixel to the left/right of an edge leaving corner (x, y) in direction d
        let left_px = |x: i64, y: i64, d: usize| match d {
            0 => (x, y - 1),
            1 => (x, y),
            2 => (x - 1, y),
            _ => (x - 1, y - 1),
        };
        let right_px = |x: i64, y: i64, d: usize| match d {
            0 => (x, y),
            1 => (x - 1, y),
            2 => (x - 1, y - 1),
            _ => (x, y - 1),
        };
        let is_edge = |x: i64, y: i64, d: usize| {
            let (lx, ly) = left_px(x, y, d);
            let (rx, ry) = right_px(x, y, d);
            !inside(lx, ly) && inside(rx, ry)
        };
        // The top edge of the first pixel, walked west→east, has the pixel on
        // the right; we trace with the component on the right-hand side.
        let (mut x, mut y, mut d) = (sx, sy, 0usize);
        let start = (x, y, d);
        let mut ring = Vec::new();
        loop {
            ring.push((x, y));
            x += DIRS[d].0;
            y += DIRS[d].1;
            // prefer turning toward the component (right), then straight, then left
            let next = [(d + 1) % 4, d, (d + 3) % 4]
                .into_iter()
                .find(|&nd| is_edge(x, y, nd))?;
            d = next;
            if (x, y, d) == start {
                break;
            }
            if ring.len() > 4 * (self.width + 1) * (self.height + 1) {
                return None;
            }
        }
        Some(ring)
    }

    /// Even-odd fill of `p` by pixel-centre inclusion.
    pub fn rasterize(p: &Polygon, width: usize, height: usize) -> Self {
        let mut out = Self::new(width, height);
        if p.area().abs() < 1e-15 {
            return out;
        }
        let v = p.vertices();
        let n = v.len();
        let mut xs = Vec::with_capacity(n);
        for row in 0..height {
            let py = (row as f64 + 0.5) / height as f64;
            xs.clear();
            for i in 0..n {
                let [x1, y1] = v[i];
                let [x2, y2] = v[(i + 1) % n];
                if (y1 > py) != (y2 > py) {
                    xs.push(x1 + (py - y1) * (x2 - x1) / (y2 - y1));
                }
            }
            for col in 0..width {
                let px = (col as f64 + 0.5) / width as f64;
                let crossings = xs.iter().filter(|&&xi| px < xi).count();
                if crossings % 2 == 1 {
                    out.set(col, row, true);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_component_picks_bigger_blob() {
        let mut m = BinaryMask::new(6, 3);
        m.set(0, 0, true);
        for x in 3..6 {
            m.set(x, 1, true);
        }
        // diagonal contact does not connect
        m.set(2, 2, true);
        let c = m.largest_component();
        assert_eq!(c.count(), 3);
        assert!(c.get(4, 1) && !c.get(0, 0) && !c.get(2, 2));
    }

    #[test]
    fn single_pixel_boundary() {
        let mut m = BinaryMask::new(3, 3);
        m.set(1, 1, true);
        let ring = m.trace_outer_boundary().unwrap();
        assert_eq!(ring, vec![(1, 1), (2, 1), (2, 2), (1, 2)]);
    }

    #[test]
    fn erode_dilate_bracket_mask() {
        let mut m = BinaryMask::new(5, 5);
        for y in 1..4 {
            for x in 1..4 {
                m.set(x, y, true);
            }
        }
        assert_eq!(m.eroded().count(), 1);
        assert_eq!(m.dilated().count(), 9 + 12);
    }
}
