//! Pixel-grid primitives: dense grids, binary mask algebra, disk dilation,
//! spatial K-NN and minimum enclosing circles.
//!
//! Grids are row-major with `x` running along a row and `y` down the rows.
//! Everything here is a pure function of its inputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack used for every point-in-circle test.
pub const CONTAINMENT_EPS: f64 = 1e-9;

/// Dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Non-negative densities; integrates to an instance count.
pub type DensityMap = Grid<f64>;
/// Per-pixel probabilities in `[0, 1]`.
pub type ProbabilityMap = Grid<f64>;
/// Binary foreground mask.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }
}

impl Grid<f64> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl Grid<bool> {
    pub fn empty(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::filled(width, height, true)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixel-wise `self ⊆ other`. Shapes must agree.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Sub-pixel image coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dist_sq(self, other: Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn dist(self, other: Point2) -> f64 {
        self.dist_sq(other).sqrt()
    }

    fn midpoint(self, other: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: Point2,
    pub radius: f64,
}

impl Circle {
    pub fn point(p: Point2) -> Self {
        Self { center: p, radius: 0.0 }
    }

    /// Circle with `a`-`b` as diameter.
    pub fn from_diameter(a: Point2, b: Point2) -> Self {
        let center = a.midpoint(b);
        Self {
            center,
            radius: center.dist(a).max(center.dist(b)),
        }
    }

    /// Circumcircle of three points. Collinear triples yield `None`.
    pub fn circumcircle(a: Point2, b: Point2, c: Point2) -> Option<Self> {
        let (bx, by) = (b.x - a.x, b.y - a.y);
        let (cx, cy) = (c.x - a.x, c.y - a.y);
        let d = 2.0 * (bx * cy - by * cx);
        let scale = (bx * bx + by * by).max(cx * cx + cy * cy);
        if d.abs() <= 1e-12 * scale || scale == 0.0 {
            return None;
        }
        let b2 = bx * bx + by * by;
        let c2 = cx * cx + cy * cy;
        let ux = (cy * b2 - by * c2) / d;
        let uy = (bx * c2 - cx * b2) / d;
        let center = Point2::new(a.x + ux, a.y + uy);
        let radius = center.dist(a).max(center.dist(b)).max(center.dist(c));
        Some(Self { center, radius })
    }

    /// Point-in-circle with [`CONTAINMENT_EPS`] slack.
    #[inline]
    pub fn covers(&self, p: Point2) -> bool {
        self.center.dist(p) <= self.radius + CONTAINMENT_EPS
    }
}

/// `out[i] = g[i] > tau`.
pub fn binarize(g: &Grid<f64>, tau: f64) -> Mask {
    g.map(|&v| v > tau)
}

pub fn mask_union(a: &Mask, b: &Mask) -> Result<Mask> {
    zip_masks(a, b, |x, y| x || y)
}

pub fn mask_intersect(a: &Mask, b: &Mask) -> Result<Mask> {
    zip_masks(a, b, |x, y| x && y)
}

fn zip_masks(a: &Mask, b: &Mask, op: impl Fn(bool, bool) -> bool) -> Result<Mask> {
    a.check_shape(b)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| op(x, y)).collect();
    Ok(Grid {
        width: a.width,
        height: a.height,
        data,
    })
}

/// Integer offsets `(dx, dy)` with `dx² + dy² ≤ r²`.
fn disk_offsets(r: f64) -> Vec<(isize, isize)> {
    let reach = r.floor() as isize;
    let limit = r * r + CONTAINMENT_EPS;
    let mut out = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if ((dx * dx + dy * dy) as f64) <= limit {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Binary dilation by a Euclidean disk of radius `r`, clipped at the borders.
pub fn dilate_disk(m: &Mask, r: f64) -> Result<Mask> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("dilation radius {r}")));
    }
    let offsets = disk_offsets(r);
    let (w, h) = (m.width as isize, m.height as isize);
    let mut out = Mask::empty(m.width, m.height);
    for y in 0..h {
        for x in 0..w {
            if !m.get(x as usize, y as usize) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    Ok(out)
}

/// The `k` points nearest to `points[anchor]`, excluding the anchor itself.
///
/// Equal distances are ordered by `(y, x)` ascending, so the result is fully
/// determined by the input set.
pub fn k_nearest(points: &[Point2], anchor: usize, k: usize) -> Result<Vec<Point2>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("k_nearest needs at least one point"));
    }
    if anchor >= points.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor index {anchor} out of range for {} points",
            points.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let origin = points[anchor];
    let mut candidates: Vec<(f64, Point2)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != anchor)
        .map(|(_, &p)| (origin.dist_sq(p), p))
        .collect();
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.y.total_cmp(&b.1.y))
            .then(a.1.x.total_cmp(&b.1.x))
    });
    candidates.truncate(k);
    Ok(candidates.into_iter().map(|(_, p)| p).collect())
}

/// Smallest circle containing every point (Welzl, iterative form).
///
/// The input is shuffled with a fixed seed first so the expected running time
/// is linear while the result stays reproducible.
pub fn min_enclosing_circle(points: &[Point2]) -> Result<Circle> {
    if points.is_empty() {
        return Err(Error::EmptyInput("min_enclosing_circle needs at least one point"));
    }
    let mut pts = points.to_vec();
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(0x00C1_2C1E));

    let mut circle = Circle::point(pts[0]);
    for i in 1..pts.len() {
        if circle.covers(pts[i]) {
            continue;
        }
        circle = Circle::point(pts[i]);
        for j in 0..i {
            if circle.covers(pts[j]) {
                continue;
            }
            circle = Circle::from_diameter(pts[i], pts[j]);
            for k in 0..j {
                if circle.covers(pts[k]) {
                    continue;
                }
                circle = Circle::circumcircle(pts[i], pts[j], pts[k])
                    .unwrap_or_else(|| widest_pair(&[pts[i], pts[j], pts[k]]));
            }
        }
    }
    Ok(circle)
}

fn widest_pair(pts: &[Point2; 3]) -> Circle {
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let (a, b) = pairs
        .iter()
        .copied()
        .max_by(|&(a, b), &(c, d)| pts[a].dist_sq(pts[b]).total_cmp(&pts[c].dist_sq(pts[d])))
        .expect("three pairs");
    Circle::from_diameter(pts[a], pts[b])
}

/// Pixel `(x, y)` is set iff its integer coordinate lies inside `c`.
pub fn rasterize_circle(c: &Circle, width: usize, height: usize) -> Mask {
    let mut out = Mask::empty(width, height);
    if width == 0 || height == 0 {
        return out;
    }
    let reach = c.radius + CONTAINMENT_EPS;
    let x0 = (c.center.x - reach).ceil().max(0.0);
    let y0 = (c.center.y - reach).ceil().max(0.0);
    let x1 = (c.center.x + reach).floor().min((width - 1) as f64);
    let y1 = (c.center.y + reach).floor().min((height - 1) as f64);
    if x0 > x1 || y0 > y1 {
        return out;
    }
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            if c.covers(Point2::new(x as f64, y as f64)) {
                out.set(x, y, true);
            }
        }
    }
    out
}
