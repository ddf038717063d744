//! Learning targets derived from annotations: Gaussian density maps, point
//! pseudo masks, box segmentation maps, and box-noise perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{binarize, dilate_disk, DensityMap, Mask, Point2};

/// Axis-aligned head box, inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl HeadBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.x_min <= p.x && p.x <= self.x_max && self.y_min <= p.y && p.y <= self.y_max
    }

    fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }
}

/// Point annotations (and optionally head boxes) for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<HeadBox>>,
}

impl SceneAnnotation {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        let scene = self.id.to_string();
        if self.width == 0 || self.height == 0 {
            return Err(Error::OutOfBounds {
                scene,
                what: format!("image size {}x{}", self.width, self.height),
            });
        }
        for (i, p) in self.points.iter().enumerate() {
            let inside = p.x.is_finite()
                && p.y.is_finite()
                && p.x >= 0.0
                && p.y >= 0.0
                && p.x < self.width as f64
                && p.y < self.height as f64;
            if !inside {
                return Err(Error::OutOfBounds {
                    scene,
                    what: format!("points[{i}] = ({}, {})", p.x, p.y),
                });
            }
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != self.points.len() {
                return Err(Error::schema(
                    format!("scene {scene}.boxes"),
                    format!("{} boxes for {} points", boxes.len(), self.points.len()),
                ));
            }
            for (i, b) in boxes.iter().enumerate() {
                if !b.is_valid() {
                    return Err(Error::schema(
                        format!("scene {scene}.boxes[{i}]"),
                        "corners must be finite with min <= max",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn require_boxes(&self) -> Result<&[HeadBox]> {
        self.boxes
            .as_deref()
            .ok_or_else(|| Error::MissingBoxes(self.id.to_string()))
    }
}

/// Square Gaussian window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub size: usize,
    pub sigma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::with_size(15)
    }
}

impl KernelSpec {
    /// Window of `size` pixels with `sigma = size / 4`.
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            sigma: size as f64 / 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd and positive, got {}",
                self.size
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("kernel sigma {}", self.sigma)));
        }
        Ok(())
    }
}

/// Normalized Gaussian window (sums to one).
pub fn gaussian_kernel(spec: &KernelSpec) -> Result<DensityMap> {
    spec.validate()?;
    let c = (spec.size - 1) as f64 / 2.0;
    let denom = 2.0 * spec.sigma * spec.sigma;
    let mut values = Vec::with_capacity(spec.size * spec.size);
    for i in 0..spec.size {
        for j in 0..spec.size {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            values.push((-(di * di + dj * dj) / denom).exp());
        }
    }
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    DensityMap::from_vec(spec.size, spec.size, values)
}

/// Nearest pixel to a sub-pixel point, clamped into the grid.
pub fn pixel_of(p: Point2, width: usize, height: usize) -> (usize, usize) {
    let x = (p.x.round().max(0.0) as usize).min(width - 1);
    let y = (p.y.round().max(0.0) as usize).min(height - 1);
    (x, y)
}

/// Ground-truth density: one kernel per point, stamped at the rounded point
/// location. The in-bounds part of each stamp is renormalized so every point
/// contributes mass exactly one.
pub fn density_from_points(ann: &SceneAnnotation, spec: &KernelSpec) -> Result<DensityMap> {
    ann.validate()?;
    let kernel = gaussian_kernel(spec)?;
    let half = (spec.size / 2) as isize;
    let (w, h) = (ann.width as isize, ann.height as isize);
    let mut out = DensityMap::zeros(ann.width, ann.height);
    for &p in &ann.points {
        let (px, py) = pixel_of(p, ann.width, ann.height);
        let (px, py) = (px as isize, py as isize);
        let mut inside = 0.0;
        for ky in 0..spec.size as isize {
            for kx in 0..spec.size as isize {
                let (x, y) = (px + kx - half, py + ky - half);
                if x >= 0 && y >= 0 && x < w && y < h {
                    inside += kernel.get(kx as usize, ky as usize);
                }
            }
        }
        for ky in 0..spec.size as isize {
            for kx in 0..spec.size as isize {
                let (x, y) = (px + kx - half, py + ky - half);
                if x >= 0 && y >= 0 && x < w && y < h {
                    let v = out.get(x as usize, y as usize) + kernel.get(kx as usize, ky as usize) / inside;
                    out.set(x as usize, y as usize, v);
                }
            }
        }
    }
    Ok(out)
}

/// Dilated support of the point density map.
pub fn point_pseudo_mask(ann: &SceneAnnotation, spec: &KernelSpec, radius: f64) -> Result<Mask> {
    let density = density_from_points(ann, spec)?;
    dilate_disk(&binarize(&density, 0.0), radius)
}

/// Union of all head-box regions, inclusive on both ends.
pub fn box_seg_map(ann: &SceneAnnotation) -> Result<Mask> {
    let boxes = ann.require_boxes()?;
    let mut out = Mask::empty(ann.width, ann.height);
    for b in boxes {
        let x0 = b.x_min.ceil().max(0.0);
        let y0 = b.y_min.ceil().max(0.0);
        let x1 = b.x_max.floor().min((ann.width - 1) as f64);
        let y1 = b.y_max.floor().min((ann.height - 1) as f64);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                out.set(x, y, true);
            }
        }
    }
    Ok(out)
}

/// Translate every box by a uniform offset of up to `alpha` times its height
/// on each axis. Boxes are shifted back inside the image if the offset pushes
/// them out, so box sizes are preserved. Points are left alone.
pub fn perturb_boxes(ann: &SceneAnnotation, alpha: f64, seed: u64) -> Result<SceneAnnotation> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "box noise fraction {alpha} outside [0, 0.5]"
        )));
    }
    let mut out = ann.clone();
    let Some(boxes) = out.boxes.as_mut() else {
        return Ok(out);
    };
    if alpha == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (max_x, max_y) = ((ann.width - 1) as f64, (ann.height - 1) as f64);
    for b in boxes.iter_mut() {
        let reach = alpha * b.height();
        let (dx, dy) = if reach > 0.0 {
            (rng.random_range(-reach..=reach), rng.random_range(-reach..=reach))
        } else {
            (0.0, 0.0)
        };
        let dx = clamp_shift(dx, b.x_min, b.x_max, max_x);
        let dy = clamp_shift(dy, b.y_min, b.y_max, max_y);
        b.x_min += dx;
        b.x_max += dx;
        b.y_min += dy;
        b.y_max += dy;
    }
    Ok(out)
}

fn clamp_shift(delta: f64, lo: f64, hi: f64, limit: f64) -> f64 {
    let min_shift = (0.0 - lo).min(0.0);
    let max_shift = (limit - hi).max(0.0);
    delta.clamp(min_shift.min(max_shift), max_shift.max(min_shift))
}
