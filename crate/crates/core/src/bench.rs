//! Synthetic crowd scenes, counting metrics, and the experiment harnesses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{binarize, mask_intersect, mask_union, DensityMap, Mask, Point2};
use crate::model::FeatureMap;
use crate::prompt::{context_mask, offline_prompt};
use crate::targets::{box_seg_map, density_from_points, perturb_boxes, HeadBox, SceneAnnotation};
use crate::trainer::{emit_pseudo_masks, predict, pretrain_segmenter, train, EpochRecord, TrainConfig, Variant};

const MAX_PLACEMENT_TRIES: usize = 2_000;

/// Generator parameters for one family of synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Annotated point lies uniformly within `jitter · radius` of the head center.
    pub jitter: f64,
    /// Amplitude of the background texture.
    pub texture: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            count_min: 3,
            count_max: 15,
            radius_min: 2.0,
            radius_max: 4.0,
            jitter: 0.6,
            texture: 0.25,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "scene size {}x{}",
                self.width, self.height
            )));
        }
        if self.count_min > self.count_max {
            return Err(Error::InvalidArgument(format!(
                "head-count range [{}, {}] is empty",
                self.count_min, self.count_max
            )));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "head-radius range [{}, {}] is empty or non-positive",
                self.radius_min, self.radius_max
            )));
        }
        let fits = 2.0 * self.radius_max <= (self.width.min(self.height) - 1) as f64;
        if !fits {
            return Err(Error::InvalidArgument("largest head does not fit in the image".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::InvalidArgument(format!("jitter {} outside [0, 1]", self.jitter)));
        }
        if !(self.texture >= 0.0 && self.texture.is_finite()) {
            return Err(Error::InvalidArgument(format!("texture amplitude {}", self.texture)));
        }
        Ok(())
    }
}

/// An image with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: FeatureMap,
    pub ann: SceneAnnotation,
    /// True head centers, kept for diagnostics.
    pub centers: Vec<Point2>,
}

/// Train and held-out scenes. The split is fixed when generated.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Render one scene from `spec`, using `spec.seed` directly.
pub fn gen_scene(spec: &SceneSpec, id: usize) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.random_range(spec.count_min..=spec.count_max);

    let mut heads: Vec<(Point2, f64)> = Vec::with_capacity(count);
    let mut tries = 0;
    while heads.len() < count {
        tries += 1;
        if tries > MAX_PLACEMENT_TRIES * count.max(1) {
            return Err(Error::InvalidArgument(format!(
                "could not place {count} heads in a {w}x{h} scene (placed {})",
                heads.len()
            )));
        }
        let r = if spec.radius_min == spec.radius_max {
            spec.radius_min
        } else {
            rng.random_range(spec.radius_min..spec.radius_max)
        };
        let cx = rng.random_range(r..=(w - 1) as f64 - r);
        let cy = rng.random_range(r..=(h - 1) as f64 - r);
        let c = Point2::new(cx, cy);
        // heads may overlap partially, never swallow each other's centers
        if heads.iter().all(|&(o, ro)| o.dist(c) >= r.max(ro) + 1.0) {
            heads.push((c, r));
        }
    }

    let mut image = FeatureMap::zeros(3, h, w);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let tint: [f64; 3] = [
        rng.random_range(0.2..0.4),
        rng.random_range(0.2..0.4),
        rng.random_range(0.2..0.4),
    ];
    for y in 0..h {
        for x in 0..w {
            let wave: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            let grain: f64 = rng.random_range(-1.0..1.0);
            for (ch, t) in tint.iter().enumerate() {
                let v = t + spec.texture * (0.6 * wave + 0.4 * grain);
                image.data[(ch * h + y) * w + x] = v;
            }
        }
    }
    // Clutter: head-colored rectangles, more and brighter as texture grows.
    let clutter = rng.random_range(0..=(12.0 * spec.texture).ceil() as usize);
    for _ in 0..clutter {
        let bw = rng.random_range(1..=(2.0 * spec.radius_max) as usize + 2);
        let bh = rng.random_range(1..=(2.0 * spec.radius_max) as usize + 2);
        let x0 = rng.random_range(0..w.saturating_sub(bw).max(1));
        let y0 = rng.random_range(0..h.saturating_sub(bh).max(1));
        let gain = (2.0 * spec.texture).min(1.0) * rng.random_range(0.6..1.0);
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                for (ch, col) in [0.85, 0.65, 0.50].iter().enumerate() {
                    let px = &mut image.data[(ch * h + y) * w + x];
                    *px = (1.0 - gain) * *px + gain * col;
                }
            }
        }
    }

    let mut points = Vec::with_capacity(count);
    let mut boxes = Vec::with_capacity(count);
    let mut centers = Vec::with_capacity(count);
    for &(c, r) in &heads {
        let color = [
            0.85 + rng.random_range(-0.05..0.05),
            0.65 + rng.random_range(-0.05..0.05),
            0.50 + rng.random_range(-0.05..0.05),
        ];
        let (x0, x1) = (
            (c.x - r).floor().max(0.0) as usize,
            ((c.x + r).ceil() as usize).min(w - 1),
        );
        let (y0, y1) = (
            (c.y - r).floor().max(0.0) as usize,
            ((c.y + r).ceil() as usize).min(h - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = Point2::new(x as f64, y as f64).dist_sq(c) / (r * r);
                if d2 <= 1.0 {
                    let shade = 1.0 - 0.3 * d2;
                    for (ch, col) in color.iter().enumerate() {
                        image.data[(ch * h + y) * w + x] = col * shade;
                    }
                }
            }
        }
        let (theta, u): (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random());
        let rad = spec.jitter * r * u.sqrt();
        let p = Point2::new(
            (c.x + rad * theta.cos()).clamp(c.x - r, c.x + r),
            (c.y + rad * theta.sin()).clamp(c.y - r, c.y + r),
        );
        points.push(p);
        boxes.push(HeadBox::new(c.x - r, c.y - r, c.x + r, c.y + r));
        centers.push(c);
    }
    // Pixel values are kept f32-representable so images survive PFM exactly.
    for v in &mut image.data {
        *v = f64::from(*v as f32);
    }
    let ann = SceneAnnotation {
        id,
        width: w,
        height: h,
        points,
        boxes: Some(boxes),
    };
    ann.validate()?;
    Ok(Scene { image, ann, centers })
}

/// `n_train + n_test` scenes with ids `0..n_train` for training and
/// `n_train..` for the held-out split.
pub fn gen_dataset(spec: &SceneSpec, n_train: usize, n_test: usize) -> Result<Dataset> {
    spec.validate()?;
    let scene = |i: usize| {
        let s = SceneSpec {
            seed: mix_seed(spec.seed, i as u64),
            ..spec.clone()
        };
        gen_scene(&s, i)
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: (0..n_train).map(scene).collect::<Result<_>>()?,
        test: (n_train..n_train + n_test).map(scene).collect::<Result<_>>()?,
    })
}

/// Counting errors over a set of scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    pub rmse: f64,
    /// `(predicted, true)` count per scene.
    pub counts: Vec<(f64, f64)>,
}

pub fn eval_counts(preds: &[DensityMap], anns: &[SceneAnnotation]) -> Result<EvalResult> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if preds.len() != anns.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} annotations",
            preds.len(),
            anns.len()
        )));
    }
    let counts: Vec<(f64, f64)> = preds
        .iter()
        .zip(anns)
        .map(|(p, a)| (p.sum(), a.count() as f64))
        .collect();
    Ok(eval_from_counts(counts))
}

pub fn eval_from_counts(counts: Vec<(f64, f64)>) -> EvalResult {
    let n = counts.len() as f64;
    let mae = counts.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let rmse = (counts.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    debug_assert!(mae <= rmse * (1.0 + 1e-12) + 1e-12, "mae {mae} > rmse {rmse}");
    EvalResult { mae, rmse, counts }
}

/// Intersection over union; 1 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = mask_intersect(a, b)?.count();
    let union = mask_union(a, b)?.count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pretrain on the training split's boxes and emit its pseudo masks.
pub fn pseudo_masks_for(train_scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<Mask>> {
    let pre = pretrain_segmenter(train_scenes, cfg)?;
    emit_pseudo_masks(Some(&pre.state), train_scenes, cfg.tau_mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mae: f64,
    pub rmse: f64,
}

fn final_row(variant: Variant, log: &[EpochRecord]) -> AblationRow {
    let last = log.last().expect("at least one epoch");
    AblationRow {
        variant,
        mae: last.test_mae,
        rmse: last.test_rmse,
    }
}

/// Train every requested variant against one set of pseudo masks.
pub fn run_ablation(data: &Dataset, variants: &[Variant], cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let needs_seg = variants.iter().any(|v| v.spec().use_segmenter);
    let pseudo = if needs_seg {
        Some(pseudo_masks_for(&data.train, cfg)?)
    } else {
        None
    };
    variants
        .iter()
        .map(|&v| {
            let out = train(v.spec(), &data.train, &data.test, pseudo.as_deref(), cfg)?;
            Ok(final_row(v, &out.log))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub alpha: f64,
    pub variant: Variant,
    pub mae: f64,
    pub rmse: f64,
}

/// For every alpha: jitter the training boxes, re-pretrain, re-emit pseudo
/// masks, and train each variant.
pub fn run_noise_sweep(
    data: &Dataset,
    alphas: &[f64],
    variants: &[Variant],
    cfg: &TrainConfig,
) -> Result<Vec<NoiseRow>> {
    cfg.validate()?;
    if let Some(a) = alphas.iter().find(|a| !(0.0..=0.5).contains(*a)) {
        return Err(Error::InvalidArgument(format!("alpha {a} outside [0, 0.5]")));
    }
    let mut rows = Vec::new();
    for &alpha in alphas {
        let noisy: Vec<Scene> = data
            .train
            .iter()
            .map(|s| {
                let ann = perturb_boxes(&s.ann, alpha, mix_seed(cfg.seed, s.ann.id as u64))?;
                Ok(Scene { ann, ..s.clone() })
            })
            .collect::<Result<_>>()?;
        let pseudo = pseudo_masks_for(&noisy, cfg)?;
        for &v in variants {
            let out = train(v.spec(), &data.train, &data.test, Some(&pseudo), cfg)?;
            let row = final_row(v, &out.log);
            rows.push(NoiseRow {
                alpha,
                variant: v,
                mae: row.mae,
                rmse: row.rmse,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurves {
    pub without_context: Vec<EpochRecord>,
    pub with_context: Vec<EpochRecord>,
}

/// Train the full method twice, with the context-loss weight at 0 and at 1.
pub fn run_convergence_study(data: &Dataset, cfg: &TrainConfig) -> Result<ConvergenceCurves> {
    cfg.validate()?;
    let pseudo = pseudo_masks_for(&data.train, cfg)?;
    let run = |lambda_c: f64| -> Result<Vec<EpochRecord>> {
        let mut c = cfg.clone();
        c.weights.lambda_c = lambda_c;
        Ok(train(Variant::Ddag.spec(), &data.train, &data.test, Some(&pseudo), &c)?.log)
    };
    Ok(ConvergenceCurves {
        without_context: run(0.0)?,
        with_context: run(1.0)?,
    })
}

/// Mean IoU of various masks against the head-box maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// Pseudo masks of the held-out scenes.
    pub pseudo_test: f64,
    /// Held-out pseudo masks after the offline prompt and one online prompt
    /// with the trained model's prediction.
    pub prompted_test: f64,
    /// Initial pseudo masks of the training scenes.
    pub pseudo_train: f64,
    /// Target masks stored for the training scenes when training ended.
    pub stored_train: f64,
}

/// Train the full method, then compare mask quality before and after
/// prompting on both splits.
pub fn run_iou_study(data: &Dataset, cfg: &TrainConfig) -> Result<IouReport> {
    cfg.validate()?;
    let pre = pretrain_segmenter(&data.train, cfg)?;
    let pseudo_train = emit_pseudo_masks(Some(&pre.state), &data.train, cfg.tau_mask)?;
    let pseudo_test = emit_pseudo_masks(Some(&pre.state), &data.test, cfg.tau_mask)?;
    let out = train(Variant::Ddag.spec(), &data.train, &data.test, Some(&pseudo_train), cfg)?;

    let mean_iou = |masks: &mut dyn Iterator<Item = Result<(Mask, &Scene)>>| -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for item in masks {
            let (m, s) = item?;
            total += mask_iou(&m, &box_seg_map(&s.ann)?)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyInput("scenes"));
        }
        Ok(total / n as f64)
    };

    let preds = predict(
        &out.state,
        &data.test,
        Variant::Ddag.spec().topology(),
        cfg.density_factor,
    )?;
    let prompted = data.test.iter().zip(&pseudo_test).zip(&preds).map(|((s, m), p)| {
        let y = density_from_points(&s.ann, &cfg.kernel)?;
        let off = offline_prompt(m, &y)?;
        let ctx = context_mask(&s.ann, cfg.prompt.k)?;
        let grown = mask_union(&off, &binarize(p, cfg.prompt.tau_pred))?;
        Ok((mask_intersect(&grown, &ctx)?, s))
    });
    let stored = data.train.iter().enumerate().map(|(i, s)| {
        let m = out.targets.get(i).ok_or(Error::UnknownScene(i))?;
        Ok((m.clone(), s))
    });

    Ok(IouReport {
        pseudo_test: mean_iou(&mut pseudo_test.iter().zip(&data.test).map(|(m, s)| Ok((m.clone(), s))))?,
        prompted_test: mean_iou(&mut { prompted })?,
        pseudo_train: mean_iou(&mut pseudo_train.iter().zip(&data.train).map(|(m, s)| Ok((m.clone(), s))))?,
        stored_train: mean_iou(&mut { stored })?,
    })
}
