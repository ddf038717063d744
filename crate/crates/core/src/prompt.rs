//! Point prompts: the offline target initialization, the online refinement
//! from predicted density, and the K-NN context mask that bounds it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    binarize, k_nearest, mask_intersect, mask_union, min_enclosing_circle, rasterize_circle, DensityMap, Mask,
};
use crate::targets::{pixel_of, SceneAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Neighbours per context circle.
    pub k: usize,
    /// First epoch (0-based) at which online prompting runs.
    pub kappa: usize,
    /// Threshold for binarizing predicted density.
    pub tau_pred: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            k: 3,
            kappa: 50,
            tau_pred: 1e-3,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("prompt.k must be >= 1".into()));
        }
        if !(self.tau_pred >= 0.0) {
            return Err(Error::InvalidArgument(format!("prompt.tau_pred {}", self.tau_pred)));
        }
        Ok(())
    }
}

/// Union of per-point minimum enclosing circles over each point and its `k`
/// nearest neighbours, plus the pixel each point rounds to (a zero-radius
/// circle around a sub-pixel point contains no lattice point). With at most
/// one point there is no neighbourhood to bound, so the whole image is
/// returned.
pub fn context_mask(ann: &SceneAnnotation, k: usize) -> Result<Mask> {
    if ann.points.len() <= 1 {
        return Ok(Mask::full(ann.width, ann.height));
    }
    let mut out = Mask::empty(ann.width, ann.height);
    for anchor in 0..ann.points.len() {
        let mut group = k_nearest(&ann.points, anchor, k)?;
        group.push(ann.points[anchor]);
        let circle = min_enclosing_circle(&group)?;
        let disk = rasterize_circle(&circle, ann.width, ann.height);
        for (o, &d) in out.data_mut().iter_mut().zip(disk.data()) {
            *o |= d;
        }
        let (x, y) = pixel_of(ann.points[anchor], ann.width, ann.height);
        out.set(x, y, true);
    }
    Ok(out)
}

/// `m = m_p ∪ B(y)` with a zero threshold on the ground-truth density.
pub fn offline_prompt(pseudo: &Mask, density: &DensityMap) -> Result<Mask> {
    pseudo.check_shape(density)?;
    mask_union(pseudo, &binarize(density, 0.0))
}

/// `m ← (m ∪ B(ŷ)) ∩ m_K`.
pub fn online_prompt(current: &Mask, predicted: &DensityMap, context: &Mask, tau_pred: f64) -> Result<Mask> {
    current.check_shape(predicted)?;
    let grown = mask_union(current, &binarize(predicted, tau_pred))?;
    mask_intersect(&grown, context)
}

/// Evolving per-scene target masks.
///
/// Context masks depend only on the (fixed) point annotations and are cached
/// on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetStore {
    masks: BTreeMap<usize, Mask>,
    contexts: BTreeMap<usize, Mask>,
    refreshes: BTreeMap<usize, usize>,
}

impl TargetStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store `mask` as-is (no prompt) for scene `id`.
    pub fn insert(&mut self, id: usize, mask: Mask) {
        self.masks.insert(id, mask);
        self.refreshes.insert(id, 0);
    }

    /// Initialize scene `id` with the offline prompt of `pseudo` and `density`.
    pub fn initialize(&mut self, id: usize, pseudo: &Mask, density: &DensityMap) -> Result<()> {
        let m = offline_prompt(pseudo, density)?;
        self.insert(id, m);
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&Mask> {
        self.masks.get(&id)
    }

    pub fn context(&self, id: usize) -> Option<&Mask> {
        self.contexts.get(&id)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Number of online refreshes applied to scene `id`.
    pub fn refresh_count(&self, id: usize) -> usize {
        self.refreshes.get(&id).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Mask)> {
        self.masks.iter().map(|(&k, v)| (k, v))
    }

    /// Apply the online prompt for scene `id` once `epoch >= cfg.kappa`.
    /// Returns whether the stored mask was replaced.
    pub fn refresh(
        &mut self,
        id: usize,
        predicted: &DensityMap,
        ann: &SceneAnnotation,
        cfg: &PromptConfig,
        epoch: usize,
    ) -> Result<bool> {
        let current = self.masks.get(&id).ok_or(Error::UnknownScene(id))?;
        if epoch < cfg.kappa {
            return Ok(false);
        }
        let ctx = match self.contexts.entry(id) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                let ctx = context_mask(ann, cfg.k)?;
                current.check_shape(&ctx)?;
                e.insert(ctx)
            }
        };
        let next = online_prompt(current, predicted, ctx, cfg.tau_pred)?;
        self.masks.insert(id, next);
        *self.refreshes.entry(id).or_insert(0) += 1;
        Ok(true)
    }
}
