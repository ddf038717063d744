//! Optimizer, segmenter pretraining, pseudo-mask emission and the joint
//! training loop with its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{eval_counts, Scene};
use crate::error::{Error, Result};
use crate::geometry::{binarize, DensityMap, Mask, ProbabilityMap};
use crate::losses::{total_loss, LossWeights, DEFAULT_TAU_MASK};
use crate::model::{ChannelPlan, ModelState, Topology};
use crate::prompt::{PromptConfig, TargetStore};
use crate::targets::{box_seg_map, density_from_points, point_pseudo_mask, KernelSpec};

/// Which components of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub use_segmenter: bool,
    pub use_offline_prompt: bool,
    pub use_online_prompt: bool,
    pub use_context_loss: bool,
}

impl VariantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.use_online_prompt && !self.use_offline_prompt {
            return Err(Error::InvalidArgument(
                "online prompt requires the offline prompt".into(),
            ));
        }
        if (self.use_offline_prompt || self.use_context_loss) && !self.use_segmenter {
            return Err(Error::InvalidArgument(
                "prompts and context loss require the segmenter".into(),
            ));
        }
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        if self.use_segmenter {
            Topology::TwoBranch
        } else {
            Topology::RegressorOnly
        }
    }
}

/// The seven rungs of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Regressor only.
    #[serde(rename = "reg")]
    Reg,
    /// Regressor + segmenter trained on the pseudo masks.
    #[serde(rename = "rsg")]
    Rsg,
    /// + offline point prompt.
    #[serde(rename = "p-dag")]
    PDag,
    /// + offline and online point prompt.
    #[serde(rename = "p-ddag")]
    PDdag,
    /// + context loss, no point prompt.
    #[serde(rename = "c-dag")]
    CDag,
    /// Offline prompt + context loss.
    #[serde(rename = "dag")]
    Dag,
    /// Full method: offline + online prompt + context loss.
    #[serde(rename = "ddag")]
    Ddag,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Reg,
        Variant::Rsg,
        Variant::PDag,
        Variant::PDdag,
        Variant::CDag,
        Variant::Dag,
        Variant::Ddag,
    ];

    pub fn spec(self) -> VariantSpec {
        let (seg, off, on, con) = match self {
            Variant::Reg => (false, false, false, false),
            Variant::Rsg => (true, false, false, false),
            Variant::PDag => (true, true, false, false),
            Variant::PDdag => (true, true, true, false),
            Variant::CDag => (true, false, false, true),
            Variant::Dag => (true, true, false, true),
            Variant::Ddag => (true, true, true, true),
        };
        VariantSpec {
            use_segmenter: seg,
            use_offline_prompt: off,
            use_online_prompt: on,
            use_context_loss: con,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Reg => "reg",
            Variant::Rsg => "rsg",
            Variant::PDag => "p-dag",
            Variant::PDdag => "p-ddag",
            Variant::CDag => "c-dag",
            Variant::Dag => "dag",
            Variant::Ddag => "ddag",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "reg" => Variant::Reg,
            "rsg" => Variant::Rsg,
            "p-dag" | "p†" => Variant::PDag,
            "p-ddag" | "p‡" => Variant::PDdag,
            "c-dag" | "c†" => Variant::CDag,
            "dag" | "†" => Variant::Dag,
            "ddag" | "‡" => Variant::Ddag,
            other => return Err(Error::InvalidArgument(format!("unknown variant '{other}'"))),
        })
    }
}

/// Where the offline pseudo masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PseudoMaskSource {
    /// Segmenter pretrained on head boxes.
    Boxes,
    /// Segmenter pretrained on dilated point masks.
    Points { radius: f64 },
    /// No pseudo mask at all.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub source: PseudoMaskSource,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 4,
            source: PseudoMaskSource::Boxes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub prompt: PromptConfig,
    pub weights: LossWeights,
    pub kernel: KernelSpec,
    pub plan: ChannelPlan,
    pub tau_mask: f64,
    /// The network is trained against density maps multiplied by this
    /// factor; predictions are divided by it before counting or prompting.
    pub density_factor: f64,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 700,
            learning_rate: 1e-4,
            batch_size: 16,
            seed: 0,
            prompt: PromptConfig::default(),
            weights: LossWeights::default(),
            kernel: KernelSpec::default(),
            plan: ChannelPlan::default(),
            tau_mask: DEFAULT_TAU_MASK,
            density_factor: 100.0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized settings for 32x32 synthetic scenes: 120 epochs, online
    /// prompting from epoch 20, batch 4, a 5-pixel kernel and a narrow
    /// channel plan. Everything else keeps its default.
    pub fn desk() -> Self {
        Self {
            epochs: 120,
            batch_size: 4,
            prompt: PromptConfig {
                kappa: 20,
                ..PromptConfig::default()
            },
            kernel: KernelSpec::with_size(5),
            plan: ChannelPlan {
                backbone: vec![8, 16],
                branch: vec![8, 4],
                ..ChannelPlan::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch sizes must be positive".into()));
        }
        if self.prompt.kappa > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "kappa ({}) exceeds epochs ({})",
                self.prompt.kappa, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.pretrain.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(self.density_factor > 0.0 && self.density_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "density factor {}",
                self.density_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_mask) {
            return Err(Error::InvalidArgument(format!("tau_mask {}", self.tau_mask)));
        }
        self.prompt.validate()?;
        self.weights.validate()?;
        self.kernel.validate()?;
        self.plan.validate()
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state holds {} moments; got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step_model(&mut self, state: &mut ModelState, grads: &[f64], lr: f64) -> Result<()> {
        self.step(state.params_mut(), grads, lr)
    }
}

/// Per-epoch training record; one line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Number of completed epochs (1-based).
    pub epoch: usize,
    pub l_den: f64,
    pub l_seg: f64,
    pub l_con: f64,
    pub train_mae: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
    pub targets: TargetStore,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: ModelState,
    /// Mean segmentation loss before training, then after every epoch.
    pub losses: Vec<f64>,
}

fn segmentation_targets(scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<Mask>> {
    scenes
        .iter()
        .map(|s| match cfg.pretrain.source {
            PseudoMaskSource::Boxes => box_seg_map(&s.ann),
            PseudoMaskSource::Points { radius } => point_pseudo_mask(&s.ann, &cfg.kernel, radius),
            PseudoMaskSource::Empty => Ok(Mask::empty(s.ann.width, s.ann.height)),
        })
        .collect()
}

fn mean_seg_loss(state: &ModelState, scenes: &[Scene], targets: &[Mask]) -> Result<f64> {
    let mut total = 0.0;
    for (s, t) in scenes.iter().zip(targets) {
        let out = state.forward(&s.image, Topology::TwoBranch)?;
        let m = out.mask.expect("two-branch output");
        total += crate::losses::loss_seg(&m, t)?.value;
    }
    Ok(total / scenes.len().max(1) as f64)
}

/// Train a fresh two-branch model on segmentation alone, against head-box
/// maps (or point masks, per `cfg.pretrain.source`).
pub fn pretrain_segmenter(scenes: &[Scene], cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.pretrain.source == PseudoMaskSource::Boxes {
        for s in scenes {
            s.ann.require_boxes()?;
        }
    }
    let targets = segmentation_targets(scenes, cfg)?;
    let mut state = ModelState::init(cfg.seed ^ 0x5e6_0000, cfg.plan.clone())?;
    let mut losses = vec![mean_seg_loss(&state, scenes, &targets)?];
    if cfg.pretrain.epochs == 0 || scenes.is_empty() {
        return Ok(PretrainOutcome { state, losses });
    }
    let weights = LossWeights {
        lambda_d: 0.0,
        lambda_s: 1.0,
        lambda_c: 0.0,
    };
    let mut adam = Adam::new(state.num_params());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e6_0001);
    let mut grads = vec![0.0; state.num_params()];
    for _ in 0..cfg.pretrain.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.pretrain.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let s = &scenes[i];
                let out = state.forward(&s.image, Topology::TwoBranch)?;
                let mask = out.mask.as_ref().expect("two-branch output");
                let zero = DensityMap::zeros(s.ann.width, s.ann.height);
                let r = total_loss(&out.density, &zero, mask, &targets[i], &weights, cfg.tau_mask)?;
                epoch_loss += r.l_seg;
                state.backward_into(&out.trace, &r.grad_density, Some(&r.grad_mask), &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step_model(&mut state, &grads, cfg.pretrain.learning_rate)?;
        }
        let mean = epoch_loss / scenes.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("segmenter pretraining loss {mean}")));
        }
        losses.push(mean_seg_loss(&state, scenes, &targets)?);
    }
    Ok(PretrainOutcome { state, losses })
}

/// Binarized segmenter output for every scene. `None` gives the all-empty
/// masks of the no-pseudo-mask ablation.
pub fn emit_pseudo_masks(state: Option<&ModelState>, scenes: &[Scene], tau_mask: f64) -> Result<Vec<Mask>> {
    scenes
        .iter()
        .map(|s| match state {
            None => Ok(Mask::empty(s.ann.width, s.ann.height)),
            Some(state) => {
                let out = state.forward(&s.image, Topology::TwoBranch)?;
                Ok(binarize(&out.mask.expect("two-branch output"), tau_mask))
            }
        })
        .collect()
}

/// Predicted density for each scene, in heads per pixel.
pub fn predict(
    state: &ModelState,
    scenes: &[Scene],
    topology: Topology,
    density_factor: f64,
) -> Result<Vec<DensityMap>> {
    scenes
        .iter()
        .map(|s| {
            let out = state.forward(&s.image, topology)?;
            Ok(out.density.map(|v| v / density_factor))
        })
        .collect()
}

/// Joint training of one ablation variant.
///
/// `pseudo_masks` is parallel to `train` and required whenever the variant
/// uses the segmenter. Online prompting refreshes every scene's target once
/// per epoch from epoch `cfg.prompt.kappa` on, using the density predicted
/// for that scene during the epoch.
pub fn train(
    variant: VariantSpec,
    train: &[Scene],
    test: &[Scene],
    pseudo_masks: Option<&[Mask]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    variant.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let topology = variant.topology();
    let weights = LossWeights {
        lambda_d: cfg.weights.lambda_d,
        lambda_s: if variant.use_segmenter {
            cfg.weights.lambda_s
        } else {
            0.0
        },
        lambda_c: if variant.use_context_loss {
            cfg.weights.lambda_c
        } else {
            0.0
        },
    };

    let densities: Vec<DensityMap> = train
        .iter()
        .map(|s| density_from_points(&s.ann, &cfg.kernel))
        .collect::<Result<_>>()?;
    let scaled: Vec<DensityMap> = densities.iter().map(|d| d.map(|v| v * cfg.density_factor)).collect();

    let mut targets = TargetStore::new();
    if variant.use_segmenter {
        let pseudo = pseudo_masks.ok_or_else(|| {
            Error::InvalidArgument("variant uses the segmenter but no pseudo masks were given".into())
        })?;
        if pseudo.len() != train.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pseudo masks for {} training scenes",
                pseudo.len(),
                train.len()
            )));
        }
        for (i, m) in pseudo.iter().enumerate() {
            if variant.use_offline_prompt {
                targets.initialize(i, m, &densities[i])?;
            } else {
                m.check_shape(&densities[i])?;
                targets.insert(i, m.clone());
            }
        }
    }

    let mut state = ModelState::init(cfg.seed, cfg.plan.clone())?;
    let mut adam = Adam::new(state.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a41_0000);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = vec![0.0; state.num_params()];
    let mut latest: Vec<Option<DensityMap>> = vec![None; train.len()];
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut l_den, mut l_seg, mut l_con, mut abs_err) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let s = &train[i];
                let out = state.forward(&s.image, topology)?;
                let (w, h) = (s.ann.width, s.ann.height);
                let placeholder;
                let (mask_prob, mask_target) = match (&out.mask, targets.get(i)) {
                    (Some(m), Some(t)) => (m, t),
                    _ => {
                        placeholder = (ProbabilityMap::filled(w, h, 0.5), Mask::empty(w, h));
                        (&placeholder.0, &placeholder.1)
                    }
                };
                let r = total_loss(&out.density, &scaled[i], mask_prob, mask_target, &weights, cfg.tau_mask)?;
                l_den += r.l_den;
                l_seg += r.l_seg;
                l_con += r.l_con;
                abs_err += (out.density.sum() / cfg.density_factor - s.ann.count() as f64).abs();
                let grad_mask = out.mask.as_ref().map(|_| &r.grad_mask);
                state.backward_into(&out.trace, &r.grad_density, grad_mask, &mut grads)?;
                if variant.use_online_prompt {
                    latest[i] = Some(out.density.map(|v| v / cfg.density_factor));
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step_model(&mut state, &grads, cfg.learning_rate)?;
        }

        if variant.use_online_prompt && epoch >= cfg.prompt.kappa {
            for (i, pred) in latest.iter().enumerate() {
                if let Some(pred) = pred {
                    targets.refresh(i, pred, &train[i].ann, &cfg.prompt, epoch)?;
                }
            }
        }

        let n = train.len() as f64;
        let (test_mae, test_rmse) = if test.is_empty() {
            (0.0, 0.0)
        } else {
            let preds = predict(&state, test, topology, cfg.density_factor)?;
            let anns: Vec<_> = test.iter().map(|s| s.ann.clone()).collect();
            let e = eval_counts(&preds, &anns)?;
            (e.mae, e.rmse)
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            l_den: l_den / n,
            l_seg: l_seg / n,
            l_con: l_con / n,
            train_mae: abs_err / n,
            test_mae,
            test_rmse,
        };
        if ![rec.l_den, rec.l_seg, rec.l_con, rec.test_mae]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!("epoch {} produced {rec:?}", rec.epoch)));
        }
        log.push(rec);
    }
    Ok(TrainOutcome { state, log, targets })
}
