//! Two-branch fully convolutional network with hand-written backpropagation.
//!
//! Layout: a shared backbone of conv-affine-ReLU blocks feeds a regressor
//! branch and a segmenter branch of identical shape. The regressor features
//! are gated element-wise by `sigmoid(segmenter features)` before a 1x1
//! conv and ReLU density head; the segmenter features go through a 1x1 conv
//! and logistic mask head. All convolutions are stride 1 with zero padding, so
//! outputs have the input resolution.
//!
//! Parameters live in one flat `Vec<f64>` addressed through a fixed layout
//! table, which keeps the optimizer, the checkpoint format and the gradient
//! checker oblivious to layer structure.

use matrixmultiply::dgemm;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DensityMap, Grid, Mask, ProbabilityMap};
use crate::losses::{total_loss, LossReport, LossWeights, DEFAULT_TAU_MASK};

/// Dense `channels × height × width` array, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map {channels}x{height}x{width} has an empty dimension"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Mean over channels, as a single plane.
    pub fn luminance(&self) -> Grid<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v / self.channels as f64;
            }
        }
        Grid::from_vec(self.width, self.height, out).expect("plane size")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// No hidden nonlinearity; used for exactness checks of the backward pass.
    Identity,
}

/// Channel widths of every stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPlan {
    pub input: usize,
    pub backbone: Vec<usize>,
    pub branch: Vec<usize>,
    pub activation: Activation,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self {
            input: 3,
            backbone: vec![16, 32],
            branch: vec![16, 8],
            activation: Activation::Relu,
        }
    }
}

impl ChannelPlan {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.backbone.is_empty() || self.branch.is_empty() {
            return Err(Error::InvalidArgument(
                "channel plan needs an input width and at least one backbone and branch stage".into(),
            ));
        }
        if self.backbone.iter().chain(&self.branch).any(|&c| c == 0) {
            return Err(Error::InvalidArgument(
                "channel plan contains a zero-width stage".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count: conv weights and biases, per-channel
    /// affine pairs, and the two 1x1 heads.
    pub fn parameter_count(&self) -> usize {
        let block = |cin: usize, cout: usize| cin * cout * 9 + cout + 2 * cout;
        let mut total = 0;
        let mut cin = self.input;
        for &c in &self.backbone {
            total += block(cin, c);
            cin = c;
        }
        let mut branch = 0;
        for &c in &self.branch {
            branch += block(cin, c);
            cin = c;
        }
        total + 2 * branch + 2 * (cin + 1)
    }
}

/// Whether the segmenter branch (and with it the gate) participates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    RegressorOnly,
    TwoBranch,
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    channels: usize,
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    affine: Affine,
}

#[derive(Debug, Clone)]
struct Layers {
    backbone: Vec<Block>,
    regressor: Vec<Block>,
    segmenter: Vec<Block>,
    density_head: Conv,
    mask_head: Conv,
}

/// Parameters of the two-branch network.
#[derive(Debug, Clone)]
pub struct ModelState {
    plan: ChannelPlan,
    layout: Vec<ParamBlock>,
    layers: Layers,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.plan == other.plan && self.params == other.params
    }
}

struct LayoutBuilder {
    blocks: Vec<ParamBlock>,
    next: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.next;
        let len: usize = shape.iter().product();
        self.blocks.push(ParamBlock { name, shape, offset });
        self.next += len;
        offset
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = self.push(format!("{prefix}.weight"), vec![cout, cin, k, k]);
        let bias = self.push(format!("{prefix}.bias"), vec![cout]);
        Conv {
            cin,
            cout,
            k,
            weight,
            bias,
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> Block {
        let conv = self.conv(&format!("{prefix}.conv"), cin, cout, 3);
        let scale = self.push(format!("{prefix}.affine.scale"), vec![cout]);
        let shift = self.push(format!("{prefix}.affine.shift"), vec![cout]);
        Block {
            conv,
            affine: Affine {
                channels: cout,
                scale,
                shift,
            },
        }
    }
}

fn build_layout(plan: &ChannelPlan) -> (Vec<ParamBlock>, Layers, usize) {
    let mut b = LayoutBuilder {
        blocks: Vec::new(),
        next: 0,
    };
    let mut cin = plan.input;
    let mut backbone = Vec::new();
    for (i, &c) in plan.backbone.iter().enumerate() {
        backbone.push(b.block(&format!("backbone.{i}"), cin, c));
        cin = c;
    }
    let trunk = cin;
    let branch = |name: &str, b: &mut LayoutBuilder| {
        let mut cin = trunk;
        let mut out = Vec::new();
        for (i, &c) in plan.branch.iter().enumerate() {
            out.push(b.block(&format!("{name}.{i}"), cin, c));
            cin = c;
        }
        out
    };
    let regressor = branch("regressor", &mut b);
    let segmenter = branch("segmenter", &mut b);
    let last = *plan.branch.last().expect("validated plan");
    let density_head = b.conv("density_head", last, 1, 1);
    let mask_head = b.conv("mask_head", last, 1, 1);
    let total = b.next;
    (
        b.blocks,
        Layers {
            backbone,
            regressor,
            segmenter,
            density_head,
            mask_head,
        },
        total,
    )
}

impl ModelState {
    /// He-initialized model. Deterministic in `seed`.
    pub fn init(seed: u64, plan: ChannelPlan) -> Result<Self> {
        plan.validate()?;
        let (layout, layers, total) = build_layout(&plan);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all_blocks = layers.backbone.iter().chain(&layers.regressor).chain(&layers.segmenter);
        for blk in all_blocks {
            he_fill(&mut params, &blk.conv, 1.0, &mut rng);
            params[blk.affine.scale..blk.affine.scale + blk.affine.channels].fill(1.0);
        }
        he_fill(&mut params, &layers.mask_head, 1.0, &mut rng);
        // Small weights and a positive bias keep the density ReLU alive at
        // the start; outputs begin near 1, the scale of a scaled target map.
        he_fill(&mut params, &layers.density_head, 0.1, &mut rng);
        params[layers.density_head.bias] = 1.0;
        Ok(Self {
            plan,
            layout,
            layers,
            params,
            version: 0,
        })
    }

    /// Rebuild a model from a plan and a raw parameter vector.
    pub fn from_params(plan: ChannelPlan, params: Vec<f64>) -> Result<Self> {
        plan.validate()?;
        let (layout, layers, total) = build_layout(&plan);
        if params.len() != total {
            return Err(Error::InvalidArgument(format!(
                "plan needs {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            plan,
            layout,
            layers,
            params,
            version: 0,
        })
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward traces.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, x: &FeatureMap, topology: Topology) -> Result<ForwardOutput> {
        if x.channels != self.plan.input {
            return Err(Error::InvalidArgument(format!(
                "model expects {} input channels, got {}",
                self.plan.input, x.channels
            )));
        }
        if x.height == 0 || x.width == 0 || x.data.len() != x.channels * x.height * x.width {
            return Err(Error::InvalidArgument("malformed input feature map".into()));
        }
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let act = self.plan.activation;
        let p = &self.params;

        let mut backbone = Vec::with_capacity(self.layers.backbone.len());
        let mut cur = x.data.clone();
        for blk in &self.layers.backbone {
            let (rec, out) = block_forward(p, blk, &cur, h, w, act);
            backbone.push(rec);
            cur = out;
        }
        let trunk = cur;

        let mut regressor = Vec::with_capacity(self.layers.regressor.len());
        let mut reg = trunk.clone();
        for blk in &self.layers.regressor {
            let (rec, out) = block_forward(p, blk, &reg, h, w, act);
            regressor.push(rec);
            reg = out;
        }

        let mut segmenter = Vec::new();
        let (gate, seg, fused, mask) = match topology {
            Topology::RegressorOnly => (None, None, reg.clone(), None),
            Topology::TwoBranch => {
                let mut seg = trunk;
                for blk in &self.layers.segmenter {
                    let (rec, out) = block_forward(p, blk, &seg, h, w, act);
                    segmenter.push(rec);
                    seg = out;
                }
                let gate: Vec<f64> = seg.iter().map(|&s| sigmoid(s)).collect();
                let fused: Vec<f64> = gate.iter().zip(&reg).map(|(g, r)| g * r).collect();
                let mut logit = vec![0.0; hw];
                conv_forward(p, &self.layers.mask_head, &seg, h, w, &mut logit, None);
                let mask: Vec<f64> = logit.iter().map(|&z| sigmoid(z)).collect();
                (Some(gate), Some(seg), fused, Some(mask))
            }
        };

        let mut density_pre = vec![0.0; hw];
        conv_forward(p, &self.layers.density_head, &fused, h, w, &mut density_pre, None);
        let density: Vec<f64> = match act {
            Activation::Relu => density_pre.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Identity => density_pre.clone(),
        };

        let density_map = DensityMap::from_vec(w, h, density)?;
        let mask_map = match &mask {
            Some(m) => Some(ProbabilityMap::from_vec(w, h, m.clone())?),
            None => None,
        };
        Ok(ForwardOutput {
            density: density_map,
            mask: mask_map,
            trace: ForwardTrace {
                version: self.version,
                activation: act,
                topology,
                height: h,
                width: w,
                backbone,
                regressor,
                segmenter,
                regressor_out: reg,
                segmenter_out: seg,
                gate,
                fused,
                density_pre,
                mask,
            },
        })
    }

    /// Parameter gradient of `<grad_density, ŷ> + <grad_mask, m̂>`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_density: &DensityMap,
        grad_mask: Option<&ProbabilityMap>,
    ) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.params.len()];
        self.backward_into(trace, grad_density, grad_mask, &mut acc)?;
        Ok(acc)
    }

    /// As [`ModelState::backward`], accumulating into `acc`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_density: &DensityMap,
        grad_mask: Option<&ProbabilityMap>,
        acc: &mut [f64],
    ) -> Result<()> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                model: self.version,
            });
        }
        if acc.len() != self.params.len() {
            return Err(Error::InvalidArgument("gradient buffer size mismatch".into()));
        }
        let (h, w) = (trace.height, trace.width);
        let hw = h * w;
        if grad_density.width() != w || grad_density.height() != h {
            return Err(Error::DimensionMismatch {
                left_w: w,
                left_h: h,
                right_w: grad_density.width(),
                right_h: grad_density.height(),
            });
        }
        let act = self.plan.activation;
        let p = &self.params;
        let layers = &self.layers;

        let g_pre: Vec<f64> = match act {
            Activation::Relu => grad_density
                .data()
                .iter()
                .zip(&trace.density_pre)
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Identity => grad_density.data().to_vec(),
        };
        let mut g_fused = vec![0.0; trace.fused.len()];
        conv_backward(
            p,
            &layers.density_head,
            &trace.fused,
            None,
            &g_pre,
            h,
            w,
            acc,
            Some(&mut g_fused),
        );

        let mut g_trunk = vec![0.0; layers.regressor.first().map_or(0, |b| b.conv.cin) * hw];

        let g_reg = match trace.topology {
            Topology::RegressorOnly => g_fused,
            Topology::TwoBranch => {
                let gate = trace.gate.as_ref().expect("two-branch trace");
                let seg = trace.segmenter_out.as_ref().expect("two-branch trace");
                let mask = trace.mask.as_ref().expect("two-branch trace");
                let g_reg: Vec<f64> = g_fused.iter().zip(gate).map(|(g, s)| g * s).collect();
                let mut g_seg: Vec<f64> = g_fused
                    .iter()
                    .zip(&trace.regressor_out)
                    .zip(gate)
                    .map(|((g, r), s)| g * r * s * (1.0 - s))
                    .collect();
                if let Some(gm) = grad_mask {
                    if gm.width() != w || gm.height() != h {
                        return Err(Error::DimensionMismatch {
                            left_w: w,
                            left_h: h,
                            right_w: gm.width(),
                            right_h: gm.height(),
                        });
                    }
                    let g_logit: Vec<f64> = gm.data().iter().zip(mask).map(|(&g, &m)| g * m * (1.0 - m)).collect();
                    conv_backward(p, &layers.mask_head, seg, None, &g_logit, h, w, acc, Some(&mut g_seg));
                }
                let g = branch_backward(p, &layers.segmenter, &trace.segmenter, g_seg, h, w, act, acc);
                add_into(&mut g_trunk, &g);
                g_reg
            }
        };
        let g = branch_backward(p, &layers.regressor, &trace.regressor, g_reg, h, w, act, acc);
        add_into(&mut g_trunk, &g);

        let mut g = g_trunk;
        for (i, (blk, rec)) in layers.backbone.iter().zip(&trace.backbone).enumerate().rev() {
            let need_input = i > 0;
            g = block_backward(p, blk, rec, g, h, w, act, acc, need_input);
        }
        Ok(())
    }
}

/// Outputs of one forward pass plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub density: DensityMap,
    /// `None` for [`Topology::RegressorOnly`].
    pub mask: Option<ProbabilityMap>,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone)]
struct BlockRecord {
    /// im2col of the block input.
    cols: Vec<f64>,
    /// Conv output before the affine.
    conv_out: Vec<f64>,
    /// Affine output before the activation.
    pre_act: Vec<f64>,
}

/// Cached activations of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    version: u64,
    activation: Activation,
    topology: Topology,
    height: usize,
    width: usize,
    backbone: Vec<BlockRecord>,
    regressor: Vec<BlockRecord>,
    segmenter: Vec<BlockRecord>,
    regressor_out: Vec<f64>,
    segmenter_out: Option<Vec<f64>>,
    gate: Option<Vec<f64>>,
    fused: Vec<f64>,
    density_pre: Vec<f64>,
    mask: Option<Vec<f64>>,
}

impl ForwardTrace {
    pub fn topology(&self) -> Topology {
        self.topology
    }

    /// Segmenter features (post-activation, pre-gate); two-branch only.
    pub fn segmenter_features(&self) -> Option<&[f64]> {
        self.segmenter_out.as_deref()
    }

    pub fn regressor_features(&self) -> &[f64] {
        &self.regressor_out
    }

    /// Gated regressor features fed to the density head.
    pub fn fused_features(&self) -> &[f64] {
        &self.fused
    }

    /// On/off pattern of every piecewise-linear unit. Two traces with equal
    /// patterns lie in the same linear region of the ReLUs.
    pub fn activation_pattern(&self) -> Vec<bool> {
        if self.activation == Activation::Identity {
            return Vec::new();
        }
        self.backbone
            .iter()
            .chain(&self.regressor)
            .chain(&self.segmenter)
            .flat_map(|r| r.pre_act.iter().map(|&v| v > 0.0))
            .chain(self.density_pre.iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn he_fill(params: &mut [f64], conv: &Conv, gain: f64, rng: &mut ChaCha8Rng) {
    let fan_in = conv.cin * conv.k * conv.k;
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = conv.cout * fan_in;
    for v in &mut params[conv.weight..conv.weight + n] {
        *v = normal.sample(rng);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// im2col for a k×k stride-1 zero-padded convolution.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    // Built by appending so every entry is written exactly once.
    let mut cols = Vec::with_capacity(cin * k * k * hw);
    let zeros = |cols: &mut Vec<f64>, n: usize| cols.resize(cols.len() + n, 0.0);
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        zeros(&mut cols, w);
                        continue;
                    }
                    let sx0 = (x_lo as isize + dx) as usize;
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    zeros(&mut cols, x_lo);
                    cols.extend_from_slice(&src_row[sx0..sx0 + (x_hi - x_lo)]);
                    zeros(&mut cols, w - x_hi);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (x_lo as isize + dx) as usize;
                    let dst_row = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x_hi - x_lo)];
                    for (d, s) in dst_row.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `out = W · cols + b`. When `cols_out` is given the im2col buffer is kept.
fn conv_forward(
    p: &[f64],
    conv: &Conv,
    input: &[f64],
    h: usize,
    w: usize,
    out: &mut [f64],
    cols_out: Option<&mut Vec<f64>>,
) {
    let hw = h * w;
    let kk = conv.cin * conv.k * conv.k;
    let owned = (conv.k != 1).then(|| im2col(input, conv.cin, h, w, conv.k));
    let cols: &[f64] = owned.as_deref().unwrap_or(input);
    for o in 0..conv.cout {
        out[o * hw..(o + 1) * hw].fill(p[conv.bias + o]);
    }
    unsafe {
        dgemm(
            conv.cout,
            kk,
            hw,
            1.0,
            p[conv.weight..].as_ptr(),
            kk as isize,
            1,
            cols.as_ptr(),
            hw as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    if let Some(keep) = cols_out {
        *keep = match owned {
            Some(v) => v,
            None => input.to_vec(),
        };
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Accumulates weight/bias gradients into `acc`; writes the input gradient
/// into `g_input` (added, not overwritten) when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    p: &[f64],
    conv: &Conv,
    input_or_cols: &[f64],
    cols: Option<&[f64]>,
    g_out: &[f64],
    h: usize,
    w: usize,
    acc: &mut [f64],
    g_input: Option<&mut Vec<f64>>,
) {
    let hw = h * w;
    let kk = conv.cin * conv.k * conv.k;
    let cols = cols.unwrap_or(input_or_cols);
    for o in 0..conv.cout {
        acc[conv.bias + o] += g_out[o * hw..(o + 1) * hw].iter().sum::<f64>();
    }
    unsafe {
        // dW[cout × kk] += g_out[cout × hw] · colsᵀ[hw × kk]
        dgemm(
            conv.cout,
            hw,
            kk,
            1.0,
            g_out.as_ptr(),
            hw as isize,
            1,
            cols.as_ptr(),
            1,
            hw as isize,
            1.0,
            acc[conv.weight..].as_mut_ptr(),
            kk as isize,
            1,
        );
    }
    if let Some(g_in) = g_input {
        if conv.k == 1 {
            unsafe {
                dgemm(
                    conv.cin,
                    conv.cout,
                    hw,
                    1.0,
                    p[conv.weight..].as_ptr(),
                    1,
                    kk as isize,
                    g_out.as_ptr(),
                    hw as isize,
                    1,
                    1.0,
                    g_in.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
        } else {
            SCRATCH.with(|cell| {
                let mut g_cols = cell.borrow_mut();
                if g_cols.len() < kk * hw {
                    g_cols.resize(kk * hw, 0.0);
                }
                // beta = 0: stale scratch contents are never read
                unsafe {
                    dgemm(
                        kk,
                        conv.cout,
                        hw,
                        1.0,
                        p[conv.weight..].as_ptr(),
                        1,
                        kk as isize,
                        g_out.as_ptr(),
                        hw as isize,
                        1,
                        0.0,
                        g_cols.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
                col2im(&g_cols[..kk * hw], conv.cin, h, w, conv.k, g_in);
            });
        }
    }
}

fn block_forward(
    p: &[f64],
    blk: &Block,
    input: &[f64],
    h: usize,
    w: usize,
    act: Activation,
) -> (BlockRecord, Vec<f64>) {
    let hw = h * w;
    let mut conv_out = vec![0.0; blk.conv.cout * hw];
    let mut cols = Vec::new();
    conv_forward(p, &blk.conv, input, h, w, &mut conv_out, Some(&mut cols));
    let mut pre_act = conv_out.clone();
    for c in 0..blk.affine.channels {
        let (s, t) = (p[blk.affine.scale + c], p[blk.affine.shift + c]);
        for v in &mut pre_act[c * hw..(c + 1) * hw] {
            *v = s * *v + t;
        }
    }
    let out = match act {
        Activation::Relu => pre_act.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Identity => pre_act.clone(),
    };
    (
        BlockRecord {
            cols,
            conv_out,
            pre_act,
        },
        out,
    )
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    p: &[f64],
    blk: &Block,
    rec: &BlockRecord,
    mut g: Vec<f64>,
    h: usize,
    w: usize,
    act: Activation,
    acc: &mut [f64],
    need_input: bool,
) -> Vec<f64> {
    let hw = h * w;
    if act == Activation::Relu {
        for (gv, &z) in g.iter_mut().zip(&rec.pre_act) {
            if z <= 0.0 {
                *gv = 0.0;
            }
        }
    }
    for c in 0..blk.affine.channels {
        let range = c * hw..(c + 1) * hw;
        let gs = &g[range.clone()];
        let zs = &rec.conv_out[range.clone()];
        acc[blk.affine.scale + c] += gs.iter().zip(zs).map(|(a, b)| a * b).sum::<f64>();
        acc[blk.affine.shift + c] += gs.iter().sum::<f64>();
        let s = p[blk.affine.scale + c];
        for v in &mut g[range] {
            *v *= s;
        }
    }
    let mut g_in = if need_input {
        vec![0.0; blk.conv.cin * hw]
    } else {
        Vec::new()
    };
    conv_backward(
        p,
        &blk.conv,
        &rec.cols,
        None,
        &g,
        h,
        w,
        acc,
        if need_input { Some(&mut g_in) } else { None },
    );
    g_in
}

#[allow(clippy::too_many_arguments)]
fn branch_backward(
    p: &[f64],
    blocks: &[Block],
    records: &[BlockRecord],
    g: Vec<f64>,
    h: usize,
    w: usize,
    act: Activation,
    acc: &mut [f64],
) -> Vec<f64> {
    let mut g = g;
    for (blk, rec) in blocks.iter().zip(records).rev() {
        g = block_backward(p, blk, rec, g, h, w, act, acc, true);
    }
    g
}

/// Result of comparing the analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed an activation kink or flipped a
    /// binarized mask pixel.
    pub skipped: Vec<usize>,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    pub topology: Topology,
    pub tau_mask: f64,
    /// Absolute floor in the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-3,
            seed: 0,
            topology: Topology::TwoBranch,
            tau_mask: DEFAULT_TAU_MASK,
            floor: 1e-8,
        }
    }
}

fn scalar_loss(
    state: &ModelState,
    x: &FeatureMap,
    y: &DensityMap,
    m: &Mask,
    w: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<(f64, Vec<bool>, ForwardOutput, LossReport)> {
    let out = state.forward(x, opts.topology)?;
    let mask_prob = out
        .mask
        .clone()
        .unwrap_or_else(|| ProbabilityMap::filled(y.width(), y.height(), 0.5));
    let report = total_loss(&out.density, y, &mask_prob, m, w, opts.tau_mask)?;
    let mut pattern = out.trace.activation_pattern();
    if w.lambda_c > 0.0 {
        pattern.extend(mask_prob.data().iter().map(|&v| v > opts.tau_mask));
        pattern.push(out.density.sum() > 0.0);
    }
    Ok((report.total, pattern, out, report))
}

/// Compare [`ModelState::backward`] of the joint loss against central finite
/// differences on a random subset of parameters.
pub fn grad_check(
    state: &ModelState,
    x: &FeatureMap,
    y: &DensityMap,
    m: &Mask,
    w: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, base_pattern, out, report) = scalar_loss(state, x, y, m, w, opts)?;
    let grad_mask = out.mask.as_ref().map(|_| &report.grad_mask);
    let analytic = state.backward(&out.trace, &report.grad_density, grad_mask)?;

    let n = state.num_params();
    let mut coords: Vec<usize> = (0..n).collect();
    if opts.samples < n {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(opts.samples);
        coords.sort_unstable();
    }

    let mut probe = state.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = None;
    let mut skipped = Vec::new();
    let mut checked = 0;
    for &i in &coords {
        let orig = state.params[i];
        probe.params_mut()[i] = orig + opts.step;
        let (plus, pat_plus, _, _) = scalar_loss(&probe, x, y, m, w, opts)?;
        probe.params_mut()[i] = orig - opts.step;
        let (minus, pat_minus, _, _) = scalar_loss(&probe, x, y, m, w, opts)?;
        probe.params_mut()[i] = orig;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            skipped.push(i);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        checked += 1;
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = Some(i);
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        skipped,
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_plan() -> ChannelPlan {
        ChannelPlan {
            input: 3,
            backbone: vec![4, 6],
            branch: vec![4, 3],
            activation: Activation::Relu,
        }
    }

    fn random_input(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn naive_conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let cout = bias.len();
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * cin + c) * 3 + ky) * 3 + kx]
                                    * input[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, cout, h, w) = (3, 4, 5, 7);
        let input: Vec<f64> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params: Vec<f64> = (0..cout * cin * 9 + cout)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.push(0.0);
        let conv = Conv {
            cin,
            cout,
            k: 3,
            weight: 0,
            bias: cout * cin * 9,
        };
        let mut out = vec![0.0; cout * h * w];
        conv_forward(&params, &conv, &input, h, w, &mut out, None);
        let expected = naive_conv3x3(
            &input,
            cin,
            h,
            w,
            &params[..cout * cin * 9],
            &params[cout * cin * 9..cout * cin * 9 + cout],
        );
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = ModelState::init(9, ChannelPlan::default()).unwrap();
        let b = ModelState::init(9, ChannelPlan::default()).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(
            a.params(),
            ModelState::init(10, ChannelPlan::default()).unwrap().params()
        );

        let bad = ChannelPlan {
            backbone: vec![16, 0],
            ..ChannelPlan::default()
        };
        assert!(ModelState::init(0, bad).is_err());
        let empty = ChannelPlan {
            branch: vec![],
            ..ChannelPlan::default()
        };
        assert!(ModelState::init(0, empty).is_err());
    }

    #[test]
    fn parameter_count_matches_layout() {
        let plan = ChannelPlan::default();
        let m = ModelState::init(0, plan.clone()).unwrap();
        let enumerated: usize = m.layout().iter().map(|b| b.len()).sum();
        assert_eq!(enumerated, m.num_params());
        // backbone 3→16→32, two branches 32→16→8, heads 8→1
        let expected = (3 * 16 * 9 + 16 + 32)
            + (16 * 32 * 9 + 32 + 64)
            + 2 * ((32 * 16 * 9 + 16 + 32) + (16 * 8 * 9 + 8 + 16))
            + 2 * (8 + 1);
        assert_eq!(plan.parameter_count(), expected);
        assert_eq!(m.num_params(), expected);
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let m = ModelState::init(1, ChannelPlan::default()).unwrap();
        let x = random_input(3, 3, 16, 16);
        let out = m.forward(&x, Topology::TwoBranch).unwrap();
        assert_eq!((out.density.width(), out.density.height()), (16, 16));
        let mask = out.mask.as_ref().unwrap();
        assert_eq!((mask.width(), mask.height()), (16, 16));
        assert!(out.density.data().iter().all(|&v| v >= 0.0));
        assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let again = m.forward(&x, Topology::TwoBranch).unwrap();
        assert_eq!(out.density, again.density);

        let reg = m.forward(&x, Topology::RegressorOnly).unwrap();
        assert!(reg.mask.is_none());

        let wrong = random_input(3, 1, 16, 16);
        assert!(m.forward(&wrong, Topology::TwoBranch).is_err());
    }

    #[test]
    fn gate_attenuates_regressor_features() {
        let m = ModelState::init(4, ChannelPlan::default()).unwrap();
        let out = m.forward(&random_input(5, 3, 12, 12), Topology::TwoBranch).unwrap();
        let t = &out.trace;
        for (f, r) in t.fused_features().iter().zip(t.regressor_features()) {
            assert!(f.abs() <= r.abs());
        }
    }

    #[test]
    fn zeroed_segmenter_gives_half_gate() {
        let mut m = ModelState::init(4, ChannelPlan::default()).unwrap();
        // zero the last segmenter block entirely so its features are 0
        let last = m.plan().branch.len() - 1;
        let prefix = format!("segmenter.{last}.");
        let ranges: Vec<_> = m
            .layout()
            .iter()
            .filter(|b| b.name.starts_with(&prefix))
            .map(|b| b.range())
            .collect();
        for r in ranges {
            m.params_mut()[r].fill(0.0);
        }
        let out = m.forward(&random_input(6, 3, 10, 10), Topology::TwoBranch).unwrap();
        let t = &out.trace;
        assert!(t.segmenter_features().unwrap().iter().all(|&s| s == 0.0));
        for (f, r) in t.fused_features().iter().zip(t.regressor_features()) {
            assert_eq!(*f, 0.5 * r);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let m = ModelState::init(2, small_plan()).unwrap();
        let out = m.forward(&random_input(1, 3, 8, 8), Topology::TwoBranch).unwrap();
        let g = m
            .backward(&out.trace, &DensityMap::zeros(8, 8), Some(&ProbabilityMap::zeros(8, 8)))
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = ModelState::init(2, small_plan()).unwrap();
        let out = m.forward(&random_input(1, 3, 8, 8), Topology::TwoBranch).unwrap();
        m.params_mut()[0] += 1e-3;
        let err = m.backward(&out.trace, &DensityMap::zeros(8, 8), None);
        assert!(matches!(err, Err(Error::StaleTrace { .. })));
    }

    #[test]
    fn batch_gradient_is_additive() {
        let m = ModelState::init(3, small_plan()).unwrap();
        let x = random_input(8, 3, 8, 8);
        let out = m.forward(&x, Topology::TwoBranch).unwrap();
        let gy = DensityMap::filled(8, 8, 0.3);
        let gm = ProbabilityMap::filled(8, 8, -0.2);
        let one = m.backward(&out.trace, &gy, Some(&gm)).unwrap();
        let mut two = vec![0.0; m.num_params()];
        for _ in 0..2 {
            let o = m.forward(&x, Topology::TwoBranch).unwrap();
            m.backward_into(&o.trace, &gy, Some(&gm), &mut two).unwrap();
        }
        for (a, b) in one.iter().zip(&two) {
            assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    fn targets(seed: u64, h: usize, w: usize) -> (DensityMap, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DensityMap::from_vec(w, h, (0..h * w).map(|_| rng.random_range(0.0..0.05)).collect()).unwrap();
        let m = Mask::from_vec(w, h, (0..h * w).map(|_| rng.random_bool(0.3)).collect()).unwrap();
        (y, m)
    }

    #[test]
    fn linear_toy_model_gradient_is_exact() {
        let plan = ChannelPlan {
            input: 2,
            backbone: vec![3],
            branch: vec![2],
            activation: Activation::Identity,
        };
        let m = ModelState::init(5, plan).unwrap();
        let x = random_input(2, 2, 6, 6);
        let (y, mask) = targets(3, 6, 6);
        let w = LossWeights {
            lambda_d: 1.0,
            lambda_s: 0.0,
            lambda_c: 0.0,
        };
        let opts = GradCheckOptions {
            samples: usize::MAX,
            topology: Topology::RegressorOnly,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&m, &x, &y, &mask, &w, &opts).unwrap();
        assert!(r.skipped.is_empty());
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let m = ModelState::init(7, small_plan()).unwrap();
        let x = random_input(4, 3, 8, 8);
        let (y, mask) = targets(9, 8, 8);
        let r = grad_check(&m, &x, &y, &mask, &LossWeights::default(), &GradCheckOptions::default()).unwrap();
        assert!(r.checked >= 150, "{r:?}");
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn kinks_are_skipped() {
        let mut m = ModelState::init(7, small_plan()).unwrap();
        // Put one backbone unit's shift exactly at a kink for some pixel.
        let out = m.forward(&random_input(4, 3, 8, 8), Topology::TwoBranch).unwrap();
        let rec = &out.trace.backbone[0];
        let shift_block = m
            .layout()
            .iter()
            .find(|b| b.name == "backbone.0.affine.shift")
            .unwrap()
            .offset;
        let scale = m.params()[m
            .layout()
            .iter()
            .find(|b| b.name == "backbone.0.affine.scale")
            .unwrap()
            .offset];
        let z = rec.conv_out[5];
        m.params_mut()[shift_block] = -scale * z;
        let (y, mask) = targets(9, 8, 8);
        let opts = GradCheckOptions {
            samples: usize::MAX,
            ..GradCheckOptions::default()
        };
        let r = grad_check(&m, &random_input(4, 3, 8, 8), &y, &mask, &LossWeights::default(), &opts).unwrap();
        assert!(r.skipped.contains(&shift_block));
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
