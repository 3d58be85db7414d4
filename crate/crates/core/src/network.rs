//! The per-frame grid network: a convolutional encoder, a category branch
//! and a dynamic-kernel mask branch over a single `S_h × S_w` grid.
//!
//! The deepest encoder map is resized to the grid before both branches, so
//! every preset produces grid-aligned outputs regardless of its stride.
//! The category branch yields the key map `K` (its first layer), the
//! category map `C` (the input of its head) and per-class logits. The mask
//! branch yields the mask map `M` (the input of the kernel head), one 1×1
//! kernel per grid cell, and a decoded mask feature map at 1/4 input scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamId, ParamStore};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPreset {
    /// ResNet-50 with frozen-statistics batch norm folded into per-channel
    /// affine parameters.
    Resnet50,
    /// Four strided stages for CPU-scale experiments.
    ToySmall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// `[S_h, S_w]`.
    pub grid_shape: [usize; 2],
    /// `E`, the channel count of `K`, `C` and `M`.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub encoder_preset: EncoderPreset,
    /// Length of each dynamic kernel, equal to the mask feature channels.
    pub kernel_dim: usize,
    /// `[height, width]` in pixels.
    pub input_size: [usize; 2],
    /// Conv layers in the category branch and in the kernel sub-branch.
    #[serde(default = "default_branch_depth")]
    pub branch_depth: usize,
}

fn default_branch_depth() -> usize {
    4
}

impl NetworkConfig {
    pub fn resnet50() -> Self {
        Self {
            grid_shape: [12, 21],
            feature_dim: 256,
            num_classes: 40,
            encoder_preset: EncoderPreset::Resnet50,
            kernel_dim: 128,
            input_size: [356, 624],
            branch_depth: 4,
        }
    }

    pub fn toy() -> Self {
        Self {
            grid_shape: [4, 7],
            feature_dim: 32,
            num_classes: 3,
            encoder_preset: EncoderPreset::ToySmall,
            kernel_dim: 32,
            input_size: [64, 112],
            branch_depth: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_shape[0] == 0 || self.grid_shape[1] == 0 {
            return bad(format!("grid_shape must be positive, got {:?}", self.grid_shape));
        }
        if self.feature_dim == 0 || self.kernel_dim == 0 || self.num_classes == 0 {
            return bad("feature_dim, kernel_dim and num_classes must be positive".into());
        }
        if self.branch_depth == 0 {
            return bad("branch_depth must be at least 1".into());
        }
        let min = self.encoder_stride();
        if self.input_size[0] < min || self.input_size[1] < min {
            return bad(format!(
                "input_size {:?} is smaller than the encoder stride {min}",
                self.input_size
            ));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.grid_shape[0] * self.grid_shape[1]
    }

    /// Stride of the deepest encoder level.
    pub fn encoder_stride(&self) -> usize {
        match self.encoder_preset {
            EncoderPreset::Resnet50 => 32,
            EncoderPreset::ToySmall => 16,
        }
    }

    fn activation(&self) -> Activation {
        match self.encoder_preset {
            EncoderPreset::Resnet50 => Activation::Relu,
            EncoderPreset::ToySmall => Activation::Silu,
        }
    }

    /// Spatial size of every encoder level, shallowest first.
    pub fn encoder_level_sizes(&self) -> Vec<[usize; 2]> {
        let conv = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
        let [h, w] = self.input_size;
        match self.encoder_preset {
            EncoderPreset::ToySmall => {
                let mut sizes = Vec::new();
                let (mut h, mut w) = (h, w);
                for _ in 0..TOY_WIDTHS.len() {
                    h = conv(h, 3, 2);
                    w = conv(w, 3, 2);
                    sizes.push([h, w]);
                }
                sizes
            }
            EncoderPreset::Resnet50 => {
                // stem: 7x7/2 then 3x3/2 max pool
                let (mut h, mut w) = (conv(h, 7, 2), conv(w, 7, 2));
                h = conv(h, 3, 2);
                w = conv(w, 3, 2);
                let mut sizes = vec![[h, w]];
                for _ in 1..4 {
                    h = conv(h, 3, 2);
                    w = conv(w, 3, 2);
                    sizes.push([h, w]);
                }
                sizes
            }
        }
    }

    /// `[H_m, W_m]` of the mask feature map (the stride-4 encoder level).
    pub fn mask_feature_size(&self) -> [usize; 2] {
        self.encoder_level_sizes()[self.mask_level()]
    }

    fn mask_level(&self) -> usize {
        match self.encoder_preset {
            EncoderPreset::ToySmall => 1,
            EncoderPreset::Resnet50 => 0,
        }
    }
}

const TOY_WIDTHS: [usize; 4] = [16, 32, 32, 48];
const RESNET_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET_MID: [usize; 4] = [64, 128, 256, 512];
/// Prior probability used to initialise the category head bias.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
        }
    }
}

/// Multi-scale encoder output, shallowest level first.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
}

impl EncoderFeatures {
    pub fn deepest(&self) -> &Tensor {
        self.levels.last().expect("encoder has levels")
    }
}

/// Tape handles for [`EncoderFeatures`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub levels: Vec<Var>,
}

/// Per-grid class scores, `[C_cls, S_h, S_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryScores {
    pub values: Tensor,
    pub is_probability: bool,
}

impl CategoryScores {
    pub fn probabilities(&self) -> CategoryScores {
        if self.is_probability {
            return self.clone();
        }
        CategoryScores {
            values: self.values.map(sigmoid),
            is_probability: true,
        }
    }

    /// Score of `class` at grid cell `(i, j)`.
    pub fn at(&self, i: usize, j: usize, class: usize) -> f64 {
        let (_, h, w) = self.values.chw();
        self.values.data()[(class * h + i) * w + j]
    }
}

/// One dynamic 1×1 kernel per grid cell, `[kernel_dim, S_h, S_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernels {
    pub kernels: Tensor,
}

/// Decoded mask features, `[kernel_dim, H_m, W_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFeatureMap {
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct CategoryBranchOutput {
    pub key: Tensor,
    pub category: Tensor,
    pub scores: CategoryScores,
}

#[derive(Clone, Debug)]
pub struct MaskBranchOutput {
    pub mask: Tensor,
    pub kernels: DynamicKernels,
    pub mask_features: MaskFeatureMap,
}

#[derive(Clone, Debug)]
struct Affine {
    scale: ParamId,
    shift: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[channels], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels])),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let s = tape.param(self.scale);
        let b = tape.param(self.shift);
        tape.channel_affine(x, s, b)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: (Conv2d, Affine),
    spatial: (Conv2d, Affine),
    expand: (Conv2d, Affine),
    shortcut: Option<(Conv2d, Affine)>,
}

impl Bottleneck {
    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut y = self.reduce.0.forward(tape, x);
        y = self.reduce.1.forward(tape, y);
        y = tape.relu(y);
        y = self.spatial.0.forward(tape, y);
        y = self.spatial.1.forward(tape, y);
        y = tape.relu(y);
        y = self.expand.0.forward(tape, y);
        y = self.expand.1.forward(tape, y);
        let skip = match &self.shortcut {
            Some((conv, aff)) => {
                let s = conv.forward(tape, x);
                aff.forward(tape, s)
            }
            None => x,
        };
        let sum = tape.add(y, skip);
        tape.relu(sum)
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Toy(Vec<[(Conv2d, GroupNorm); 2]>),
    Resnet {
        stem: (Conv2d, Affine),
        stages: Vec<Vec<Bottleneck>>,
    },
}

impl Encoder {
    fn build(config: &NetworkConfig, store: &mut ParamStore, rng: &mut impl Rng) -> (Self, Vec<usize>) {
        match config.encoder_preset {
            EncoderPreset::ToySmall => {
                let mut c_in = 3;
                let mut stages = Vec::new();
                for (s, &width) in TOY_WIDTHS.iter().enumerate() {
                    let down = Conv2d::new(store, rng, &format!("encoder.stage{s}.down"), c_in, width, 3, 2, true);
                    let down_norm = GroupNorm::new(store, &format!("encoder.stage{s}.down_gn"), width);
                    let refine = Conv2d::new(store, rng, &format!("encoder.stage{s}.refine"), width, width, 3, 1, true);
                    let refine_norm = GroupNorm::new(store, &format!("encoder.stage{s}.refine_gn"), width);
                    stages.push([(down, down_norm), (refine, refine_norm)]);
                    c_in = width;
                }
                (Encoder::Toy(stages), TOY_WIDTHS.to_vec())
            }
            EncoderPreset::Resnet50 => {
                let stem = (
                    Conv2d::new(store, rng, "encoder.stem", 3, 64, 7, 2, false),
                    Affine::new(store, "encoder.stem_bn", 64),
                );
                let mut c_in = 64;
                let mut stages = Vec::new();
                let mut widths = Vec::new();
                for (s, (&blocks, &mid)) in RESNET_BLOCKS.iter().zip(&RESNET_MID).enumerate() {
                    let out = mid * 4;
                    let mut stage = Vec::new();
                    for b in 0..blocks {
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        let n = format!("encoder.layer{}.{b}", s + 1);
                        let conv_aff = |store: &mut ParamStore, rng: &mut _, tag: &str, ci, co, k, st| {
                            (
                                Conv2d::new(store, rng, &format!("{n}.{tag}"), ci, co, k, st, false),
                                Affine::new(store, &format!("{n}.{tag}_bn"), co),
                            )
                        };
                        let block_in = if b == 0 { c_in } else { out };
                        let shortcut = (b == 0).then(|| conv_aff(store, rng, "shortcut", block_in, out, 1, stride));
                        stage.push(Bottleneck {
                            reduce: conv_aff(store, rng, "reduce", block_in, mid, 1, 1),
                            spatial: conv_aff(store, rng, "spatial", mid, mid, 3, stride),
                            expand: conv_aff(store, rng, "expand", mid, out, 1, 1),
                            shortcut,
                        });
                    }
                    stages.push(stage);
                    widths.push(out);
                    c_in = out;
                }
                (Encoder::Resnet { stem, stages }, widths)
            }
        }
    }

    fn forward(&self, tape: &mut Tape, act: Activation, image: Var) -> Vec<Var> {
        match self {
            Encoder::Toy(stages) => {
                let mut x = image;
                let mut levels = Vec::new();
                for stage in stages {
                    for (conv, norm) in stage {
                        x = conv.forward(tape, x);
                        x = norm.forward(tape, x);
                        x = act.apply(tape, x);
                    }
                    levels.push(x);
                }
                levels
            }
            Encoder::Resnet { stem, stages } => {
                let mut x = stem.0.forward(tape, image);
                x = stem.1.forward(tape, x);
                x = tape.relu(x);
                x = tape.max_pool(x, 3, 2, 1);
                let mut levels = Vec::new();
                for stage in stages {
                    for block in stage {
                        x = block.forward(tape, x);
                    }
                    levels.push(x);
                }
                levels
            }
        }
    }
}

/// Top-down decoder producing the mask feature map at 1/4 scale.
#[derive(Clone, Debug)]
struct MaskDecoder {
    input: Conv2d,
    laterals: Vec<Conv2d>,
    smooth: Vec<(Conv2d, GroupNorm)>,
    output: Conv2d,
}

#[derive(Clone, Debug)]
pub struct GridNetwork {
    config: NetworkConfig,
    activation: Activation,
    encoder: Encoder,
    category_convs: Vec<(Conv2d, GroupNorm)>,
    category_head: Conv2d,
    kernel_convs: Vec<(Conv2d, GroupNorm)>,
    kernel_head: Conv2d,
    decoder: MaskDecoder,
}

impl GridNetwork {
    pub fn new(config: &NetworkConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let e = config.feature_dim;
        let (encoder, widths) = Encoder::build(config, store, rng);
        let deepest = *widths.last().expect("encoder widths");

        let mut category_convs = Vec::new();
        let mut kernel_convs = Vec::new();
        for l in 0..config.branch_depth {
            let c_in = if l == 0 { deepest } else { e };
            category_convs.push((
                Conv2d::new(store, rng, &format!("category.conv{l}"), c_in, e, 3, 1, true),
                GroupNorm::new(store, &format!("category.gn{l}"), e),
            ));
            let k_in = if l == 0 { deepest + 2 } else { e };
            kernel_convs.push((
                Conv2d::new(store, rng, &format!("kernel.conv{l}"), k_in, e, 3, 1, true),
                GroupNorm::new(store, &format!("kernel.gn{l}"), e),
            ));
        }
        let category_head = Conv2d::new(store, rng, "category.head", e, config.num_classes, 3, 1, true);
        let prior_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        store
            .get_mut(category_head.bias.expect("head has bias"))
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = prior_bias);
        let kernel_head = Conv2d::new(store, rng, "kernel.head", e, config.kernel_dim, 1, 1, true);

        let d = config.kernel_dim;
        let mask_level = config.mask_level();
        let mut laterals = Vec::new();
        let mut smooth = Vec::new();
        for level in (mask_level..widths.len() - 1).rev() {
            laterals.push(Conv2d::new(store, rng, &format!("decoder.lateral{level}"), widths[level], d, 1, 1, true));
            smooth.push((
                Conv2d::new(store, rng, &format!("decoder.smooth{level}"), d, d, 3, 1, true),
                GroupNorm::new(store, &format!("decoder.smooth{level}_gn"), d),
            ));
        }
        let decoder = MaskDecoder {
            input: Conv2d::new(store, rng, "decoder.input", deepest + 2, d, 1, 1, true),
            laterals,
            smooth,
            output: Conv2d::new(store, rng, "decoder.output", d, d, 1, 1, true),
        };

        Ok(Self {
            config: config.clone(),
            activation: config.activation(),
            encoder,
            category_convs,
            category_head,
            kernel_convs,
            kernel_head,
            decoder,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// The network predicts at exactly one grid resolution.
    pub fn num_grid_levels(&self) -> usize {
        1
    }

    /// Number of upsampling stages in the mask feature decoder.
    pub fn decoder_stages(&self) -> usize {
        self.decoder.smooth.len()
    }

    // ----- tape-level building blocks ---------------------------------------

    pub fn encode(&self, tape: &mut Tape, image: Var) -> EncoderVars {
        EncoderVars {
            levels: self.encoder.forward(tape, self.activation, image),
        }
    }

    /// The deepest encoder level resized to exactly `S_h × S_w`.
    pub fn grid_features(&self, tape: &mut Tape, enc: &EncoderVars) -> Var {
        let [sh, sw] = self.config.grid_shape;
        let deepest = *enc.levels.last().expect("encoder levels");
        if tape.shape(deepest)[1..] == [sh, sw] {
            return deepest;
        }
        tape.resize(deepest, sh, sw)
    }

    /// `K`: the first layer of the category branch.
    pub fn key_features(&self, tape: &mut Tape, grid: Var) -> Var {
        let (conv, norm) = &self.category_convs[0];
        let y = conv.forward(tape, grid);
        let y = norm.forward(tape, y);
        self.activation.apply(tape, y)
    }

    /// `C`: the remaining category layers, ending right before the head.
    pub fn category_features(&self, tape: &mut Tape, key: Var) -> Var {
        let mut x = key;
        for (conv, norm) in &self.category_convs[1..] {
            x = conv.forward(tape, x);
            x = norm.forward(tape, x);
            x = self.activation.apply(tape, x);
        }
        x
    }

    /// Class logits `[C_cls, S_h, S_w]`.
    pub fn category_logits(&self, tape: &mut Tape, category: Var) -> Var {
        self.category_head.forward(tape, category)
    }

    /// `M`: the kernel sub-branch up to its head, with two normalised
    /// coordinate channels appended to the grid input.
    pub fn mask_grid_features(&self, tape: &mut Tape, grid: Var) -> Var {
        let coords = tape.constant(coordinate_channels(self.config.grid_shape));
        let mut x = tape.concat(&[grid, coords], 0);
        for (conv, norm) in &self.kernel_convs {
            x = conv.forward(tape, x);
            x = norm.forward(tape, x);
            x = self.activation.apply(tape, x);
        }
        x
    }

    /// Dynamic kernels `[kernel_dim, S_h, S_w]`.
    pub fn kernel_head(&self, tape: &mut Tape, mask: Var) -> Var {
        self.kernel_head.forward(tape, mask)
    }

    /// Mask feature map `[kernel_dim, H_m, W_m]`.
    pub fn mask_feature_map(&self, tape: &mut Tape, enc: &EncoderVars) -> Var {
        let mask_level = self.config.mask_level();
        let deepest = *enc.levels.last().expect("levels");
        let (h, w) = (tape.shape(deepest)[1], tape.shape(deepest)[2]);
        let coords = tape.constant(coordinate_channels([h, w]));
        let with_coords = tape.concat(&[deepest, coords], 0);
        let mut x = self.decoder.input.forward(tape, with_coords);
        let skips = (mask_level..enc.levels.len() - 1).rev();
        for ((level, lateral), smooth) in skips.zip(&self.decoder.laterals).zip(&self.decoder.smooth) {
            let skip = enc.levels[level];
            let (h, w) = (tape.shape(skip)[1], tape.shape(skip)[2]);
            let up = tape.resize(x, h, w);
            let lat = lateral.forward(tape, skip);
            x = tape.add(up, lat);
            x = smooth.0.forward(tape, x);
            x = smooth.1.forward(tape, x);
            x = self.activation.apply(tape, x);
        }
        self.decoder.output.forward(tape, x)
    }

    /// Mask logits `[n, H_m * W_m]` for the given flattened grid cells.
    pub fn mask_logits(&self, tape: &mut Tape, kernels: Var, mask_features: Var, cells: &[usize]) -> Var {
        let d = self.config.kernel_dim;
        let hw = self.config.num_cells();
        let flat_k = tape.reshape(kernels, &[d, hw]);
        let picked = tape.select_cols(flat_k, cells);
        let picked_t = tape.transpose(picked);
        let (_, hm, wm) = tape.value(mask_features).chw();
        let flat_f = tape.reshape(mask_features, &[d, hm * wm]);
        tape.matmul(picked_t, flat_f)
    }

    // ----- tensor-level operations ------------------------------------------

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(shape_err(format!("image must be [3, H, W], got {s:?}")));
        }
        if s[0] != 3 {
            return Err(shape_err(format!("image channels: expected 3, got {}", s[0])));
        }
        let [h, w] = self.config.input_size;
        if s[1] != h {
            return Err(Error::Config(format!("image height {} does not match input_size height {h}", s[1])));
        }
        if s[2] != w {
            return Err(Error::Config(format!("image width {} does not match input_size width {w}", s[2])));
        }
        Ok(())
    }

    /// Runs the encoder on a normalised `[3, H, W]` image.
    pub fn encode_frame(&self, store: &ParamStore, image: &Tensor) -> Result<EncoderFeatures> {
        self.check_image(image)?;
        let mut tape = Tape::inference(store);
        let x = tape.constant(image.clone());
        let enc = self.encode(&mut tape, x);
        let sizes = self.config.encoder_level_sizes();
        let stride = |i: usize| self.config.input_size[0].div_ceil(sizes[i][0]);
        Ok(EncoderFeatures {
            levels: enc.levels.iter().map(|&v| tape.value(v).clone()).collect(),
            strides: (0..enc.levels.len()).map(stride).collect(),
        })
    }

    fn load_encoder(&self, tape: &mut Tape, features: &EncoderFeatures) -> Result<EncoderVars> {
        let sizes = self.config.encoder_level_sizes();
        if features.levels.len() != sizes.len() {
            return Err(shape_err(format!(
                "expected {} encoder levels, got {}",
                sizes.len(),
                features.levels.len()
            )));
        }
        for (lvl, (t, s)) in features.levels.iter().zip(&sizes).enumerate() {
            if t.shape().len() != 3 || t.shape()[1..] != s[..] {
                return Err(shape_err(format!(
                    "encoder level {lvl}: expected spatial size {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(EncoderVars {
            levels: features.levels.iter().map(|t| tape.constant(t.clone())).collect(),
        })
    }

    /// `K`, `C` and class logits from encoder features (no temporal input).
    pub fn category_branch(&self, store: &ParamStore, features: &EncoderFeatures) -> Result<CategoryBranchOutput> {
        let mut tape = Tape::inference(store);
        let enc = self.load_encoder(&mut tape, features)?;
        let grid = self.grid_features(&mut tape, &enc);
        let key = self.key_features(&mut tape, grid);
        let cat = self.category_features(&mut tape, key);
        let logits = self.category_logits(&mut tape, cat);
        Ok(CategoryBranchOutput {
            key: tape.value(key).clone(),
            category: tape.value(cat).clone(),
            scores: CategoryScores {
                values: tape.value(logits).clone(),
                is_probability: false,
            },
        })
    }

    /// `M`, dynamic kernels and the mask feature map (no temporal input).
    pub fn mask_branch(&self, store: &ParamStore, features: &EncoderFeatures) -> Result<MaskBranchOutput> {
        let mut tape = Tape::inference(store);
        let enc = self.load_encoder(&mut tape, features)?;
        let grid = self.grid_features(&mut tape, &enc);
        let m = self.mask_grid_features(&mut tape, grid);
        let kernels = self.kernel_head(&mut tape, m);
        let feats = self.mask_feature_map(&mut tape, &enc);
        Ok(MaskBranchOutput {
            mask: tape.value(m).clone(),
            kernels: DynamicKernels {
                kernels: tape.value(kernels).clone(),
            },
            mask_features: MaskFeatureMap {
                features: tape.value(feats).clone(),
            },
        })
    }
}

/// Two channels holding the normalised `y` and `x` coordinate of each cell
/// in `[-1, 1]`.
pub fn coordinate_channels([sh, sw]: [usize; 2]) -> Tensor {
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(2 * sh * sw);
    for i in 0..sh {
        for _ in 0..sw {
            data.push(norm(i, sh));
        }
    }
    for _ in 0..sh {
        for j in 0..sw {
            data.push(norm(j, sw));
        }
    }
    Tensor::from_vec(&[2, sh, sw], data)
}

/// Soft mask `[H_m, W_m]` of the instance anchored at grid cell `(i, j)`:
/// the sigmoid of the kernel at `(i, j)` dotted with every pixel feature.
pub fn assemble_mask(kernels: &DynamicKernels, feats: &MaskFeatureMap, (i, j): (usize, usize)) -> Result<Tensor> {
    let (d, sh, sw) = kernels.kernels.chw();
    let (fd, hm, wm) = feats.features.chw();
    if d != fd {
        return Err(shape_err(format!("kernel_dim {d} does not match mask feature channels {fd}")));
    }
    if i >= sh || j >= sw {
        return Err(Error::Index(format!("grid cell ({i}, {j}) outside {sh}x{sw}")));
    }
    let kernel = kernels.kernels.channel_vector(i, j);
    let f = feats.features.data();
    let plane = hm * wm;
    let mut out = vec![0.0; plane];
    for (c, &kc) in kernel.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&f[c * plane..(c + 1) * plane]) {
            *o += kc * v;
        }
    }
    out.iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(Tensor::from_vec(&[hm, wm], out))
}
