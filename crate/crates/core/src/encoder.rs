//! Hierarchical patch encoder with a convolutional stem.
//!
//! A patchifying convolution produces a token grid; each following stage
//! merges 2×2 token neighbourhoods (halving resolution, doubling channels) and
//! runs window-attention transformer blocks. Any prefix of the stages can be
//! run on its own, and every stage's map can be pooled to a fixed
//! `feature_dim`-wide vector.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, INIT_STD};
use crate::params::{Init, Scope, ZEROS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEncoderConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    /// Attention window side in tokens; grids no larger than this use global attention.
    pub window: usize,
    pub mlp_ratio: usize,
    /// Width of one pooled stage vector.
    pub feature_dim: usize,
}

impl StageEncoderConfig {
    /// Tiny-Swin sized layout: 224 input, channels 96..768, depths 2/2/6/2.
    pub fn swin_tiny() -> Self {
        let chans = [96, 192, 384, 768];
        let depths = [2, 2, 6, 2];
        let heads = [3, 6, 12, 24];
        Self {
            input_size: 224,
            in_channels: 3,
            stem_kernel: 4,
            stem_stride: 4,
            stages: (0..4)
                .map(|i| StageSpec {
                    blocks: depths[i],
                    channels: chans[i],
                    heads: heads[i],
                })
                .collect(),
            window: 7,
            mlp_ratio: 4,
            feature_dim: 768,
        }
    }

    /// Desk-scale layout: 64 input, width 1/8 (channels 12/24/48/96), one block per stage.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            window: 4,
            ..Self::swin_tiny().with_width(1, 8).with_depths(&[1, 1, 1, 1])
        }
    }

    /// Scales every channel count by `num / den`; `feature_dim` follows the last stage.
    pub fn with_width(mut self, num: usize, den: usize) -> Self {
        for s in &mut self.stages {
            s.channels = s.channels * num / den;
        }
        if let Some(last) = self.stages.last() {
            self.feature_dim = last.channels;
        }
        self
    }

    pub fn with_depths(mut self, depths: &[usize]) -> Self {
        for (s, d) in self.stages.iter_mut().zip(depths) {
            s.blocks = *d;
        }
        self
    }

    /// Same weights layout, stages after `n` removed.
    pub fn truncated(&self, n: usize) -> Self {
        let mut c = self.clone();
        c.stages.truncate(n);
        c
    }

    /// Side length of each stage's token grid.
    pub fn stage_grids(&self) -> Vec<usize> {
        let mut g = (self.input_size - self.stem_kernel) / self.stem_stride + 1;
        let mut out = Vec::with_capacity(self.stages.len());
        for i in 0..self.stages.len() {
            if i > 0 {
                g /= 2;
            }
            out.push(g);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("encoder needs at least one stage".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 || self.input_size < self.stem_kernel {
            return bad(format!(
                "stem kernel {} / stride {} invalid for input {}",
                self.stem_kernel, self.stem_stride, self.input_size
            ));
        }
        for w in self.stages.windows(2) {
            if w[1].channels != 2 * w[0].channels {
                return bad(format!(
                    "stage channels must double: {} -> {}",
                    w[0].channels, w[1].channels
                ));
            }
        }
        let mut g = (self.input_size - self.stem_kernel) / self.stem_stride + 1;
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                if !g.is_multiple_of(2) {
                    return bad(format!("stage {i} input grid {g} is not divisible by 2"));
                }
                g /= 2;
            }
            if s.heads == 0 || s.channels % s.heads != 0 {
                return bad(format!("stage {i}: {} channels, {} heads", s.channels, s.heads));
            }
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.feature_dim == 0 {
            return bad("window, mlp_ratio and feature_dim must be positive".into());
        }
        Ok(())
    }
}

impl Default for StageEncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One stage's output: tokens `(B, h*w, channels)` in row-major grid order.
#[derive(Debug, Clone)]
pub struct StageActivation {
    pub index: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub tokens: Tensor,
}

pub type StageFeatures = Vec<StageActivation>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExtractMode {
    S1,
    S2,
    S3,
    S4,
    AllStages,
    Last2,
}

impl ExtractMode {
    pub const ALL: [ExtractMode; 6] = [
        ExtractMode::S1,
        ExtractMode::S2,
        ExtractMode::S3,
        ExtractMode::S4,
        ExtractMode::AllStages,
        ExtractMode::Last2,
    ];

    /// Zero-based stage indices, ascending, for a four-stage encoder.
    pub fn stages(self) -> &'static [usize] {
        match self {
            ExtractMode::S1 => &[0],
            ExtractMode::S2 => &[1],
            ExtractMode::S3 => &[2],
            ExtractMode::S4 => &[3],
            ExtractMode::AllStages => &[0, 1, 2, 3],
            ExtractMode::Last2 => &[2, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExtractMode::S1 => "S1",
            ExtractMode::S2 => "S2",
            ExtractMode::S3 => "S3",
            ExtractMode::S4 => "S4",
            ExtractMode::AllStages => "AllStages",
            ExtractMode::Last2 => "Last2",
        }
    }
}

impl fmt::Display for ExtractMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExtractMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(ExtractMode::S1),
            "s2" => Ok(ExtractMode::S2),
            "s3" => Ok(ExtractMode::S3),
            "s4" => Ok(ExtractMode::S4),
            "allstages" | "all" | "as" => Ok(ExtractMode::AllStages),
            "last2" | "l2" => Ok(ExtractMode::Last2),
            other => Err(Error::Config(format!("unknown extract mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    merge: Option<(LayerNorm, Linear)>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct StageEncoder {
    config: StageEncoderConfig,
    stem_weight: Tensor,
    stem_bias: Tensor,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    dtype: DType,
}

impl StageEncoder {
    pub fn new(config: &StageEncoderConfig, s: &mut Scope<'_>) -> Result<Self> {
        config.validate()?;
        let c1 = config.stages[0].channels;
        let k = config.stem_kernel;
        let stem_weight = s.param(
            "stem.weight",
            &[c1, config.in_channels, k, k],
            Init::TruncNormal(INIT_STD),
        )?;
        let stem_bias = s.param("stem.bias", &[c1], ZEROS)?;
        let stem_norm = LayerNorm::new(&mut s.sub("stem.norm"), c1)?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, spec) in config.stages.iter().enumerate() {
            let mut ss = s.sub(format!("stage{i}"));
            let merge = if i > 0 {
                let prev = config.stages[i - 1].channels;
                Some((
                    LayerNorm::new(&mut ss.sub("merge.norm"), 4 * prev)?,
                    Linear::new(&mut ss.sub("merge.reduction"), 4 * prev, spec.channels, false)?,
                ))
            } else {
                None
            };
            let blocks = (0..spec.blocks)
                .map(|b| {
                    Block::new(
                        &mut ss.sub(format!("block{b}")),
                        spec.channels,
                        spec.heads,
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { merge, blocks });
        }
        Ok(Self {
            config: config.clone(),
            stem_weight: stem_weight.clone(),
            stem_bias,
            stem_norm,
            stages,
            dtype: stem_weight.dtype(),
        })
    }

    pub fn config(&self) -> &StageEncoderConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let n = self.config.input_size;
        if c != self.config.in_channels || h != n || w != n {
            return Err(Error::ShapeMismatch(format!(
                "expected (B, {}, {n}, {n}) images, got {:?}",
                self.config.in_channels,
                images.dims()
            )));
        }
        Ok(())
    }

    /// Runs the first `upto` stages and returns each one's activation map.
    pub fn forward_stages(&self, images: &Tensor, upto: usize) -> Result<StageFeatures> {
        self.check_input(images)?;
        let images = images.to_dtype(self.dtype)?;
        let b = images.dims()[0];
        let x = images.conv2d(&self.stem_weight, 0, self.config.stem_stride, 1, 1)?;
        let (_, c, mut h, mut w) = x.dims4()?;
        let x = x
            .broadcast_add(&self.stem_bias.reshape((1, c, 1, 1))?)?
            .flatten_from(2)?
            .transpose(1, 2)?
            .contiguous()?;
        let mut x = self.stem_norm.forward(&x)?;
        let mut out = Vec::with_capacity(upto);
        for (i, stage) in self.stages.iter().take(upto).enumerate() {
            let channels = self.config.stages[i].channels;
            if let Some((norm, reduction)) = &stage.merge {
                let c_prev = x.dims()[2];
                x = x
                    .reshape((b, h / 2, 2, w / 2, 2, c_prev))?
                    .permute((0, 1, 3, 4, 2, 5))?
                    .contiguous()?
                    .reshape((b, (h / 2) * (w / 2), 4 * c_prev))?;
                x = reduction.forward(&norm.forward(&x)?)?;
                h /= 2;
                w /= 2;
            }
            let win = self.config.window;
            for blk in &stage.blocks {
                x = blk.forward_with(&x, |attn, t| windowed(attn, t, h, w, win))?;
            }
            out.push(StageActivation {
                index: i,
                channels,
                h,
                w,
                tokens: x.clone(),
            });
        }
        Ok(out)
    }

    pub fn forward_all_stages(&self, images: &Tensor) -> Result<StageFeatures> {
        self.forward_stages(images, self.stages.len())
    }

    /// Pooled final-stage features `(B, feature_dim)`, as used by the projection head.
    pub fn forward_pooled(&self, images: &Tensor) -> Result<Tensor> {
        let acts = self.forward_all_stages(images)?;
        pool_stage(acts.last().expect("encoder has stages"), self.config.feature_dim)
    }

    /// Concatenated pooled features of the stages named by `mode`.
    pub fn extract_features(&self, images: &Tensor, mode: ExtractMode) -> Result<Tensor> {
        let wanted = mode.stages();
        let upto = wanted.iter().max().unwrap() + 1;
        if upto > self.stages.len() {
            return Err(Error::Config(format!(
                "mode {mode} needs {upto} stages, encoder has {}",
                self.stages.len()
            )));
        }
        let acts = self.forward_stages(images, upto)?;
        let pooled = wanted
            .iter()
            .map(|&i| pool_stage(&acts[i], self.config.feature_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }
}

fn windowed(attn: &crate::nn::Attention, x: &Tensor, h: usize, w: usize, window: usize) -> Result<Tensor> {
    let win = window.min(h).min(w);
    if (win == h && win == w) || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        return attn.forward(x);
    }
    let (b, _, c) = x.dims3()?;
    let (nh, nw) = (h / win, w / win);
    let parts = x
        .reshape((b, nh, win, nw, win, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * nh * nw, win * win, c))?;
    let y = attn.forward(&parts)?;
    Ok(y.reshape((b, nh, nw, win, win, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * w, c))?)
}

/// Pooling grid for a stage with `channels` channels: `(rows, cols)` with
/// `rows * cols * channels == feature_dim`; square when possible, else a single row.
pub fn pooling_grid(channels: usize, feature_dim: usize) -> Result<(usize, usize)> {
    if channels == 0 || !feature_dim.is_multiple_of(channels) {
        return Err(Error::IndivisibleChannels { channels, feature_dim });
    }
    let cells = feature_dim / channels;
    let r = (cells as f64).sqrt().round() as usize;
    Ok(if r * r == cells { (r, r) } else { (1, cells) })
}

fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

/// `(h*w, rows*cols)` matrix whose columns average the adaptive-pooling bins.
pub fn pooling_matrix(h: usize, w: usize, rows: usize, cols: usize) -> Vec<f64> {
    let cells = rows * cols;
    let mut m = vec![0.0; h * w * cells];
    for (r, &(y0, y1)) in adaptive_bins(h, rows).iter().enumerate() {
        for (c, &(x0, x1)) in adaptive_bins(w, cols).iter().enumerate() {
            let cell = r * cols + c;
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    m[(y * w + x) * cells + cell] = inv;
                }
            }
        }
    }
    m
}

/// Adaptive average pooling of one stage to a `feature_dim`-wide vector per
/// image, flattened channel-major (all cells of channel 0 first).
pub fn pool_stage(act: &StageActivation, feature_dim: usize) -> Result<Tensor> {
    let (rows, cols) = pooling_grid(act.channels, feature_dim)?;
    let b = act.tokens.dims()[0];
    let m = pooling_matrix(act.h, act.w, rows, cols);
    let m = Tensor::from_vec(m, (act.h * act.w, rows * cols), &Device::Cpu)?.to_dtype(act.tokens.dtype())?;
    let pooled = act.tokens.transpose(1, 2)?.broadcast_matmul(&m)?;
    Ok(pooled.reshape((b, feature_dim))?)
}

/// MLP head: linear layers with GELU in between (none after the last).
#[derive(Debug, Clone)]
pub struct MlpHead {
    layers: Vec<Linear>,
}

impl MlpHead {
    /// `dims = [in, hidden..., out]`.
    pub fn new(s: &mut Scope<'_>, dims: &[usize], bias: bool) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("head needs at least input and output dims".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(&mut s.sub(format!("layer{i}")), d[0], d[1], bias))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.gelu_erf()?;
            }
            x = l.forward(&x)?;
        }
        Ok(x)
    }
}

/// Free-function form of [`MlpHead::forward`].
pub fn projection_head(features: &Tensor, head: &MlpHead) -> Result<Tensor> {
    head.forward(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_follow_stride_and_halving() {
        assert_eq!(StageEncoderConfig::swin_tiny().stage_grids(), vec![56, 28, 14, 7]);
        assert_eq!(StageEncoderConfig::desk().stage_grids(), vec![16, 8, 4, 2]);
        let c = StageEncoderConfig::desk();
        assert_eq!(
            c.stages.iter().map(|s| s.channels).collect::<Vec<_>>(),
            vec![12, 24, 48, 96]
        );
        assert_eq!(c.feature_dim, 96);
        assert_eq!(StageEncoderConfig::swin_tiny().feature_dim, 768);
    }

    #[test]
    fn pooling_grid_layout() {
        assert_eq!(pooling_grid(768, 768).unwrap(), (1, 1));
        assert_eq!(pooling_grid(384, 768).unwrap(), (1, 2));
        assert_eq!(pooling_grid(192, 768).unwrap(), (2, 2));
        assert_eq!(pooling_grid(96, 768).unwrap(), (1, 8));
        assert!(matches!(pooling_grid(100, 768), Err(Error::IndivisibleChannels { .. })));
    }

    #[test]
    fn pooling_matrix_columns_average() {
        let m = pooling_matrix(7, 7, 2, 2);
        for cell in 0..4 {
            let col: f64 = (0..49).map(|p| m[p * 4 + cell]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = StageEncoderConfig::desk();
        c.stages[2].channels = 50;
        assert!(c.validate().is_err());
        let mut c = StageEncoderConfig::desk();
        c.input_size = 36;
        assert!(c.validate().is_err());
        assert!(StageEncoderConfig::desk().truncated(0).validate().is_err());
    }

    #[test]
    fn mode_names_parse() {
        for m in ExtractMode::ALL {
            assert_eq!(m.name().parse::<ExtractMode>().unwrap(), m);
        }
    }
}
