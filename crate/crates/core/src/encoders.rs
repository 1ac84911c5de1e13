//! Image and prompt encoders.
//!
//! The image encoder cuts the volume into non-overlapping cubic patches,
//! projects each patch to `channels` features, adds the positional encoding of
//! the patch centre and runs a small stack of post-norm transformer blocks.
//! The prompt encoder turns each point (or box corner) into a token made of the
//! frozen positional encoding plus a learned per-type embedding, and mean-pools
//! the tokens into one vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{residual_norm, Attention, LayerNorm, Linear, Mlp};
use crate::tensor::{Param, Tensor};
use crate::volume::{Coord, Volume};

pub const IMAGE_PREFIX: &str = "encoder.";
pub const PROMPT_PREFIX: &str = "prompt_encoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub volume_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            volume_side: 32,
            patch_size: 8,
            channels: 48,
            depth: 2,
            heads: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.volume_side == 0 || self.volume_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "volume side {} is not a multiple of patch size {}",
                self.volume_side, self.patch_size
            )));
        }
        if self.channels == 0 || self.channels % 6 != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of 6",
                self.channels
            )));
        }
        if self.heads != 1 {
            return Err(Error::Config("only single-head attention is supported".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.volume_side / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side().pow(3)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.volume_side; 3]
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.pow(3)
    }
}

/// Parameter-free sinusoidal encoding of a 3D coordinate.
///
/// Each axis gets `channels / 6` (sin, cos) pairs at frequencies
/// `10000^(-k / (channels / 6))`; the three axis blocks are concatenated
/// in x, y, z order.
pub fn positional_encoding(coord: [f64; 3], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || channels % 6 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {channels} must be a positive multiple of 6"
        )));
    }
    let pairs = channels / 6;
    let mut out = Vec::with_capacity(channels);
    for &x in &coord {
        for k in 0..pairs {
            let freq = 10000f64.powf(-(k as f64) / pairs as f64);
            out.push((x * freq).sin());
            out.push((x * freq).cos());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Foreground,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub coord: Coord,
    pub label: PointLabel,
}

impl PromptPoint {
    pub fn foreground(coord: Coord) -> Self {
        PromptPoint {
            coord,
            label: PointLabel::Foreground,
        }
    }

    pub fn background(coord: Coord) -> Self {
        PromptPoint {
            coord,
            label: PointLabel::Background,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Points,
    Box,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSpec {
    Points { points: Vec<PromptPoint> },
    Box { min: Coord, max: Coord },
}

impl PromptSpec {
    pub fn kind(&self) -> PromptKind {
        match self {
            PromptSpec::Points { .. } => PromptKind::Points,
            PromptSpec::Box { .. } => PromptKind::Box,
        }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let inside = |c: &Coord| (0..3).all(|a| c[a] < dims[a]);
        match self {
            PromptSpec::Points { points } => {
                if points.is_empty() {
                    return Err(Error::Validation("point prompt has no points".into()));
                }
                if let Some(p) = points.iter().find(|p| !inside(&p.coord)) {
                    return Err(Error::Validation(format!(
                        "prompt point {:?} outside volume {dims:?}",
                        p.coord
                    )));
                }
            }
            PromptSpec::Box { min, max } => {
                if !inside(min) || !inside(max) {
                    return Err(Error::Validation(format!(
                        "box {min:?}..{max:?} outside volume {dims:?}"
                    )));
                }
                if (0..3).any(|a| min[a] > max[a]) {
                    return Err(Error::Validation(format!(
                        "box min corner {min:?} exceeds max corner {max:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `N x C` token matrix with `N == grid_side^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub tokens: Tensor,
    pub grid_side: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub vector: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderBlock {
    attn: Attention,
    norm1: LayerNorm,
    mlp: Mlp,
    norm2: LayerNorm,
}

impl EncoderBlock {
    fn new<R: Rng>(name: &str, width: usize, rng: &mut R) -> Self {
        EncoderBlock {
            attn: Attention::new(&format!("{name}.attn"), width, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), width),
            mlp: Mlp::new(&format!("{name}.mlp"), width, 4 * width, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), width),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x, x)?;
        let x = residual_norm(g, x, a, &self.norm1)?;
        let m = self.mlp.forward(g, x)?;
        residual_norm(g, x, m, &self.norm2)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.attn.params();
        v.extend(self.norm1.params());
        v.extend(self.mlp.params());
        v.extend(self.norm2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.attn.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.mlp.params_mut());
        v.extend(self.norm2.params_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    config: EncoderConfig,
    patch_proj: Linear,
    blocks: Vec<EncoderBlock>,
    positions: Tensor,
}

impl ImageEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let patch_proj = Linear::new("encoder.patch_proj", config.patch_voxels(), c, rng);
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&format!("encoder.block{i}"), c, rng))
            .collect();
        Ok(ImageEncoder {
            config,
            patch_proj,
            blocks,
            positions: patch_positions(&config)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Flattens the volume into `[tokens, patch_voxels]` rows; token order is
    /// x-major over the patch grid, voxel order inside a patch likewise.
    pub fn patches(&self, volume: &Volume) -> Result<Tensor> {
        let cfg = &self.config;
        if volume.dims() != cfg.dims() {
            return Err(Error::Config(format!(
                "volume {:?} does not match encoder side {}",
                volume.dims(),
                cfg.volume_side
            )));
        }
        let (p, gs, side) = (cfg.patch_size, cfg.grid_side(), cfg.volume_side);
        let src = volume.data();
        let mut out = Vec::with_capacity(side.pow(3));
        for i in 0..gs {
            for j in 0..gs {
                for k in 0..gs {
                    for dx in 0..p {
                        for dy in 0..p {
                            let base = ((i * p + dx) * side + j * p + dy) * side + k * p;
                            out.extend(src[base..base + p].iter().map(|&v| f64::from(v)));
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![cfg.tokens(), cfg.patch_voxels()], out))
    }

    /// The linear patch projection alone, before positions and blocks.
    pub fn patch_projection(&self, g: &mut Graph, volume: &Volume) -> Result<Var> {
        let x = g.constant(self.patches(volume)?);
        self.patch_proj.forward(g, x)
    }

    pub fn forward(&self, g: &mut Graph, volume: &Volume) -> Result<Var> {
        let x = self.patch_projection(g, volume)?;
        let pos = g.constant(self.positions.clone());
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn encode(&self, volume: &Volume) -> Result<ImageEmbedding> {
        let mut g = Graph::new();
        let x = self.forward(&mut g, volume)?;
        Ok(ImageEmbedding {
            tokens: g.value(x).clone().with_requires_grad(false),
            grid_side: self.config.grid_side(),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.patch_proj.params();
        v.extend(self.blocks.iter().flat_map(EncoderBlock::params));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.patch_proj.params_mut();
        v.extend(self.blocks.iter_mut().flat_map(EncoderBlock::params_mut));
        v
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_frozen(frozen));
    }
}

fn patch_positions(cfg: &EncoderConfig) -> Result<Tensor> {
    let (p, gs) = (cfg.patch_size as f64, cfg.grid_side());
    let centre = |i: usize| i as f64 * p + (p - 1.0) / 2.0;
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.channels);
    for i in 0..gs {
        for j in 0..gs {
            for k in 0..gs {
                data.extend(positional_encoding([centre(i), centre(j), centre(k)], cfg.channels)?);
            }
        }
    }
    Ok(Tensor::from_parts(vec![cfg.tokens(), cfg.channels], data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    config: EncoderConfig,
    pub foreground: Param,
    pub background: Param,
    pub box_min: Param,
    pub box_max: Param,
}

impl PromptEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut embed = |name: &str| Param::new(format!("prompt_encoder.{name}"), Tensor::randn(&[c], 1.0, rng));
        Ok(PromptEncoder {
            config,
            foreground: embed("foreground"),
            background: embed("background"),
            box_min: embed("box_min"),
            box_max: embed("box_max"),
        })
    }

    fn tokens(&self, prompt: &PromptSpec) -> Vec<(Coord, &Param)> {
        match prompt {
            PromptSpec::Points { points } => points
                .iter()
                .map(|p| {
                    let e = match p.label {
                        PointLabel::Foreground => &self.foreground,
                        PointLabel::Background => &self.background,
                    };
                    (p.coord, e)
                })
                .collect(),
            PromptSpec::Box { min, max } => vec![(*min, &self.box_min), (*max, &self.box_max)],
        }
    }

    /// Returns the pooled prompt vector as a `[channels]` node.
    pub fn forward(&self, g: &mut Graph, prompt: &PromptSpec) -> Result<Var> {
        prompt.validate(self.config.dims())?;
        let tokens = self.tokens(prompt);
        let n = tokens.len();
        let mut acc: Option<Var> = None;
        for (coord, embed) in tokens {
            let pe = positional_encoding(coord.map(|v| v as f64), self.config.channels)?;
            let pe = g.constant(Tensor::vector(pe));
            let e = g.param(embed);
            let t = g.add(pe, e)?;
            acc = Some(match acc {
                Some(a) => g.add(a, t)?,
                None => t,
            });
        }
        let sum = acc.expect("validated prompt has at least one token");
        g.scale(sum, 1.0 / n as f64)
    }

    pub fn encode(&self, prompt: &PromptSpec) -> Result<PromptEmbedding> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, prompt)?;
        Ok(PromptEmbedding {
            vector: g.value(v).clone().with_requires_grad(false),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.foreground, &self.background, &self.box_min, &self.box_max]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.foreground,
            &mut self.background,
            &mut self.box_min,
            &mut self.box_max,
        ]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_frozen(frozen));
    }
}
