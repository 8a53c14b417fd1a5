//! Full network: shallow conv, three-level EMB encoder with skip connections,
//! latent EMBs, mirrored decoder, refinement EMBs and a zero-initialized
//! residual head so that `output = input + R`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{emb_forward, emb_params, lmrb_forward, lmrb_params, BlockCtx, EmTrace, LmrbConfig};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::nn::{depth_to_space, space_to_depth};
use crate::ops::concat;
use crate::params::{join, Bound, ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial extents must be divisible by this (three down-sampling steps).
pub const SPATIAL_DIVISOR: usize = 8;

/// Learnable parameters of a model, keyed by hierarchical name.
pub type ModelParams<T> = ParamSet<T>;

/// Where local model residual blocks are inserted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmrbPlacement {
    /// On each encoder-to-decoder skip path.
    SkipPaths,
    /// Once, at full resolution after the refinement EMBs.
    #[serde(rename = "bottleneck")]
    AfterRefinement,
    #[default]
    Both,
}

impl LmrbPlacement {
    fn skips(self) -> bool {
        matches!(self, LmrbPlacement::SkipPaths | LmrbPlacement::Both)
    }

    fn after_refinement(self) -> bool {
        matches!(self, LmrbPlacement::AfterRefinement | LmrbPlacement::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width `C` of the first level; level `ℓ` has `C·2^ℓ` channels.
    pub base_channels: usize,
    /// EMBs per level: three encoder (mirrored in the decoder) plus latent.
    pub depths: [usize; 4],
    pub refinement_blocks: usize,
    /// Attention heads per level.
    pub heads: [usize; 4],
    /// Hidden width of the feedforward block relative to its input.
    pub ffn_expansion: f64,
    /// Bias on the shallow feature conv.
    pub shallow_bias: bool,
    pub em: EmConfig,
    pub lmrb: LmrbConfig,
    pub lmrb_placement: LmrbPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        ModelConfig {
            base_channels: 48,
            depths: [9, 6, 3, 0],
            refinement_blocks: 4,
            heads: [1, 2, 4, 8],
            ffn_expansion: 2.66,
            shallow_bias: true,
            em: EmConfig::default(),
            lmrb: LmrbConfig::default(),
            lmrb_placement: LmrbPlacement::default(),
        }
    }

    /// Small configuration that trains in minutes on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            base_channels: 8,
            depths: [2, 2, 2, 0],
            refinement_blocks: 1,
            heads: [2, 2, 2, 2],
            ..Self::paper()
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("model.base_channels must be >= 1".into()));
        }
        if !(self.ffn_expansion > 0.0 && self.ffn_expansion.is_finite()) {
            return Err(Error::Config("model.ffn_expansion must be positive".into()));
        }
        for (level, &h) in self.heads.iter().enumerate() {
            let c = self.width(level);
            if h == 0 || !c.is_multiple_of(h) {
                return Err(Error::Indivisible {
                    what: format!("level {} channels by model.heads[{level}]", level + 1),
                    extent: c,
                    divisor: h,
                });
            }
        }
        self.em.validate()?;
        self.lmrb.validate()
    }
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

/// Output of a taped forward pass.
pub struct ForwardPass<'t, T: Scalar> {
    /// `input + R`, not clamped.
    pub output: Var<'t, T>,
    /// Final bases of every EM run, in execution order.
    pub em_trace: Vec<EmTrace<T>>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut b = ParamBuilder::new(seed);
        let c0 = cfg.base_channels;
        let emb = |b: &mut ParamBuilder<T>, prefix: &str, level: usize, count: usize| -> Result<()> {
            for i in 0..count {
                emb_params(
                    b,
                    &join(prefix, &i.to_string()),
                    cfg.width(level),
                    cfg.heads[level],
                    &cfg.em,
                    cfg.ffn_expansion,
                )?;
            }
            Ok(())
        };
        b.conv("shallow", c0, 3, 3, cfg.shallow_bias)?;
        for level in 0..3 {
            let c = cfg.width(level);
            emb(&mut b, &format!("enc{}", level + 1), level, cfg.depths[level])?;
            b.conv(&format!("down{}", level + 1), 2 * c, 4 * c, 1, false)?;
        }
        emb(&mut b, "latent", 3, cfg.depths[3])?;
        for level in (0..3).rev() {
            let c = cfg.width(level);
            let l = level + 1;
            b.conv(&format!("up{l}"), 4 * c, 2 * c, 1, false)?;
            if cfg.lmrb_placement.skips() {
                lmrb_params(&mut b, &format!("skip{l}"), c, &cfg.lmrb)?;
            }
            b.conv(&format!("fuse{l}"), c, 2 * c, 1, false)?;
            emb(&mut b, &format!("dec{l}"), level, cfg.depths[level])?;
        }
        emb(&mut b, "refine", 0, cfg.refinement_blocks)?;
        if cfg.lmrb_placement.after_refinement() {
            lmrb_params(&mut b, "refine.lmrb", c0, &cfg.lmrb)?;
        }
        b.zero_conv("final", 3, c0, 3, true)?;
        Ok(Model {
            config,
            params: b.finish(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Forward pass on `tape`; parameters become named differentiable leaves
    /// when `trainable` and the tape records.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, trainable: bool) -> Result<ForwardPass<'t, T>> {
        let bound = Bound::bind(tape, &self.params, trainable)?;
        let ctx = BlockCtx::new(&bound, &self.config.em, &self.config.lmrb);
        let output = forward(&self.config, &ctx, x)?;
        Ok(ForwardPass {
            output,
            em_trace: ctx.take_trace(),
        })
    }

    /// Derained images clamped to `[0, 1]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let out = self.forward(&tape, &tape.constant(x.clone()), false)?.output;
        Ok(out.clamp(0.0, 1.0).value().clone())
    }
}

/// The network body on already bound parameters: returns `x + R`.
pub fn forward<'t, T: Scalar>(cfg: &ModelConfig, ctx: &BlockCtx<'_, 't, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::InvalidShape {
            shape,
            reason: "model input must be N×3×H×W".into(),
        });
    }
    for (what, e) in [("input height", shape[2]), ("input width", shape[3])] {
        if e % SPATIAL_DIVISOR != 0 {
            return Err(Error::Indivisible {
                what: what.into(),
                extent: e,
                divisor: SPATIAL_DIVISOR,
            });
        }
    }
    let embs = |mut f: Var<'t, T>, prefix: &str, level: usize, count: usize| -> Result<Var<'t, T>> {
        for i in 0..count {
            f = emb_forward(&f, ctx, &join(prefix, &i.to_string()), cfg.heads[level])?;
        }
        Ok(f)
    };
    let mut f = ctx.conv("shallow", x, 1)?;
    let mut skips = Vec::with_capacity(3);
    for level in 0..3 {
        f = embs(f, &format!("enc{}", level + 1), level, cfg.depths[level])?;
        skips.push(f.clone());
        f = ctx.conv(&format!("down{}", level + 1), &space_to_depth(&f)?, 1)?;
    }
    f = embs(f, "latent", 3, cfg.depths[3])?;
    for level in (0..3).rev() {
        let l = level + 1;
        f = depth_to_space(&ctx.conv(&format!("up{l}"), &f, 1)?)?;
        let mut skip = skips.pop().expect("one skip per level");
        if cfg.lmrb_placement.skips() {
            skip = lmrb_forward(&skip, ctx, &format!("skip{l}"))?;
        }
        f = ctx.conv(&format!("fuse{l}"), &concat(&[&f, &skip], 1)?, 1)?;
        f = embs(f, &format!("dec{l}"), level, cfg.depths[level])?;
    }
    f = embs(f, "refine", 0, cfg.refinement_blocks)?;
    if cfg.lmrb_placement.after_refinement() {
        f = lmrb_forward(&f, ctx, "refine.lmrb")?;
    }
    ctx.conv("final", &f, 1)?.add(x)
}
