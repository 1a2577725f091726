//! The learnable vector field: a pre-norm transformer over frames.
//!
//! Each frame concatenates the noisy mel `x_t`, the context mel `x_ctx` and
//! a conditioning embedding (a unit id lookup, or a projected degraded mel
//! frame in the ablation mode). The concatenation is projected to the model
//! width, a sinusoidal time embedding passed through a small MLP is added to
//! every frame, and the stack of attention/MLP blocks is followed by a
//! zero-initialised projection back to mel channels.
//!
//! Forward and backward passes are written out by hand and are generic over
//! the float type: training runs in `f32`, gradient checks in `f64`.

mod net;
mod params;

pub use net::{condition_input, embed_condition, embed_units, forward, CondInput, FieldNet, SampleGrad};
pub use params::{ModelParams, Tensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Conditioning comes from padded discrete unit ids.
    #[default]
    Units,
    /// Conditioning comes from degraded mel frames.
    MelInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Width of each attention head. Defaults to `dim / heads`; set it when
    /// `dim` is not a multiple of `heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    /// Hidden width of the feed-forward block as a multiple of `dim`.
    #[serde(default = "ModelConfig::default_ff_mult")]
    pub ff_mult: usize,
    /// K units + filler + batch padding.
    pub unit_vocab: usize,
    #[serde(default = "ModelConfig::default_unit_emb_dim")]
    pub unit_emb_dim: usize,
    #[serde(default = "ModelConfig::default_mel_dim")]
    pub mel_dim: usize,
    pub max_frames: usize,
    #[serde(default)]
    pub input_mode: InputMode,
    /// Add fixed sinusoidal absolute positions to the projected input, on
    /// top of rotary relative positions inside attention.
    #[serde(default = "ModelConfig::default_abs_pos")]
    pub abs_pos: bool,
    /// Add to each conditioning row the sinusoid of the frame position it
    /// covers when the conditioning is spread evenly over the target (unit
    /// `i` of `n` over `T` frames sits at `(i + 0.5) T / n - 0.5`).
    #[serde(default = "ModelConfig::default_cond_pos")]
    pub cond_pos: bool,
}

impl ModelConfig {
    fn default_ff_mult() -> usize {
        2
    }

    fn default_unit_emb_dim() -> usize {
        512
    }

    fn default_mel_dim() -> usize {
        80
    }

    fn default_abs_pos() -> bool {
        true
    }

    fn default_cond_pos() -> bool {
        true
    }

    fn preset(layers: usize, heads: usize, dim: usize, max_frames: usize, unit_vocab: usize) -> Self {
        Self {
            layers,
            heads,
            dim,
            head_dim: None,
            ff_mult: Self::default_ff_mult(),
            unit_vocab,
            unit_emb_dim: Self::default_unit_emb_dim(),
            mel_dim: Self::default_mel_dim(),
            max_frames,
            input_mode: InputMode::Units,
            abs_pos: Self::default_abs_pos(),
            cond_pos: Self::default_cond_pos(),
        }
    }

    /// Desk-scale default: 4 layers, 4 heads, width 128.
    pub fn tiny(unit_vocab: usize) -> Self {
        Self::preset(4, 4, 128, 256, unit_vocab)
    }

    /// 9 layers, 6 heads of width 64, model width 512.
    pub fn paper_small(unit_vocab: usize) -> Self {
        let mut cfg = Self::preset(9, 6, 512, 4096, unit_vocab);
        cfg.head_dim = Some(64);
        cfg.ff_mult = 4;
        cfg
    }

    /// 18 layers, 12 heads, width 768.
    pub fn paper_base(unit_vocab: usize) -> Self {
        let mut cfg = Self::preset(18, 12, 768, 4096, unit_vocab);
        cfg.ff_mult = 4;
        cfg
    }

    pub fn with_mode(mut self, mode: InputMode) -> Self {
        self.input_mode = mode;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.dim / self.heads.max(1))
    }

    /// Total width of the attention projections.
    pub fn attn_dim(&self) -> usize {
        self.heads * self.head_dim()
    }

    pub fn ff_dim(&self) -> usize {
        self.dim * self.ff_mult
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_mult == 0 {
            return fail(format!("layers, heads, dim and ff_mult must be positive: {self:?}"));
        }
        if self.head_dim == Some(0) {
            return fail("head_dim must be positive".into());
        }
        if self.head_dim.is_none() && self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.dim % 2 != 0 {
            return fail(format!("dim {} must be even for sinusoidal embeddings", self.dim));
        }
        if self.unit_vocab < 3 {
            return fail(format!("unit_vocab must be at least 3, got {}", self.unit_vocab));
        }
        if self.unit_emb_dim == 0 || self.mel_dim == 0 || self.max_frames == 0 {
            return fail("unit_emb_dim, mel_dim and max_frames must be positive".into());
        }
        Ok(())
    }

    /// Parameter count by architecture arithmetic.
    pub fn param_count(&self) -> usize {
        let (d, e, m, f) = (self.dim, self.unit_emb_dim, self.mel_dim, self.ff_dim());
        let a = self.attn_dim();
        let cond = match self.input_mode {
            InputMode::Units => self.unit_vocab * e,
            InputMode::MelInput => m * e + e + e,
        };
        let input = (2 * m + e) * d + d;
        let time = 2 * (d * d + d);
        let block = 2 * d + 3 * (d * a + a) + (a * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let head = 2 * d + d * m + m;
        cond + input + time + self.layers * block + head
    }
}
