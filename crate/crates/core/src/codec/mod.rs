//! Frame and sequence coding.
//!
//! Lossless frames code an 8³ base grid raw and then every finer scale with
//! the eight-stage occupancy model. Lossy frames do the same up to bit depth
//! `m`, transmit a quantized latent there, and rebuild the remaining scales
//! with the one-stage model, keeping the `k` most probable candidates where
//! `k` is the true count sent in the frame header.

pub mod bitstream;
mod frame;

pub use bitstream::{Bitstream, EncodedFrame, FrameHeader, FrameType};
pub use frame::{
    base_scale, decode_frame, decode_frame_lossless, decode_frame_lossy,
    decode_frame_residual_baseline, decode_sequence, encode_frame, encode_frame_lossless,
    encode_frame_lossy, encode_frame_residual_baseline, encode_sequence, encode_sequence_with_recon,
    Reference, Trace,
};

use crate::error::{Error, Result};
use crate::tensor::MAX_BIT_DEPTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Lossless,
    Lossy,
}

/// How P-frames use their reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterScheme {
    /// Reference features are concatenated onto the occupancy model input.
    Conditional,
    /// Baseline: the latent residual against the reference latent is coded
    /// and geometry uses intra priors only.
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeConfig {
    pub mode: Mode,
    /// Bit depth of the losslessly coded geometry; equals `bit_depth` in
    /// lossless mode and `bit_depth - m` lossy steps follow otherwise.
    pub m: u8,
    pub model_id: u8,
    pub inter_enabled: bool,
    pub scheme: InterScheme,
    pub bit_depth: u8,
}

/// Model slot used for lossless coding.
pub const LOSSLESS_MODEL: u8 = 0;

/// A lossy operating point: model slot, lossy step count and rate weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub model_id: u8,
    pub lossy_steps: u8,
    pub lambda: f32,
}

/// Five lossy slots from lowest to highest rate.
pub const PRESETS: [Preset; 5] = [
    Preset { model_id: 1, lossy_steps: 3, lambda: 4.0 },
    Preset { model_id: 2, lossy_steps: 3, lambda: 1.0 },
    Preset { model_id: 3, lossy_steps: 2, lambda: 1.0 },
    Preset { model_id: 4, lossy_steps: 2, lambda: 0.25 },
    Preset { model_id: 5, lossy_steps: 1, lambda: 0.25 },
];

pub fn preset(model_id: u8) -> Option<Preset> {
    PRESETS.iter().copied().find(|p| p.model_id == model_id)
}

impl EncodeConfig {
    pub fn lossless(bit_depth: u8) -> Result<Self> {
        let c = Self {
            mode: Mode::Lossless,
            m: bit_depth,
            model_id: LOSSLESS_MODEL,
            inter_enabled: true,
            scheme: InterScheme::Conditional,
            bit_depth,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn lossy(bit_depth: u8, m: u8) -> Result<Self> {
        let c = Self {
            mode: Mode::Lossy,
            m,
            model_id: 1,
            inter_enabled: true,
            scheme: InterScheme::Conditional,
            bit_depth,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_preset(bit_depth: u8, model_id: u8) -> Result<Self> {
        let p = preset(model_id)
            .ok_or_else(|| Error::Config(format!("no lossy preset with model id {model_id}")))?;
        if p.lossy_steps >= bit_depth {
            return Err(Error::Config(format!(
                "preset {model_id} needs {} lossy steps, bit depth is {bit_depth}",
                p.lossy_steps
            )));
        }
        let mut c = Self::lossy(bit_depth, bit_depth - p.lossy_steps)?;
        c.model_id = model_id;
        Ok(c)
    }

    pub fn with_inter(mut self, enabled: bool) -> Self {
        self.inter_enabled = enabled;
        self
    }

    pub fn with_scheme(mut self, scheme: InterScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn lossy_steps(&self) -> u8 {
        self.bit_depth - self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_depth == 0 || self.bit_depth > MAX_BIT_DEPTH {
            return Err(Error::Config(format!(
                "bit depth {} outside 1..={MAX_BIT_DEPTH}",
                self.bit_depth
            )));
        }
        match self.mode {
            Mode::Lossless => {
                if self.m != self.bit_depth {
                    return Err(Error::Config("lossless mode codes every scale losslessly".into()));
                }
                if self.scheme == InterScheme::Residual {
                    return Err(Error::Config("the residual scheme needs lossy mode".into()));
                }
            }
            Mode::Lossy => {
                if self.m < 1 || self.m >= self.bit_depth {
                    return Err(Error::Config(format!(
                        "lossless depth m = {} must satisfy 1 <= m < {}",
                        self.m, self.bit_depth
                    )));
                }
            }
        }
        Ok(())
    }
}
