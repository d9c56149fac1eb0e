use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Tying;
use crate::error::{LunaError, Result};
use crate::layers::Pooling;
use crate::numerics::Omega;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    EncoderClassifier,
    DecoderLm,
    Seq2seq,
}

impl FromStr for Mode {
    type Err = LunaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_classifier" => Ok(Mode::EncoderClassifier),
            "decoder_lm" => Ok(Mode::DecoderLm),
            "seq2seq" => Ok(Mode::Seq2seq),
            other => Err(LunaError::Config(format!("unknown model mode '{other}'"))),
        }
    }
}

/// Attention used inside every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    Luna,
    /// Softmax attention over the whole context.
    Full,
    /// Softmax attention over a learned fixed-length projection of the context.
    FixedProj,
}

impl FromStr for Mechanism {
    type Err = LunaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "luna" => Ok(Mechanism::Luna),
            "full" => Ok(Mechanism::Full),
            "fixed_proj" => Ok(Mechanism::FixedProj),
            other => Err(LunaError::Config(format!("unknown mechanism '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Luna => "luna",
            Mechanism::Full => "full",
            Mechanism::FixedProj => "fixed_proj",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub mechanism: Mechanism,
    pub d: usize,
    pub d_hidden: usize,
    pub heads: usize,
    /// Length of the packed sequence `P` (also the fixed projection length).
    pub l: usize,
    pub layers: usize,
    pub vocab: usize,
    /// Output classes of the classifier head; unused by the sequence modes.
    pub classes: usize,
    /// Longest input, including a prepended `[CLS]`.
    pub n_max: usize,
    pub tying: Tying,
    pub pack_omega: Omega,
    pub pooling: Pooling,
    pub dropout_attn: f64,
    pub dropout_hidden: f64,
    pub dropout_residual: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::EncoderClassifier,
            mechanism: Mechanism::Luna,
            d: 32,
            d_hidden: 64,
            heads: 2,
            l: 16,
            layers: 2,
            vocab: 16,
            classes: 2,
            n_max: 1024,
            tying: Tying::None,
            pack_omega: Omega::Softplus,
            pooling: Pooling::Cls,
            dropout_attn: 0.1,
            dropout_hidden: 0.1,
            dropout_residual: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LunaError::Config(msg));
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.l == 0 {
            return bad("l must be at least 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.d_hidden < self.d {
            return bad(format!("d_hidden = {} is smaller than d = {}", self.d_hidden, self.d));
        }
        if self.vocab == 0 || self.n_max == 0 {
            return bad("vocab and n_max must be positive".into());
        }
        for (name, rate) in [
            ("dropout_attn", self.dropout_attn),
            ("dropout_hidden", self.dropout_hidden),
            ("dropout_residual", self.dropout_residual),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} = {rate} is outside [0, 1)"));
            }
        }
        match self.mode {
            Mode::EncoderClassifier => {
                if self.classes < 2 {
                    return bad("a classifier needs at least 2 classes".into());
                }
                if self.pooling == Pooling::PMean && self.mechanism != Mechanism::Luna {
                    return bad(format!("p_mean pooling needs the luna mechanism, not {}", self.mechanism));
                }
            }
            Mode::DecoderLm | Mode::Seq2seq => {
                if self.mechanism == Mechanism::FixedProj {
                    return bad("fixed_proj is only available for encoder_classifier".into());
                }
                if self.mechanism == Mechanism::Luna && self.pack_omega == Omega::Softmax {
                    return bad("causal luna needs pack_omega elu1 or softplus".into());
                }
            }
        }
        Ok(())
    }

    /// Whether `[CLS]` is prepended to classifier inputs.
    pub fn uses_cls(&self) -> bool {
        self.mode == Mode::EncoderClassifier && self.pooling == Pooling::Cls
    }

    /// Longest raw token sequence accepted by the encoder.
    pub fn max_tokens(&self) -> usize {
        if self.uses_cls() {
            self.n_max - 1
        } else {
            self.n_max
        }
    }
}
