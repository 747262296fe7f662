use serde::{Deserialize, Serialize};

use crate::data::BatchMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    None,
    S4,
    S4bi,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    S4,
    S4a,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    Pre,
    Post,
}

/// Architecture of a translation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// S4 blocks per S4 layer.
    pub blocks_per_layer: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub state_dim: usize,
    /// Total vocabulary size, reserved ids included.
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout: f32,
    #[serde(default = "default_norm")]
    pub norm: NormStyle,
    #[serde(default)]
    pub include_ae_loss: bool,
    #[serde(default = "yes")]
    pub tie_state_matrices: bool,
    /// Keep the HiPPO `A` and `B` at their initial values during training.
    #[serde(default)]
    pub freeze_state_matrices: bool,
    #[serde(default)]
    pub reverse_source: bool,
    #[serde(default = "unit_step")]
    pub delta: f32,
}

fn default_norm() -> NormStyle {
    NormStyle::Post
}

fn yes() -> bool {
    true
}

fn unit_step() -> f32 {
    1.0
}

impl ModelConfig {
    /// Defaults for a given pair of stack kinds: width 512, feed-forward 2048,
    /// 8 heads, state size 64.
    pub fn new(encoder: EncoderKind, decoder: DecoderKind, vocab_size: usize) -> Self {
        ModelConfig {
            encoder,
            decoder,
            encoder_layers: if encoder == EncoderKind::None { 0 } else { 6 },
            decoder_layers: 6,
            blocks_per_layer: 2,
            d_model: 512,
            d_ff: 2048,
            n_heads: 8,
            state_dim: 64,
            vocab_size,
            dropout: 0.0,
            norm: NormStyle::Post,
            include_ae_loss: false,
            tie_state_matrices: true,
            freeze_state_matrices: false,
            reverse_source: false,
            delta: 1.0,
        }
    }

    pub fn layers(mut self, encoder: usize, decoder: usize) -> Self {
        self.encoder_layers = encoder;
        self.decoder_layers = decoder;
        self
    }

    pub fn blocks(mut self, b: usize) -> Self {
        self.blocks_per_layer = b;
        self
    }

    pub fn width(mut self, d_model: usize, d_ff: usize, n_heads: usize) -> Self {
        self.d_model = d_model;
        self.d_ff = d_ff;
        self.n_heads = n_heads;
        self
    }

    pub fn state(mut self, n: usize) -> Self {
        self.state_dim = n;
        self
    }

    pub fn batch_mode(&self) -> BatchMode {
        if self.encoder == EncoderKind::None {
            BatchMode::DecoderOnly
        } else {
            BatchMode::EncoderDecoder
        }
    }

    pub fn uses_s4(&self) -> bool {
        matches!(self.encoder, EncoderKind::S4 | EncoderKind::S4bi)
            || matches!(self.decoder, DecoderKind::S4 | DecoderKind::S4a)
    }

    pub fn uses_attention(&self) -> bool {
        self.encoder == EncoderKind::Transformer || self.decoder != DecoderKind::S4
    }

    /// Short architecture label such as `∅-S4` or `Tr-S4A`.
    pub fn label(&self) -> String {
        let enc = match self.encoder {
            EncoderKind::None => "∅",
            EncoderKind::S4 => "S4",
            EncoderKind::S4bi => "S4bi",
            EncoderKind::Transformer => "Tr",
        };
        let dec = match self.decoder {
            DecoderKind::S4 => "S4",
            DecoderKind::S4a => "S4A",
            DecoderKind::Transformer => "Tr",
        };
        format!("{enc}-{dec}")
    }

    /// Checks every structural rule and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.encoder == EncoderKind::None && self.encoder_layers != 0 {
            bad.push("encoder `none` requires encoder_layers = 0".to_string());
        }
        if self.encoder != EncoderKind::None && self.encoder_layers == 0 {
            bad.push("an encoder needs at least one layer".to_string());
        }
        if self.encoder == EncoderKind::None && self.decoder != DecoderKind::S4 {
            bad.push("decoders with cross-attention need an encoder".to_string());
        }
        if self.decoder_layers == 0 {
            bad.push("decoder_layers must be positive".to_string());
        }
        if self.uses_s4() && (self.blocks_per_layer == 0 || self.state_dim == 0) {
            bad.push("S4 stacks need blocks_per_layer ≥ 1 and state_dim ≥ 1".to_string());
        }
        if self.d_model == 0 || self.d_ff == 0 {
            bad.push("d_model and d_ff must be positive".to_string());
        }
        if self.uses_attention() && (self.n_heads == 0 || self.d_model % self.n_heads != 0) {
            bad.push(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size <= crate::data::RESERVED {
            bad.push(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.delta > 0.0) {
            bad.push(format!("delta {} must be positive", self.delta));
        }
        if self.include_ae_loss && self.encoder != EncoderKind::None {
            bad.push("include_ae_loss applies to decoder-only models".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
