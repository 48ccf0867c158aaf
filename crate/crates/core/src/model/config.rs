use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorHead {
    /// `σ(e_aᵀ h_i)`; needs `embed_dim == hidden_dim`.
    #[default]
    Bilinear,
    /// `σ(FFN(h_i))` with one tanh hidden layer.
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Word-level BiGRU, mean-pool per sentence, sentence-level BiGRU.
    #[default]
    Recurrent,
    /// Self-attention encoder; sentence vectors are read at the separators.
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Set from the vocabulary when the model is built.
    pub vocab_size: usize,
    /// Set from the schema when the model is built; the aspect table has one
    /// extra row for the null aspect.
    pub num_aspects: usize,
    pub max_input_chars: usize,
    pub max_target_chars: usize,
    pub extractor_head: ExtractorHead,
    pub encoder_kind: EncoderKind,
    /// Disabling the extractor gives the plain aspect-conditioned
    /// pointer-generator.
    pub use_extractor: bool,
    /// Learned position embeddings in the transformer encoder.
    pub position_features: bool,
    pub transformer_layers: usize,
    /// Parameters start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 32,
            vocab_size: 0,
            num_aspects: 0,
            max_input_chars: 400,
            max_target_chars: 70,
            extractor_head: ExtractorHead::Bilinear,
            encoder_kind: EncoderKind::Recurrent,
            use_extractor: true,
            position_features: true,
            transformer_layers: 1,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be at least 1".into());
        }
        if self.max_input_chars == 0 || self.max_target_chars == 0 {
            return bad("max_input_chars and max_target_chars must be positive".into());
        }
        if self.use_extractor
            && self.extractor_head == ExtractorHead::Bilinear
            && self.embed_dim != self.hidden_dim
        {
            return bad(format!(
                "bilinear head needs embed_dim == hidden_dim (got {} and {})",
                self.embed_dim, self.hidden_dim
            ));
        }
        match self.encoder_kind {
            EncoderKind::Recurrent if !self.hidden_dim.is_multiple_of(2) => {
                bad(format!("recurrent encoder needs an even hidden_dim, got {}", self.hidden_dim))
            }
            EncoderKind::Transformer if self.transformer_layers == 0 => {
                bad("transformer_layers must be at least 1".into())
            }
            _ if !(self.init_scale > 0.0 && self.init_scale.is_finite()) => {
                bad(format!("init_scale must be positive, got {}", self.init_scale))
            }
            _ => Ok(()),
        }
    }
}
