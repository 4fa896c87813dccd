//! ViT encoder, lightweight decoder, reconstruction loss and classifier head.

mod forward;
mod params;
pub mod tree;

pub use forward::{
    attention, bind, block_forward, classifier_forward, classify_patches, decoder_forward,
    embed_patches, embed_unmasked, encoder_forward, pretrain_loss, reconstruction_loss,
    EncoderOutput,
};
pub use params::{
    count_scalars, decoder_shapes, encoder_shapes, flatten, head_shapes, init_decoder,
    init_encoder, init_head, init_parameters, model_shapes, unflatten, Attention, Block,
    ClassifierHead, Decoder, DecoderParams, Encoder, EncoderParams, HeadParams, Linear, Model,
    Norm, Params, INIT_CLIP, INIT_STD,
};

use crate::numerics::{NumericsError, LAYER_NORM_EPS};
use crate::patching::PatchError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{n} patches exceed the positional table of {max} rows")]
    Capacity { n: usize, max: usize },
    #[error("patches hold {got} values but the model expects {expected}")]
    PatchLength { got: usize, expected: usize },
    #[error("masking plan covers {plan} patches but the input has {input}")]
    PlanMismatch { plan: usize, input: usize },
    #[error("masking plan leaves {0} unmasked patches; the encoder needs at least one")]
    NoVisiblePatches(usize),
    #[error("masking plan masks no patches; nothing to reconstruct")]
    NothingMasked,
    #[error("model has no {0}")]
    MissingPart(&'static str),
}

/// One transformer stack (encoder or decoder).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl StackConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub channels: usize,
    /// Rows of the positional tables: the full patch count of an image.
    pub max_tokens: usize,
    pub classes: usize,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// ViT-Base encoder with an 8-layer, 512-wide decoder on 224×224
    /// grayscale input cut into 16×16 patches.
    pub fn vit_base() -> Self {
        Self {
            patch_size: 16,
            channels: 1,
            max_tokens: 196,
            classes: 4,
            encoder: StackConfig {
                layers: 12,
                dim: 768,
                heads: 12,
                mlp_dim: 3072,
            },
            decoder: StackConfig {
                layers: 8,
                dim: 512,
                heads: 16,
                mlp_dim: 2048,
            },
            norm_eps: LAYER_NORM_EPS,
        }
    }

    /// The gradient-check configuration: 16×16 input, 4×4 patches, two
    /// 8-wide encoder blocks and one 8-wide decoder block.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            channels: 1,
            max_tokens: 16,
            classes: 4,
            encoder: StackConfig {
                layers: 2,
                dim: 8,
                heads: 2,
                mlp_dim: 16,
            },
            decoder: StackConfig {
                layers: 1,
                dim: 8,
                heads: 2,
                mlp_dim: 16,
            },
            norm_eps: LAYER_NORM_EPS,
        }
    }

    /// Sets `max_tokens` for square `size × size` images.
    pub fn for_image_size(mut self, size: usize) -> Self {
        self.max_tokens = (size / self.patch_size).pow(2);
        self
    }

    /// `T²·C`
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.patch_size == 0 || self.channels == 0 {
            return bad("patch_size and channels must be positive".into());
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".into());
        }
        if self.classes == 0 {
            return bad("classes must be at least 1".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        for (name, s) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if s.layers == 0 || s.dim == 0 || s.heads == 0 || s.mlp_dim == 0 {
                return bad(format!("{name} layers, dim, heads and mlp_dim must be positive"));
            }
            if s.dim % s.heads != 0 {
                return bad(format!("{name} dim {} is not divisible by {} heads", s.dim, s.heads));
            }
        }
        Ok(())
    }
}
