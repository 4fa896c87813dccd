use rand::Rng as _;
use rand_distr::StandardNormal;

use super::tree::{param_tree, Tree};
use super::{ModelConfig, StackConfig};
use crate::numerics::Tensor;
use crate::rng::{self, stream};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;
/// Initial weights are resampled outside `±INIT_CLIP` standard deviations.
pub const INIT_CLIP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}
param_tree!(Linear { weight, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}
param_tree!(Norm { gain, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
}
param_tree!(Attention {} { query, key, value, out });

/// Pre-LN transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}
param_tree!(Block {} { norm1, attn, norm2, mlp_in, mlp_out });

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    /// `[T²·C × D]` patch projection (no bias).
    pub patch_embed: T,
    /// `[n_max × D]`, gathered by original patch index.
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
}
param_tree!(Encoder { patch_embed, pos_embed } { blocks, norm });

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    /// Learnable `[D_dec]` stand-in for every masked patch.
    pub mask_token: T,
    pub pos_embed: T,
    /// Encoder width to decoder width.
    pub embed: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    /// Decoder width to `T²·C` pixel values.
    pub pixel_head: Linear<T>,
}
param_tree!(Decoder { mask_token, pos_embed } { embed, blocks, norm, pixel_head });

/// Linear classification layer on the pooled encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    pub weight: T,
    pub bias: T,
}
param_tree!(ClassifierHead { weight, bias });

/// Everything learnable. Pretraining uses `encoder + decoder`, fine-tuning
/// `encoder + head`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub decoder: Option<Decoder<T>>,
    pub head: Option<ClassifierHead<T>>,
}
param_tree!(Model {} { encoder, decoder, head });

pub type EncoderParams = Encoder<Tensor>;
pub type DecoderParams = Decoder<Tensor>;
pub type HeadParams = ClassifierHead<Tensor>;
pub type Params = Model<Tensor>;

type Shape = Vec<usize>;

fn linear_shape(inp: usize, out: usize) -> Linear<Shape> {
    Linear {
        weight: vec![inp, out],
        bias: vec![out],
    }
}

fn norm_shape(d: usize) -> Norm<Shape> {
    Norm {
        gain: vec![d],
        bias: vec![d],
    }
}

fn block_shapes(stack: &StackConfig) -> Vec<Block<Shape>> {
    let d = stack.dim;
    (0..stack.layers)
        .map(|_| Block {
            norm1: norm_shape(d),
            attn: Attention {
                query: linear_shape(d, d),
                key: linear_shape(d, d),
                value: linear_shape(d, d),
                out: linear_shape(d, d),
            },
            norm2: norm_shape(d),
            mlp_in: linear_shape(d, stack.mlp_dim),
            mlp_out: linear_shape(stack.mlp_dim, d),
        })
        .collect()
}

pub fn encoder_shapes(cfg: &ModelConfig) -> Encoder<Shape> {
    let d = cfg.encoder.dim;
    Encoder {
        patch_embed: vec![cfg.patch_len(), d],
        pos_embed: vec![cfg.max_tokens, d],
        blocks: block_shapes(&cfg.encoder),
        norm: norm_shape(d),
    }
}

pub fn decoder_shapes(cfg: &ModelConfig) -> Decoder<Shape> {
    let dd = cfg.decoder.dim;
    Decoder {
        mask_token: vec![dd],
        pos_embed: vec![cfg.max_tokens, dd],
        embed: linear_shape(cfg.encoder.dim, dd),
        blocks: block_shapes(&cfg.decoder),
        norm: norm_shape(dd),
        pixel_head: linear_shape(dd, cfg.patch_len()),
    }
}

pub fn head_shapes(cfg: &ModelConfig) -> ClassifierHead<Shape> {
    ClassifierHead {
        weight: vec![cfg.encoder.dim, cfg.classes],
        bias: vec![cfg.classes],
    }
}

/// Shapes of every array a model with the given parts must contain.
pub fn model_shapes(cfg: &ModelConfig, decoder: bool, head: bool) -> Model<Shape> {
    Model {
        encoder: encoder_shapes(cfg),
        decoder: decoder.then(|| decoder_shapes(cfg)),
        head: head.then(|| head_shapes(cfg)),
    }
}

/// Normal(0, INIT_STD²) resampled until within `±INIT_CLIP` std.
fn bounded_normal(rng: &mut rng::Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= INIT_CLIP {
            return z * INIT_STD;
        }
    }
}

fn init_tree<S: Tree<Shape>>(shapes: &S, seed: u64) -> S::Mapped<Tensor> {
    let mut rng = rng::rng(seed);
    shapes.map("", &mut |name, shape| {
        if name.ends_with("gain") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with("bias") {
            Tensor::zeros(shape)
        } else {
            let n = shape.iter().product();
            let data = (0..n).map(|_| bounded_normal(&mut rng)).collect();
            Tensor::new(shape.clone(), data).expect("shape from config")
        }
    })
}

pub fn init_encoder(cfg: &ModelConfig, seed: u64) -> EncoderParams {
    init_tree(&encoder_shapes(cfg), rng::derive_seed(seed, &[stream::INIT, 0]))
}

pub fn init_decoder(cfg: &ModelConfig, seed: u64) -> DecoderParams {
    init_tree(&decoder_shapes(cfg), rng::derive_seed(seed, &[stream::INIT, 1]))
}

pub fn init_head(cfg: &ModelConfig, seed: u64) -> HeadParams {
    init_tree(&head_shapes(cfg), rng::derive_seed(seed, &[stream::INIT, 2]))
}

/// Fresh encoder, decoder and classifier head. Each part draws from its own
/// seed stream, so an encoder initialized here equals `init_encoder(cfg, seed)`.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Params {
    Model {
        encoder: init_encoder(cfg, seed),
        decoder: Some(init_decoder(cfg, seed)),
        head: Some(init_head(cfg, seed)),
    }
}

/// Number of scalars in a tensor tree.
pub fn count_scalars<S: Tree<Tensor>>(tree: &S) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.len());
    n
}

/// All scalars in visiting order.
pub fn flatten<S: Tree<Tensor>>(tree: &S) -> Vec<f64> {
    let mut out = Vec::new();
    tree.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Overwrites every scalar from `flat`, in visiting order.
pub fn unflatten<S: Tree<Tensor>>(tree: &mut S, flat: &[f64]) {
    let mut offset = 0;
    tree.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.len(), "flat parameter length mismatch");
}
