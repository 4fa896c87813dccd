use super::params::{Block, ClassifierHead, Decoder, Encoder, Linear, Model, Norm, Params};
use super::tree::Tree;
use super::{ModelConfig, ModelError};
use crate::numerics::{Tape, Tensor, Var};
use crate::patching::{split_into_patches, ImageGrid, MaskingPlan, PatchGrid};

type Result<T> = std::result::Result<T, ModelError>;

/// Records every parameter as a tape leaf. Leaves whose name fails
/// `trainable` are constants and receive no gradient.
pub fn bind(tape: &mut Tape, params: &Params, trainable: impl Fn(&str) -> bool) -> Model<Var> {
    params.map("", &mut |name, t| tape.leaf(t.clone(), trainable(name)))
}

fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    Ok(tape.add_bias(y, l.bias)?)
}

fn norm(tape: &mut Tape, x: Var, n: &Norm<Var>, eps: f64) -> Result<Var> {
    Ok(tape.layer_norm(x, n.gain, n.bias, eps)?)
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
pub fn attention(tape: &mut Tape, x: Var, a: &super::Attention<Var>, heads: usize) -> Result<Var> {
    let q = linear(tape, x, &a.query)?;
    let k = linear(tape, x, &a.key)?;
    let v = linear(tape, x, &a.value)?;
    let dim = tape.value(q).last_dim();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, 1)?;
        outputs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&outputs)?;
    linear(tape, merged, &a.out)
}

/// `h = x + MSA(LN(x))`, then `h + MLP(LN(h))`.
pub fn block_forward(tape: &mut Tape, x: Var, b: &Block<Var>, heads: usize, eps: f64) -> Result<Var> {
    let h = norm(tape, x, &b.norm1, eps)?;
    let h = attention(tape, h, &b.attn, heads)?;
    let x = tape.add(x, h)?;
    let h = norm(tape, x, &b.norm2, eps)?;
    let h = linear(tape, h, &b.mlp_in)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, &b.mlp_out)?;
    Ok(tape.add(x, h)?)
}

fn check_grid(pg: &PatchGrid, cfg: &ModelConfig) -> Result<()> {
    if pg.len() > cfg.max_tokens {
        return Err(ModelError::Capacity {
            n: pg.len(),
            max: cfg.max_tokens,
        });
    }
    if pg.patch_len() != cfg.patch_len() {
        return Err(ModelError::PatchLength {
            got: pg.patch_len(),
            expected: cfg.patch_len(),
        });
    }
    Ok(())
}

/// Projects the selected patches and adds the positional rows at their
/// original grid indices. Output row `i` belongs to patch `indices[i]`.
pub fn embed_patches(
    tape: &mut Tape,
    pg: &PatchGrid,
    indices: &[usize],
    enc: &Encoder<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    check_grid(pg, cfg)?;
    if indices.is_empty() {
        return Err(ModelError::NoVisiblePatches(0));
    }
    let x = Tensor::new(vec![indices.len(), pg.patch_len()], pg.gather(indices))?;
    let x = tape.constant(x);
    let proj = tape.matmul(x, enc.patch_embed)?;
    let pos = tape.gather_rows(enc.pos_embed, indices)?;
    Ok(tape.add(proj, pos)?)
}

/// `z₀` for the unmasked patches of `plan`, in ascending patch order.
pub fn embed_unmasked(
    tape: &mut Tape,
    pg: &PatchGrid,
    plan: &MaskingPlan,
    enc: &Encoder<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    if plan.n != pg.len() {
        return Err(ModelError::PlanMismatch {
            plan: plan.n,
            input: pg.len(),
        });
    }
    embed_patches(tape, pg, &plan.unmasked, enc, cfg)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[s × D]` final-LN token outputs.
    pub tokens: Var,
    /// `[1 × D]` mean of `tokens`.
    pub pooled: Var,
}

pub fn encoder_forward(tape: &mut Tape, z0: Var, enc: &Encoder<Var>, cfg: &ModelConfig) -> Result<EncoderOutput> {
    let width = tape.value(z0).last_dim();
    if width != cfg.encoder.dim {
        return Err(ModelError::Config(format!(
            "encoder input width {width} != D = {}",
            cfg.encoder.dim
        )));
    }
    let mut x = z0;
    for b in &enc.blocks {
        x = block_forward(tape, x, b, cfg.encoder.heads, cfg.norm_eps)?;
    }
    let tokens = norm(tape, x, &enc.norm, cfg.norm_eps)?;
    let pooled = tape.mean_rows(tokens)?;
    Ok(EncoderOutput { tokens, pooled })
}

/// Reconstructs the masked patches, `[m × T²·C]` in ascending masked-index
/// order.
pub fn decoder_forward(
    tape: &mut Tape,
    tokens: Var,
    plan: &MaskingPlan,
    dec: &Decoder<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let rows = tape.value(tokens).shape()[0];
    if rows != plan.u() {
        return Err(ModelError::PlanMismatch {
            plan: plan.u(),
            input: rows,
        });
    }
    if plan.n > cfg.max_tokens {
        return Err(ModelError::Capacity {
            n: plan.n,
            max: cfg.max_tokens,
        });
    }
    if plan.masked.is_empty() {
        return Err(ModelError::NothingMasked);
    }
    let visible = linear(tape, tokens, &dec.embed)?;
    let mask_row = tape.reshape(dec.mask_token, &[1, cfg.decoder.dim])?;
    let pool = tape.concat_rows(&[visible, mask_row])?;

    // Visible tokens go back to their own slots; every masked slot reads the
    // shared mask-token row at index u.
    let u = plan.u();
    let mut source = vec![u; plan.n];
    for (j, &i) in plan.unmasked.iter().enumerate() {
        source[i] = j;
    }
    let seq = tape.gather_rows(pool, &source)?;
    let all: Vec<usize> = (0..plan.n).collect();
    let pos = tape.gather_rows(dec.pos_embed, &all)?;
    let mut x = tape.add(seq, pos)?;
    for b in &dec.blocks {
        x = block_forward(tape, x, b, cfg.decoder.heads, cfg.norm_eps)?;
    }
    let x = norm(tape, x, &dec.norm, cfg.norm_eps)?;
    let pixels = linear(tape, x, &dec.pixel_head)?;
    Ok(tape.gather_rows(pixels, &plan.masked)?)
}

/// Mean squared error over every masked-patch pixel: `‖Y − X‖² / (m·T²·C)`.
pub fn reconstruction_loss(tape: &mut Tape, reconstructed: Var, original: Var) -> Result<Var> {
    Ok(tape.mse(reconstructed, original)?)
}

/// Full pretraining objective for one image under one masking plan.
pub fn pretrain_loss(
    tape: &mut Tape,
    pg: &PatchGrid,
    plan: &MaskingPlan,
    model: &Model<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let dec = model.decoder.as_ref().ok_or(ModelError::MissingPart("decoder"))?;
    let z0 = embed_unmasked(tape, pg, plan, &model.encoder, cfg)?;
    let enc = encoder_forward(tape, z0, &model.encoder, cfg)?;
    let recon = decoder_forward(tape, enc.tokens, plan, dec, cfg)?;
    let target = Tensor::new(vec![plan.m(), pg.patch_len()], pg.gather(&plan.masked))?;
    let target = tape.constant(target);
    reconstruction_loss(tape, recon, target)
}

/// `[1 × K]` logits from every patch of `pg`.
pub fn classify_patches(
    tape: &mut Tape,
    pg: &PatchGrid,
    enc: &Encoder<Var>,
    head: &ClassifierHead<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let all: Vec<usize> = (0..pg.len()).collect();
    let z0 = embed_patches(tape, pg, &all, enc, cfg)?;
    let out = encoder_forward(tape, z0, enc, cfg)?;
    let logits = tape.matmul(out.pooled, head.weight)?;
    Ok(tape.add_bias(logits, head.bias)?)
}

pub fn classifier_forward(
    tape: &mut Tape,
    img: &ImageGrid,
    enc: &Encoder<Var>,
    head: &ClassifierHead<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let pg = split_into_patches(img, cfg.patch_size)?;
    classify_patches(tape, &pg, enc, head, cfg)
}
