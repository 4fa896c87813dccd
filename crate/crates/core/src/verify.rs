//! Composed-model gradient verification against central differences.

use crate::model::{
    self, bind, classify_patches, pretrain_loss, tree::Tree, Model, ModelConfig, ModelError, Params,
};
use crate::numerics::{
    compare_gradients, finite_diff_gradient, GradCheckReport, Tape, Tensor, Var, DEFAULT_STEP,
};
use crate::patching::{build_masking_plan, compute_valid_set, split_into_patches, ImageGrid, MaskImage, MaskingStrategy};
use crate::rng;

/// Analytic gradient of `loss` w.r.t. every scalar of `params`, flattened
/// in visiting order.
pub fn analytic_gradient<F>(params: &Params, loss: F) -> Result<Vec<f64>, ModelError>
where
    F: Fn(&mut Tape, &Model<Var>) -> Result<Var, ModelError>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, |_| true);
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l)?;
    let mut out = Vec::with_capacity(model::count_scalars(params));
    vars.visit("", &mut |_, v| {
        out.extend_from_slice(grads.get(*v).expect("every leaf requires grad").data())
    });
    Ok(out)
}

/// Central-difference gradient of `loss`, evaluating only forward values.
pub fn numeric_gradient<F>(params: &Params, loss: F, h: f64) -> Vec<f64>
where
    F: Fn(&mut Tape, &Model<Var>) -> Result<Var, ModelError>,
{
    let mut scratch = params.clone();
    finite_diff_gradient(
        |theta| {
            model::unflatten(&mut scratch, theta);
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &scratch, |_| false);
            let l = loss(&mut tape, &vars).expect("loss evaluated once already");
            tape.value(l).item()
        },
        &model::flatten(params),
        h,
    )
}

pub fn check_gradients<F>(params: &Params, loss: F) -> Result<GradCheckReport, ModelError>
where
    F: Fn(&mut Tape, &Model<Var>) -> Result<Var, ModelError>,
{
    let analytic = analytic_gradient(params, &loss)?;
    let numeric = numeric_gradient(params, &loss, DEFAULT_STEP);
    Ok(compare_gradients(&analytic, &numeric))
}

/// Name of the parameter holding flattened scalar `index`.
pub fn scalar_name(params: &Params, index: usize) -> String {
    let mut offset = 0;
    let mut found = String::new();
    params.visit("", &mut |name, t: &Tensor| {
        if found.is_empty() && index < offset + t.len() {
            found = format!("{name}[{}]", index - offset);
        }
        offset += t.len();
    });
    found
}

/// A random image in `[0, 1]` with a random organ mask covering at least
/// one patch.
pub fn random_sample(size: usize, seed: u64) -> (ImageGrid, MaskImage) {
    use rand::Rng as _;
    let mut r = rng::rng(seed);
    let pixels = (0..size * size).map(|_| r.random::<f64>()).collect();
    let img = ImageGrid::new(size, size, 1, pixels).expect("pixels in [0, 1)");
    let mut bits: Vec<bool> = (0..size * size).map(|_| r.random_bool(0.3)).collect();
    bits[0] = true;
    let mask = MaskImage::new(size, size, bits).expect("square mask");
    (img, mask)
}

#[derive(Clone, Debug)]
pub struct CompositeReport {
    pub pretrain: GradCheckReport,
    pub pretrain_worst: String,
    pub finetune: GradCheckReport,
    pub finetune_worst: String,
}

impl CompositeReport {
    pub fn max_relative_error(&self) -> f64 {
        self.pretrain.max_relative_error.max(self.finetune.max_relative_error)
    }
}

/// Gradient check of the reconstruction loss (region-guided plan at
/// `sigma`) and of the fine-tuning cross-entropy, over every parameter
/// scalar of a freshly initialized model.
pub fn composite_check(cfg: &ModelConfig, image_size: usize, sigma: f64, seed: u64) -> Result<CompositeReport, ModelError> {
    cfg.validate()?;
    let params = model::init_parameters(cfg, seed);
    let (img, mask) = random_sample(image_size, rng::derive_seed(seed, &[99]));
    let pg = split_into_patches(&img, cfg.patch_size)?;
    let valid = compute_valid_set(&mask, cfg.patch_size, 0.0)?;
    let plan = build_masking_plan(pg.len(), &valid, sigma, MaskingStrategy::RegionGuided, seed)?;

    let mut pre_params = params.clone();
    pre_params.head = None;
    let pretrain = check_gradients(&pre_params, |tape, m| pretrain_loss(tape, &pg, &plan, m, cfg))?;

    let mut ft_params = params;
    ft_params.decoder = None;
    let label = (seed % cfg.classes as u64) as usize;
    let finetune = check_gradients(&ft_params, |tape, m| {
        let head = m.head.as_ref().ok_or(ModelError::MissingPart("head"))?;
        let logits = classify_patches(tape, &pg, &m.encoder, head, cfg)?;
        Ok(tape.cross_entropy(logits, &[label])?)
    })?;
    Ok(CompositeReport {
        pretrain_worst: scalar_name(&pre_params, pretrain.worst_index),
        pretrain,
        finetune_worst: scalar_name(&ft_params, finetune.worst_index),
        finetune,
    })
}
