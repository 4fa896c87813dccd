//! AdamW with decoupled weight decay.

use super::TrainError;
use crate::model::tree::Tree;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates for every parameter tensor, in tree visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub lr: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamWState {
    pub fn new<P: Tree<Tensor>>(params: &P, config: AdamWConfig, lr: f64) -> Self {
        let mut first = Vec::new();
        params.visit("", &mut |_, t| first.push(Tensor::zeros(t.shape())));
        Self {
            config,
            lr,
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

/// One AdamW update of every parameter accepted by `trainable`:
///
/// `θ ← θ − lr · (m̂ / (√v̂ + eps) + weight_decay · θ)`
///
/// Gradients are checked for finiteness before anything is modified.
pub fn adamw_step<P: Tree<Tensor>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamWState,
    trainable: impl Fn(&str) -> bool,
) -> Result<(), TrainError> {
    let grad_list = grads.named_leaves();
    if grad_list.len() != state.first.len() {
        return Err(TrainError::Config(format!(
            "optimizer tracks {} tensors but {} gradients were given",
            state.first.len(),
            grad_list.len()
        )));
    }
    if let Some((name, _)) = grad_list.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(name.clone()));
    }

    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);
    let lr = state.lr;

    let mut i = 0;
    let mut mismatch = None;
    params.visit_mut("", &mut |name, p| {
        let g = grad_list[i].1;
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        i += 1;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            mismatch.get_or_insert_with(|| name.to_string());
            return;
        }
        if !trainable(name) {
            return;
        }
        for (((theta, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / correct1;
            let v_hat = *vv / correct2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *theta);
        }
    });
    match mismatch {
        Some(name) => Err(TrainError::Config(format!("shape mismatch for parameter {name}"))),
        None => Ok(()),
    }
}
