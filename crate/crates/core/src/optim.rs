//! Gradient-descent and Adam updates over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// `p <- p - lr * grad(p)` for every trainable entry.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    check_grads(params)?;
    for (_, p) in params.iter_mut().filter(|(_, p)| p.requires_grad) {
        let grad = p.grad.as_ref().expect("checked");
        for (v, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

fn check_grads(params: &ParamSet) -> Result<()> {
    for (name, p) in params.iter() {
        if p.requires_grad && p.grad.is_none() {
            return Err(Error::MissingGrad(name.to_string()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every trainable entry of one [`ParamSet`], in the set's order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            hyper,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    check_grads(params)?;
    let trainable = params.iter().filter(|(_, p)| p.requires_grad).count();
    if trainable != state.first_moment.len() {
        return Err(shape_err!(
            "Adam state tracks {} tensors, parameter set has {trainable}",
            state.first_moment.len()
        ));
    }
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for ((name, p), (m, v)) in params.iter_mut().filter(|(_, p)| p.requires_grad).zip(moments) {
        if m.shape() != p.value.shape() {
            return Err(shape_err!("Adam moment shape {:?} for `{name}`", m.shape()));
        }
        let grad = p.grad.as_ref().expect("checked");
        let values = p.value.data_mut();
        for (((x, g), m), v) in values
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    GradientDescent,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::GradientDescent => "gradient_descent",
        })
    }
}

/// A stateful optimizer bound to one parameter layout.
#[derive(Debug, Clone)]
pub enum Optimizer {
    GradientDescent { lr: f64 },
    Adam { lr: f64, state: AdamState },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Self {
        match kind {
            OptimizerKind::GradientDescent => Optimizer::GradientDescent { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                state: AdamState::new(params, AdamHyper::default()),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::GradientDescent { .. } => OptimizerKind::GradientDescent,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        match self {
            Optimizer::GradientDescent { lr } => sgd_step(params, *lr),
            Optimizer::Adam { lr, state } => adam_step(params, state, *lr),
        }
    }
}
