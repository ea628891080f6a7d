//! Adam, early stopping and class weighting.

use serde::{Deserialize, Serialize};

use crate::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let update = lr * m_hat / (v_hat.sqrt() + cfg.eps);
        params[i] = T::cast(params[i].as_f64() - update);
    }
    Ok(())
}

/// Adam over a fixed list of parameter tensors.
#[derive(Debug)]
pub struct Adam<T: Element> {
    params: Vec<Tensor<T>>,
    states: Vec<AdamState>,
    pub lr: f64,
    pub config: AdamConfig,
}

impl<T: Element> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, lr: f64) -> Self {
        let states = params.iter().map(|p| AdamState::new(p.numel())).collect();
        Self {
            params,
            states,
            lr,
            config: AdamConfig::default(),
        }
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// Applies the accumulated gradients; parameters without one are skipped.
    pub fn step(&mut self) -> Result<()> {
        for (p, state) in self.params.iter().zip(self.states.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            let mut res = Ok(());
            p.update_data(|d| res = adam_step(d, &g, state, self.lr, &self.config));
            res?;
        }
        Ok(())
    }
}

/// Direction in which a monitored metric improves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    Maximize,
    Minimize,
}

/// True when the last `patience` epochs brought no improvement larger than
/// `min_delta` over the best value seen before them.
///
/// An improvement of exactly `min_delta` does not count.
pub fn should_stop(history: &[f64], patience: usize, min_delta: f64, goal: Goal) -> bool {
    let Some(&first) = history.first() else {
        return false;
    };
    let mut best = first;
    let mut stale = 0usize;
    for &v in &history[1..] {
        let improved = match goal {
            Goal::Maximize => v - best > min_delta,
            Goal::Minimize => best - v > min_delta,
        };
        if improved {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}

/// How per-class counts become loss weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `min(counts) / countᵢ`: the rarest class gets weight 1.
    #[default]
    Inverse,
    /// `countᵢ / max(counts)`: the majority class gets weight 1.
    Literal,
}

pub fn class_weights(counts: &[usize], mode: WeightMode) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(TensorError::InvalidArgument(format!(
            "class_weights needs positive counts, got {counts:?}"
        )));
    }
    let min = *counts.iter().min().expect("nonempty") as f64;
    let max = *counts.iter().max().expect("nonempty") as f64;
    Ok(counts
        .iter()
        .map(|&c| match mode {
            WeightMode::Inverse => min / c as f64,
            WeightMode::Literal => c as f64 / max,
        })
        .collect())
}
