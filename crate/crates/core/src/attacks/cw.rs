//! Carlini-Wagner L2 attack with the untargeted margin objective.
//!
//! The image is reparameterized as `x' = (tanh(w) + 1) / 2`, which keeps it
//! inside `[0, 1]` without projection. For a trade-off constant `c`, Adam
//! minimizes `||x' - x||^2 + c * max(Z_y - max_{i != y} Z_i, -kappa)`. A
//! binary search over `c` runs for the configured number of steps: success
//! lowers the upper bound, failure raises the lower bound, and `c` grows
//! tenfold while no upper bound is known.

use super::{check_image, AttackResult, Classifier, CwConfig};
use crate::error::{Error, Result};
use crate::network::Objective;
use crate::ops;
use crate::tensor::Tensor;

/// Inputs are clamped into `[CW_BOX_NUDGE, 1 - CW_BOX_NUDGE]` before `atanh`.
pub const CW_BOX_NUDGE: f64 = 1e-6;

/// Upper bound value meaning "no successful `c` seen yet".
const UNBOUNDED: f64 = 1e10;

/// Untargeted margin `max(Z_y - max_{i != y} Z_i, -kappa)`. Non-positive
/// values mean the adversarial condition holds with confidence `kappa`.
pub fn f6_margin(logits: &Tensor, label: usize, kappa: f64) -> Result<f64> {
    ops::margin(logits, label, kappa).map(|(value, _)| value)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

pub fn cw_l2<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize, cfg: &CwConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_image(model, x, label)?;
    let shape = x.shape().to_vec();
    let original = x.data();
    let w0: Vec<f64> = original
        .iter()
        .map(|&v| (2.0 * v.clamp(CW_BOX_NUDGE, 1.0 - CW_BOX_NUDGE) - 1.0).atanh())
        .collect();

    let mut best: Option<(f64, Tensor)> = None;
    let mut last = x.clone();
    let mut iterations = 0;
    let mut c = cfg.initial_c;
    let (mut lower, mut upper) = (0.0f64, UNBOUNDED);
    let check_every = (cfg.max_iterations / 10).max(1);

    for _ in 0..cfg.binary_search_steps {
        let mut w = w0.clone();
        let mut adam = AdamState::new(w.len());
        let mut step_success = false;
        let mut previous = f64::INFINITY;

        for it in 0..cfg.max_iterations {
            let tanh_w: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
            let candidate = Tensor::new(shape.clone(), tanh_w.iter().map(|t| (t + 1.0) / 2.0).collect())?;
            let objective = model.input_gradient(
                &candidate,
                Objective::Margin {
                    label,
                    kappa: cfg.confidence,
                },
            )?;
            iterations += 1;
            let diff: Vec<f64> = candidate.data().iter().zip(original).map(|(a, b)| a - b).collect();
            let dist_sq: f64 = diff.iter().map(|d| d * d).sum();
            let loss = dist_sq + c * objective.value;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "cw_l2" });
            }

            if objective.logits.argmax() != label {
                step_success = true;
                if best.as_ref().map_or(true, |(d, _)| dist_sq < *d) {
                    best = Some((dist_sq, candidate.clone()));
                }
            }
            if cfg.abort_early && it % check_every == 0 {
                if loss > previous * 0.9999 {
                    last = candidate;
                    break;
                }
                previous = loss;
            }

            let grad_w: Vec<f64> = diff
                .iter()
                .zip(objective.gradient.data())
                .zip(&tanh_w)
                .map(|((d, g), t)| (2.0 * d + c * g) * (1.0 - t * t) / 2.0)
                .collect();
            adam.apply(&mut w, &grad_w, cfg.learning_rate);
            last = candidate;
        }

        if step_success {
            upper = upper.min(c);
        } else {
            lower = lower.max(c);
        }
        c = if upper < UNBOUNDED {
            (lower + upper) / 2.0
        } else {
            c * 10.0
        };
    }

    let adversarial = best.map_or(last, |(_, t)| t);
    AttackResult::evaluate(model, x, adversarial, label, iterations)
}
