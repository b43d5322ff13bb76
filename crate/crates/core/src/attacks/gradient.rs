//! Gradient-sign attacks.

use super::{check_image, quantize, AttackResult, BimConfig, Classifier, FgsmConfig};
use crate::error::Result;
use crate::network::Objective;
use crate::tensor::Tensor;

fn loss_gradient_sign<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize) -> Result<Tensor> {
    let g = model.input_gradient(x, Objective::CrossEntropy { label })?;
    Ok(g.gradient.sign())
}

/// `x' = quantize(clip(x + epsilon * sign(grad_x J(x, y)), 0, 1))`.
pub fn fgsm<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize, cfg: &FgsmConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_image(model, x, label)?;
    let step = loss_gradient_sign(model, x, label)?.scale(cfg.epsilon)?;
    let adv = quantize(&x.add(&step)?.clip(0.0, 1.0)?)?;
    AttackResult::evaluate(model, x, adv, label, 1)
}

/// Iterated FGSM with step `alpha`, projecting onto the `epsilon` ball
/// around `x` and onto `[0, 1]` after every step, then quantizing.
pub fn bim<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize, cfg: &BimConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_image(model, x, label)?;
    let mut current = x.clone();
    for _ in 0..cfg.iterations {
        let step = loss_gradient_sign(model, &current, label)?.scale(cfg.alpha)?;
        let moved = current.add(&step)?;
        let projected: Vec<f64> = moved
            .data()
            .iter()
            .zip(x.data())
            .map(|(&v, &orig)| v.clamp(orig - cfg.epsilon, orig + cfg.epsilon).clamp(0.0, 1.0))
            .collect();
        current = Tensor::new(x.shape().to_vec(), projected)?;
    }
    let adv = quantize(&current)?;
    AttackResult::evaluate(model, x, adv, label, cfg.iterations)
}
