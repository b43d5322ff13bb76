//! Untargeted adversarial attacks: FGSM, BIM and Carlini-Wagner L2.
//!
//! All attacks work on `[0, 1]`-scaled images. FGSM and BIM outputs are
//! quantized to the 8-bit grid; CW outputs are left at full precision.

mod batch;
mod cw;
mod gradient;

pub use batch::{attack_dataset, AttackOutcome};
pub use cw::{cw_l2, f6_margin, CW_BOX_NUDGE};
pub use gradient::{bim, fgsm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{InputGradient, Model, Objective};
use crate::tensor::Tensor;

/// Anything an attack can query for logits and input gradients.
pub trait Classifier: Sync {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    fn input_gradient(&self, x: &Tensor, objective: Objective) -> Result<InputGradient>;

    /// Argmax of the logits, lowest index on ties.
    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }
}

impl Classifier for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Model::logits(self, x)
    }

    fn input_gradient(&self, x: &Tensor, objective: Objective) -> Result<InputGradient> {
        Model::input_gradient(self, x, objective)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgsmConfig {
    /// L-infinity budget in `[0, 1]` pixel units.
    pub epsilon: f64,
}

impl FgsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!("fgsm epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BimConfig {
    /// Per-step L-infinity bound.
    pub alpha: f64,
    /// Total L-infinity bound.
    pub epsilon: f64,
    pub iterations: usize,
}

impl BimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidArgument("bim alpha and epsilon must be positive, epsilon at most 1".into()));
        }
        if self.alpha > self.epsilon {
            return Err(Error::InvalidArgument(format!(
                "bim alpha {} exceeds epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("bim needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwConfig {
    pub binary_search_steps: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub initial_c: f64,
    /// Confidence `kappa` of the margin objective.
    pub confidence: f64,
    /// Stop a search step once the objective stops improving, checked every
    /// tenth of `max_iterations`.
    pub abort_early: bool,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            binary_search_steps: 5,
            learning_rate: 0.005,
            max_iterations: 1000,
            initial_c: 1.0,
            confidence: 0.0,
            abort_early: true,
        }
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.binary_search_steps == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument("cw needs at least one search step and one iteration".into()));
        }
        if !(self.learning_rate > 0.0 && self.initial_c > 0.0 && self.confidence >= 0.0) {
            return Err(Error::InvalidArgument(
                "cw learning_rate and initial_c must be positive, confidence non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One configured attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Fgsm(FgsmConfig),
    Bim(BimConfig),
    Cw(CwConfig),
}

impl AttackSpec {
    pub fn id(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm(_) => "fgsm",
            AttackSpec::Bim(_) => "bim",
            AttackSpec::Cw(_) => "cw",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Fgsm(c) => c.validate(),
            AttackSpec::Bim(c) => c.validate(),
            AttackSpec::Cw(c) => c.validate(),
        }
    }

    /// Runs this attack on a single image.
    pub fn run<C: Classifier + ?Sized>(&self, model: &C, x: &Tensor, label: usize) -> Result<AttackResult> {
        match self {
            AttackSpec::Fgsm(c) => fgsm(model, x, label, c),
            AttackSpec::Bim(c) => bim(model, x, label, c),
            AttackSpec::Cw(c) => cw_l2(model, x, label, c),
        }
    }
}

/// Outcome of attacking one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    /// `predict(adversarial) != label`.
    pub success: bool,
    pub iterations: usize,
    pub l2: f64,
    pub linf: f64,
}

impl AttackResult {
    pub(crate) fn evaluate<C: Classifier + ?Sized>(
        model: &C,
        original: &Tensor,
        adversarial: Tensor,
        label: usize,
        iterations: usize,
    ) -> Result<Self> {
        let delta = adversarial.sub(original)?;
        let success = model.predict(&adversarial)? != label;
        Ok(AttackResult {
            success,
            iterations,
            l2: delta.l2_norm(),
            linf: delta.linf_norm(),
            adversarial,
        })
    }
}

/// Rounds every value to the nearest multiple of 1/255 (ties away from zero).
pub fn quantize(x: &Tensor) -> Result<Tensor> {
    if !x.within(0.0, 1.0) {
        return Err(Error::InvalidArgument("quantize expects values in [0, 1]".into()));
    }
    let data = x.data().iter().map(|v| quantize_value(*v)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn quantize_value(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// True when `v` is exactly a value produced by [`quantize`].
pub fn on_grid(v: f64) -> bool {
    quantize_value(v) == v
}

fn check_image<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize) -> Result<()> {
    if !x.within(0.0, 1.0) {
        return Err(Error::InvalidArgument("attack input must lie in [0, 1]".into()));
    }
    let classes = model.logits(x)?.len();
    if label >= classes {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {classes} classes")));
    }
    Ok(())
}
