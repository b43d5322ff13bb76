use rayon::prelude::*;

use super::{AttackResult, AttackSpec, Classifier};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-record results of attacking a dataset, in input order.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub results: Vec<AttackResult>,
    pub success_mask: Vec<bool>,
    pub success_rate: f64,
}

impl AttackOutcome {
    pub fn adversarial_images(&self) -> Vec<Tensor> {
        self.results.iter().map(|r| r.adversarial.clone()).collect()
    }
}

/// Attacks every record. All records must be classified correctly before the
/// attack; the first one that is not is reported as an error.
pub fn attack_dataset<C: Classifier + ?Sized>(
    model: &C,
    images: &[Tensor],
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutcome> {
    spec.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "attack needs a non-empty dataset with one label per image ({} images, {} labels)",
            images.len(),
            labels.len()
        )));
    }
    let predictions: Vec<usize> = images.par_iter().map(|x| model.predict(x)).collect::<Result<_>>()?;
    if let Some((index, (&predicted, &label))) = predictions
        .iter()
        .zip(labels)
        .enumerate()
        .find(|(_, (p, l))| p != l)
    {
        return Err(Error::Misclassified {
            index,
            label,
            predicted,
        });
    }

    let results: Vec<AttackResult> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| spec.run(model, x, y))
        .collect::<Result<_>>()?;
    let success_mask: Vec<bool> = results.iter().map(|r| r.success).collect();
    let success_rate = success_mask.iter().filter(|&&s| s).count() as f64 / results.len() as f64;
    Ok(AttackOutcome {
        results,
        success_mask,
        success_rate,
    })
}
