//! Mini-batch Adam training with flip/crop augmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::model::Model;
use crate::tensor::Tensor;

/// Padding applied on every edge before the random crop.
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossKind::CrossEntropy,
            augment: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("train config: {msg}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Mirrors a `C x H x W` image left to right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let w = image.shape()[2];
    let data = image
        .data()
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Zero-pads by `pad` on every edge and crops the original-sized window whose
/// top-left corner sits at `(dy, dx)` in the padded image.
pub fn pad_crop(image: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    assert!(dy <= 2 * pad && dx <= 2 * pad, "crop offset outside the padded image");
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = image.data()[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

/// Random horizontal flip (probability 0.5) followed by a random crop of the
/// image zero-padded by [`CROP_PAD`]. Draws: one bool, then row and column
/// offsets.
pub fn augment<R: Rng>(image: &Tensor, rng: &mut R) -> Tensor {
    let flipped = if rng.gen_bool(0.5) {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    let dy = rng.gen_range(0..=2 * CROP_PAD);
    let dx = rng.gen_range(0..=2 * CROP_PAD);
    pad_crop(&flipped, CROP_PAD, dy, dx)
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
        }
    }

    /// One bias-corrected update of `params` (flattened per tensor) along `grads`.
    pub fn update<'p>(&mut self, params: impl IntoIterator<Item = &'p mut [f64]>, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-example loss over each epoch, measured before each update.
    pub epoch_loss: Vec<f64>,
}

fn check_dataset(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            model.classes()
        )));
    }
    Ok(())
}

/// Trains `model` in place.
///
/// Randomness comes from ChaCha8 seeded with `config.seed` on stream 1 (the
/// model initializer uses stream 0 of its own seed). Each epoch draws the
/// shuffle permutation first, then the augmentation draws of each example in
/// batch order. Per-example gradients are summed in ascending batch position,
/// so results do not depend on the thread count.
pub fn train(model: &mut Model, images: &[Tensor], labels: &[usize], config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    check_dataset(model, images, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.eps,
        model.params().iter().map(Tensor::len),
    );
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = TrainHistory { epoch_loss: Vec::new() };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<Tensor> = batch
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(&images[i], &mut rng)
                    } else {
                        images[i].clone()
                    }
                })
                .collect();
            let frozen: &Model = model;
            let results: Vec<(f64, Vec<Tensor>)> = inputs
                .par_iter()
                .zip(batch.par_iter())
                .map(|(x, &i)| frozen.loss_and_param_grads(x, labels[i]))
                .collect::<Result<_>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut sum: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            sum.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.update(model.params_mut().iter_mut().map(tensor_data_mut), &sum);
        }
        let mean = epoch_loss / images.len() as f64;
        if !mean.is_finite() || model.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        history.epoch_loss.push(mean);
        model.epochs_trained += 1;
    }
    Ok(history)
}

fn tensor_data_mut(t: &mut Tensor) -> &mut [f64] {
    t.data_mut()
}

/// Fraction of records whose prediction equals the label.
pub fn evaluate_accuracy(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    check_dataset(model, images, labels)?;
    let correct: Vec<bool> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| model.predict(x).map(|p| p == y))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::arch::ArchitectureSpec;

    fn sample_image() -> Tensor {
        Tensor::new(vec![3, 32, 32], (0..3072).map(|v| (v % 255) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = sample_image();
        assert_ne!(flip_horizontal(&x), x);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)), x);
    }

    #[test]
    fn centered_crop_is_identity() {
        let x = sample_image();
        assert_eq!(pad_crop(&x, 4, 4, 4), x);
        let shifted = pad_crop(&x, 4, 0, 0);
        // top-left 4 rows and columns come from the zero padding
        assert_eq!(shifted.data()[0], 0.0);
        assert_eq!(shifted.data()[4 * 32 + 4], x.data()[0]);
    }

    #[test]
    fn augment_preserves_shape_and_is_seeded() {
        let x = sample_image();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let ya = augment(&x, &mut a);
            assert_eq!(ya.shape(), &[3, 32, 32]);
            assert_eq!(ya, augment(&x, &mut b));
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, [2]);
        let mut p = vec![1.0, -1.0];
        adam.update([p.as_mut_slice()], &[vec![0.5, -2.0]]);
        // bias correction makes the first step lr * sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_or_mislabeled_dataset_is_rejected() {
        let mut m = Model::build(ArchitectureSpec::linear([3, 32, 32], 2), 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(train(&mut m, &[], &[], &cfg).is_err());
        assert!(train(&mut m, &[sample_image()], &[2], &cfg).is_err());
        assert!(evaluate_accuracy(&m, &[], &[]).is_err());
    }
}
