use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of grid points.
pub const DEFAULT_GRID_POINTS: usize = 100;

/// Scott's rule factor `n^(-1/5)`; the bandwidth is this times the sample
/// standard deviation.
pub fn scott_factor(n: usize) -> f64 {
    (n as f64).powf(-0.2)
}

/// A Gaussian kernel density estimate evaluated on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Sample standard deviation with `n - 1` in the denominator.
pub fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Density of the Gaussian KDE with bandwidth `h` at `x`.
pub fn density_at(samples: &[f64], h: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    norm * samples
        .iter()
        .map(|s| {
            let z = (x - s) / h;
            (-0.5 * z * z).exp()
        })
        .sum::<f64>()
}

/// Evaluates the KDE of `samples` on `grid_points` equally spaced values
/// from the sample minimum to the sample maximum.
pub fn kde(samples: &[f64], grid_points: usize) -> Result<Kde> {
    if samples.len() < 2 {
        return Err(Error::DegenerateSample(format!("KDE needs at least 2 samples, got {}", samples.len())));
    }
    if grid_points < 2 {
        return Err(Error::InvalidArgument("KDE grid needs at least 2 points".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "kde" });
    }
    let std = sample_std(samples);
    if !(std > 0.0) {
        return Err(Error::DegenerateSample("samples have zero spread".into()));
    }
    let bandwidth = std * scott_factor(samples.len());
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = linspace(lo, hi, grid_points);
    let density = grid.iter().map(|&g| density_at(samples, bandwidth, g)).collect();
    Ok(Kde {
        bandwidth,
        grid,
        density,
    })
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + step * i as f64 })
        .collect()
}
