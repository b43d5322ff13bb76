use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector counts as zero for the cosine metric.
pub const NEAR_ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `||u - v||`
    Euclidean,
    /// `1 - u.v / (||u|| ||v||)`
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

pub fn l2_norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Cosine distance from precomputed norms. The flag is set when either vector
/// is near zero: two near-zero vectors are at distance 0, one near-zero vector
/// is at distance 1 from anything else.
pub(crate) fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> (f64, bool) {
    match (nu < NEAR_ZERO_NORM, nv < NEAR_ZERO_NORM) {
        (true, true) => (0.0, true),
        (true, false) | (false, true) => (1.0, true),
        (false, false) => {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            ((1.0 - dot / (nu * nv)).clamp(0.0, 2.0), false)
        }
    }
}

/// Distance between two equal-length vectors.
pub fn distance(u: &[f64], v: &[f64], metric: Metric) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("distance", format!("lengths {} and {} differ", u.len(), v.len())));
    }
    Ok(match metric {
        Metric::Euclidean => euclidean(u, v),
        Metric::Cosine => cosine_with_norms(u, v, l2_norm(u), l2_norm(v)).0,
    })
}
