//! Per-checkpoint normalization constants: the mean pairwise distance between
//! representation vectors of a reference sample.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{cosine_with_norms, euclidean, l2_norm, Metric};
use super::representation::{CheckpointMatrix, RepresentationSet};
use crate::error::{Error, Result};

/// Constants below this are rejected as degenerate.
pub const MIN_CONSTANT: f64 = 1e-12;

/// Pairs summed sequentially per chunk in sampled mode.
const CHUNK: usize = 4096;

/// Number of unordered pairs among `n` items.
pub fn pair_count(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConstant {
    pub checkpoint: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub metric: Metric,
    pub constants: Vec<CheckpointConstant>,
    pub sample_size: usize,
    /// Pairs averaged per checkpoint.
    pub pair_count: u64,
    pub exhaustive: bool,
    /// Cosine pairs involving a near-zero vector, summed over checkpoints.
    pub near_zero_pairs: u64,
}

impl NormalizationConstants {
    pub fn get(&self, checkpoint: usize) -> Option<f64> {
        self.constants
            .iter()
            .find(|c| c.checkpoint == checkpoint)
            .map(|c| c.value)
    }
}

struct PairDistance<'a> {
    matrix: &'a CheckpointMatrix,
    norms: Vec<f64>,
    metric: Metric,
}

impl<'a> PairDistance<'a> {
    fn new(matrix: &'a CheckpointMatrix, metric: Metric) -> Self {
        let norms = match metric {
            Metric::Cosine => matrix.rows_iter().map(l2_norm).collect(),
            Metric::Euclidean => Vec::new(),
        };
        PairDistance { matrix, norms, metric }
    }

    fn get(&self, i: usize, j: usize) -> (f64, bool) {
        let (u, v) = (self.matrix.row(i), self.matrix.row(j));
        match self.metric {
            Metric::Euclidean => (euclidean(u, v), false),
            Metric::Cosine => cosine_with_norms(u, v, self.norms[i], self.norms[j]),
        }
    }
}

/// Maps a lexicographic pair index to `(i, j)` with `i < j`.
fn unrank_pair(mut k: u64, n: u64) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i as usize, (i + 1 + k) as usize);
        }
        k -= row;
        i += 1;
    }
}

/// Mean pairwise distance per checkpoint.
///
/// Uses all `n (n - 1) / 2` pairs unless `max_pairs` is smaller, in which
/// case that many distinct pairs are drawn without replacement from ChaCha8
/// seeded with `seed`. Sums are reduced in a fixed order, so the result does
/// not depend on the thread count.
pub fn normalization_constants(
    reps: &RepresentationSet,
    metric: Metric,
    max_pairs: Option<u64>,
    seed: u64,
) -> Result<NormalizationConstants> {
    let n = reps.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalization needs at least 2 images, got {n}"
        )));
    }
    let total = pair_count(n as u64);
    let sampled: Option<Vec<(usize, usize)>> = match max_pairs {
        Some(m) if m < total => {
            if m == 0 {
                return Err(Error::InvalidArgument("max_pairs must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = index::sample(&mut rng, total as usize, m as usize).into_vec();
            picks.sort_unstable();
            let mut pairs = Vec::with_capacity(picks.len());
            // walk rows once instead of unranking each pick from scratch
            let (mut row, mut row_start) = (0u64, 0u64);
            for k in picks {
                let k = k as u64;
                while k >= row_start + (n as u64 - 1 - row) {
                    row_start += n as u64 - 1 - row;
                    row += 1;
                }
                pairs.push(unrank_pair(k - row_start, n as u64 - row).add_offset(row as usize));
            }
            Some(pairs)
        }
        _ => None,
    };

    let mut constants = Vec::with_capacity(reps.checkpoints.len());
    let mut near_zero_pairs = 0;
    for matrix in &reps.checkpoints {
        let pd = PairDistance::new(matrix, metric);
        let (sum, zeros) = match &sampled {
            None => {
                let rows: Vec<(f64, u64)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let mut s = 0.0;
                        let mut z = 0;
                        for j in i + 1..n {
                            let (d, flag) = pd.get(i, j);
                            s += d;
                            z += flag as u64;
                        }
                        (s, z)
                    })
                    .collect();
                rows.iter().fold((0.0, 0), |(s, z), (rs, rz)| (s + rs, z + rz))
            }
            Some(pairs) => {
                let chunks: Vec<(f64, u64)> = pairs
                    .par_chunks(CHUNK)
                    .map(|chunk| {
                        chunk.iter().fold((0.0, 0), |(s, z), &(i, j)| {
                            let (d, flag) = pd.get(i, j);
                            (s + d, z + flag as u64)
                        })
                    })
                    .collect();
                chunks.iter().fold((0.0, 0), |(s, z), (cs, cz)| (s + cs, z + cz))
            }
        };
        let count = sampled.as_ref().map_or(total, |p| p.len() as u64);
        let value = sum / count as f64;
        if !(value >= MIN_CONSTANT) {
            return Err(Error::DegenerateCheckpoint {
                checkpoint: matrix.checkpoint,
                value,
            });
        }
        near_zero_pairs += zeros;
        constants.push(CheckpointConstant {
            checkpoint: matrix.checkpoint,
            value,
        });
    }
    Ok(NormalizationConstants {
        metric,
        constants,
        sample_size: n,
        pair_count: sampled.as_ref().map_or(total, |p| p.len() as u64),
        exhaustive: sampled.is_none(),
        near_zero_pairs,
    })
}

trait AddOffset {
    fn add_offset(self, offset: usize) -> Self;
}

impl AddOffset for (usize, usize) {
    fn add_offset(self, offset: usize) -> Self {
        (self.0 + offset, self.1 + offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vectors: &[&[f64]]) -> RepresentationSet {
        let rows: Vec<Vec<Vec<f64>>> = vectors.iter().map(|v| vec![v.to_vec()]).collect();
        RepresentationSet::from_vectors((0..vectors.len()).collect(), &[1], &rows).unwrap()
    }

    #[test]
    fn pair_counts() {
        assert_eq!(pair_count(9267), 42_934_011);
        assert_eq!(pair_count(2), 1);
        assert_eq!(pair_count(1), 0);
        assert_eq!(pair_count(0), 0);
    }

    #[test]
    fn unrank_enumerates_pairs_in_order() {
        let n = 6;
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expected.push((i, j));
            }
        }
        let got: Vec<_> = (0..pair_count(n as u64)).map(|k| unrank_pair(k, n as u64)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn three_point_euclidean_constant() {
        let reps = set(&[&[0.0, 0.0], &[3.0, 4.0], &[6.0, 8.0]]);
        let c = normalization_constants(&reps, Metric::Euclidean, None, 0).unwrap();
        assert!((c.get(1).unwrap() - 20.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.pair_count, 3);
        assert!(c.exhaustive);
    }

    #[test]
    fn identical_vectors_are_degenerate() {
        let reps = set(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let err = normalization_constants(&reps, Metric::Euclidean, None, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateCheckpoint { checkpoint: 1, .. }));
    }

    #[test]
    fn too_few_images() {
        let reps = set(&[&[1.0, 2.0]]);
        assert!(normalization_constants(&reps, Metric::Cosine, None, 0).is_err());
    }

    #[test]
    fn full_budget_sample_equals_exhaustive() {
        let vectors: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64, (i * i) as f64 % 7.0, 1.0]).collect();
        let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
        let reps = set(&refs);
        let total = pair_count(9);
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let a = normalization_constants(&reps, metric, None, 0).unwrap();
            let b = normalization_constants(&reps, metric, Some(total), 99).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampled_pairs_are_distinct_and_seeded() {
        let vectors: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin(), (i as f64).cos(), i as f64]).collect();
        let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
        let reps = set(&refs);
        let a = normalization_constants(&reps, Metric::Euclidean, Some(100), 5).unwrap();
        let b = normalization_constants(&reps, Metric::Euclidean, Some(100), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pair_count, 100);
        assert!(!a.exhaustive);
        // brute force over the same sampled pairs
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut picks = index::sample(&mut rng, pair_count(30) as usize, 100).into_vec();
        picks.sort_unstable();
        let mean = picks
            .iter()
            .map(|&k| {
                let (i, j) = unrank_pair(k as u64, 30);
                euclidean(&vectors[i], &vectors[j])
            })
            .sum::<f64>()
            / 100.0;
        assert!((a.get(1).unwrap() - mean).abs() < 1e-12);
    }
}
