use serde::{Deserialize, Serialize};

use super::distance::{cosine_with_norms, euclidean, l2_norm, Metric};
use super::normalize::NormalizationConstants;
use super::representation::RepresentationSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub image_id: usize,
    pub checkpoint: usize,
    pub metric: Metric,
    pub raw: f64,
    pub normalized: f64,
}

/// Clean-versus-adversarial distances for one attack. Rows are ordered by
/// image, then metric (in the order the constants were given), then checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationTable {
    pub attack: String,
    pub rows: Vec<DeviationRow>,
    pub success_filtered: bool,
    /// Cosine rows where either vector was near zero.
    pub near_zero_rows: u64,
}

impl DeviationTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Distances between matching rows of `clean` and `adv`, normalized by the
/// constants of each metric. With a mask, only images whose flag is set are
/// kept.
pub fn compute_deviations(
    clean: &RepresentationSet,
    adv: &RepresentationSet,
    consts: &[NormalizationConstants],
    success_mask: Option<&[bool]>,
    attack: &str,
) -> Result<DeviationTable> {
    if clean.image_ids != adv.image_ids {
        return Err(Error::InvalidArgument("clean and adversarial image ids are not aligned".into()));
    }
    if let Some(mask) = success_mask {
        if mask.len() != clean.len() {
            return Err(Error::InvalidArgument(format!(
                "success mask has {} entries for {} images",
                mask.len(),
                clean.len()
            )));
        }
    }
    if clean.checkpoints.len() != adv.checkpoints.len() {
        return Err(Error::InvalidArgument("clean and adversarial checkpoints differ".into()));
    }
    for (c, a) in clean.checkpoints.iter().zip(&adv.checkpoints) {
        if c.checkpoint != a.checkpoint || c.dim != a.dim {
            return Err(Error::shape(
                "compute_deviations",
                format!("checkpoint {} does not match checkpoint {}", c.checkpoint, a.checkpoint),
            ));
        }
    }
    // resolve every divisor up front so a missing one fails before any work
    let mut divisors = Vec::with_capacity(consts.len());
    for nc in consts {
        let per: Vec<f64> = clean
            .checkpoints
            .iter()
            .map(|m| {
                nc.get(m.checkpoint).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no {} normalization constant for checkpoint {}",
                        nc.metric, m.checkpoint
                    ))
                })
            })
            .collect::<Result<_>>()?;
        divisors.push((nc.metric, per));
    }

    let mut rows = Vec::new();
    let mut near_zero_rows = 0;
    for (i, &image_id) in clean.image_ids.iter().enumerate() {
        if success_mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for (metric, per) in &divisors {
            for (k, (c, a)) in clean.checkpoints.iter().zip(&adv.checkpoints).enumerate() {
                let (u, v) = (c.row(i), a.row(i));
                let raw = match metric {
                    Metric::Euclidean => euclidean(u, v),
                    Metric::Cosine => {
                        let (d, flag) = cosine_with_norms(u, v, l2_norm(u), l2_norm(v));
                        near_zero_rows += flag as u64;
                        d
                    }
                };
                rows.push(DeviationRow {
                    image_id,
                    checkpoint: c.checkpoint,
                    metric: *metric,
                    raw,
                    normalized: raw / per[k],
                });
            }
        }
    }
    Ok(DeviationTable {
        attack: attack.to_string(),
        rows,
        success_filtered: success_mask.is_some(),
        near_zero_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deviation::normalize::CheckpointConstant;

    fn consts(metric: Metric, values: &[(usize, f64)]) -> NormalizationConstants {
        NormalizationConstants {
            metric,
            constants: values
                .iter()
                .map(|&(checkpoint, value)| CheckpointConstant { checkpoint, value })
                .collect(),
            sample_size: 2,
            pair_count: 1,
            exhaustive: true,
            near_zero_pairs: 0,
        }
    }

    fn set(ids: Vec<usize>, rows: Vec<Vec<Vec<f64>>>) -> RepresentationSet {
        RepresentationSet::from_vectors(ids, &[1, 2], &rows).unwrap()
    }

    #[test]
    fn single_image_by_hand() {
        let clean = set(vec![7], vec![vec![vec![1.0, 0.0], vec![0.0, 2.0, 0.0]]]);
        let adv = set(vec![7], vec![vec![vec![0.0, 1.0], vec![0.0, 2.0, 2.0]]]);
        let c = [consts(Metric::Euclidean, &[(1, 2.0), (2, 4.0)]), consts(Metric::Cosine, &[(1, 0.5), (2, 0.25)])];
        let t = compute_deviations(&clean, &adv, &c, None, "fgsm").unwrap();
        assert_eq!(t.rows.len(), 4);
        let expected = [
            (1, Metric::Euclidean, 2f64.sqrt(), 2f64.sqrt() / 2.0),
            (2, Metric::Euclidean, 2.0, 0.5),
            (1, Metric::Cosine, 1.0, 2.0),
            (2, Metric::Cosine, 1.0 - 1.0 / 2f64.sqrt(), (1.0 - 1.0 / 2f64.sqrt()) * 4.0),
        ];
        for (row, (cp, m, raw, norm)) in t.rows.iter().zip(expected) {
            assert_eq!(row.image_id, 7);
            assert_eq!((row.checkpoint, row.metric), (cp, m));
            assert!((row.raw - raw).abs() < 1e-12, "{row:?}");
            assert!((row.normalized - norm).abs() < 1e-12, "{row:?}");
        }
        assert!(!t.success_filtered);
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let clean = set(vec![0, 1], vec![vec![vec![1.0, 3.0], vec![4.0]]; 2]);
        let c = [consts(Metric::Euclidean, &[(1, 1.0), (2, 1.0)]), consts(Metric::Cosine, &[(1, 1.0), (2, 1.0)])];
        let t = compute_deviations(&clean, &clean, &c, None, "bim").unwrap();
        assert!(t.rows.iter().all(|r| r.raw.abs() < 1e-15));
    }

    #[test]
    fn mask_filters_rows() {
        let clean = set(vec![3, 4, 5], vec![vec![vec![1.0], vec![1.0]]; 3]);
        let c = [consts(Metric::Euclidean, &[(1, 1.0), (2, 1.0)])];
        let t = compute_deviations(&clean, &clean, &c, Some(&[true, false, true]), "cw").unwrap();
        let ids: Vec<usize> = t.rows.iter().map(|r| r.image_id).collect();
        assert_eq!(ids, vec![3, 3, 5, 5]);
        assert!(t.success_filtered);
    }

    #[test]
    fn errors() {
        let a = set(vec![0], vec![vec![vec![1.0], vec![1.0]]]);
        let b = set(vec![1], vec![vec![vec![1.0], vec![1.0]]]);
        let c = [consts(Metric::Euclidean, &[(1, 1.0), (2, 1.0)])];
        assert!(compute_deviations(&a, &b, &c, None, "x").is_err());
        let missing = [consts(Metric::Euclidean, &[(1, 1.0)])];
        assert!(compute_deviations(&a, &a, &missing, None, "x").is_err());
        assert!(compute_deviations(&a, &a, &c, Some(&[true, true]), "x").is_err());
    }
}
