use serde::{Deserialize, Serialize};

use super::distance::Metric;
use super::kde::{kde, Kde};
use super::table::DeviationTable;
use crate::error::{Error, Result};

/// Statistics of the normalized deviations for one (attack, metric, checkpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub attack: String,
    pub metric: Metric,
    pub checkpoint: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Set when every value is identical (or there is a single value); no KDE
    /// is computed in that case.
    pub point_mass: bool,
    pub kde: Option<Kde>,
}

/// One summary per (metric, checkpoint) group, in first-appearance order of
/// the table rows.
pub fn summarize(table: &DeviationTable, grid_points: usize) -> Result<Vec<DistributionSummary>> {
    if table.rows.is_empty() {
        return Err(Error::InvalidArgument(format!("deviation table for `{}` is empty", table.attack)));
    }
    let mut keys: Vec<(Metric, usize)> = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for row in &table.rows {
        let key = (row.metric, row.checkpoint);
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(row.normalized),
            None => {
                keys.push(key);
                groups.push(vec![row.normalized]);
            }
        }
    }
    keys.into_iter()
        .zip(groups)
        .map(|((metric, checkpoint), values)| {
            let count = values.len();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let point_mass = count < 2 || min == max;
            // summing identical values can drift by an ulp; report them exactly
            let mean = if point_mass { min } else { values.iter().sum::<f64>() / count as f64 };
            let kde = if point_mass { None } else { Some(kde(&values, grid_points)?) };
            Ok(DistributionSummary {
                attack: table.attack.clone(),
                metric,
                checkpoint,
                count,
                mean,
                min,
                max,
                point_mass,
                kde,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deviation::table::DeviationRow;

    fn table(values: &[(usize, f64)]) -> DeviationTable {
        DeviationTable {
            attack: "fgsm".into(),
            rows: values
                .iter()
                .enumerate()
                .map(|(i, &(checkpoint, v))| DeviationRow {
                    image_id: i,
                    checkpoint,
                    metric: Metric::Euclidean,
                    raw: v,
                    normalized: v,
                })
                .collect(),
            success_filtered: true,
            near_zero_rows: 0,
        }
    }

    #[test]
    fn mean_and_point_mass() {
        let s = summarize(&table(&[(1, 1.0), (2, 0.7), (1, 2.0), (2, 0.7), (1, 3.0), (2, 0.7)]), 100).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].checkpoint, s[0].count, s[0].mean, s[0].min, s[0].max), (1, 3, 2.0, 1.0, 3.0));
        assert!(!s[0].point_mass && s[0].kde.is_some());
        assert_eq!((s[1].mean, s[1].count), (0.7, 3));
        assert!(s[1].point_mass && s[1].kde.is_none());
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(summarize(&table(&[]), 100).is_err());
    }
}
