//! Result files: `deviations.csv`, `summary.json` and `normalization.json`.
//!
//! Numbers in the CSV use 17 significant digits in scientific notation, which
//! round-trips every `f64` exactly. JSON numbers use the shortest
//! representation that round-trips.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read, stage};
use crate::deviation::{DeviationRow, DeviationTable, DistributionSummary, Metric, NormalizationConstants};
use crate::error::{Error, Result};

pub const DEVIATIONS_FILE: &str = "deviations.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const CSV_HEADER: &str = "image_id,attack,checkpoint,metric,raw_distance,normalized_distance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearZeroCount {
    pub attack: String,
    /// Cosine rows in which a clean or adversarial vector had norm below the
    /// near-zero threshold.
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryFile {
    pub summaries: Vec<DistributionSummary>,
    pub near_zero_cosine: Vec<NearZeroCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationFile {
    pub constants: Vec<NormalizationConstants>,
}

/// One parsed CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub attack: String,
    pub row: DeviationRow,
}

fn number(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn deviations_csv(tables: &[DeviationTable]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for t in tables {
        for r in &t.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.image_id,
                t.attack,
                r.checkpoint,
                r.metric,
                number(r.raw),
                number(r.normalized)
            ));
        }
    }
    out
}

pub fn parse_deviations_csv(text: &str) -> Result<Vec<CsvRow>> {
    let bad = |line: usize, detail: &str| Error::Format {
        what: "deviations.csv",
        detail: format!("line {line}: {detail}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 2, "expected 6 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 2, "bad integer"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            Ok(CsvRow {
                attack: f[1].to_string(),
                row: DeviationRow {
                    image_id: int(f[0])?,
                    checkpoint: int(f[2])?,
                    metric: f[3].parse::<Metric>()?,
                    raw: real(f[4])?,
                    normalized: real(f[5])?,
                },
            })
        })
        .collect()
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Writes the three result files into `dir`. Every file is staged first and
/// only renamed into place once all of them were written; an empty table is
/// rejected before anything touches the disk.
pub fn write_results(
    dir: &Path,
    tables: &[DeviationTable],
    summaries: &[DistributionSummary],
    consts: &[NormalizationConstants],
) -> Result<Vec<PathBuf>> {
    if tables.is_empty() {
        return Err(Error::InvalidArgument("no deviation tables to write".into()));
    }
    if let Some(t) = tables.iter().find(|t| t.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "deviation table for `{}` is empty (no successful attacks)",
            t.attack
        )));
    }
    let summary = SummaryFile {
        summaries: summaries.to_vec(),
        near_zero_cosine: tables
            .iter()
            .map(|t| NearZeroCount {
                attack: t.attack.clone(),
                rows: t.near_zero_rows,
            })
            .collect(),
    };
    let files = [
        (DEVIATIONS_FILE, deviations_csv(tables).into_bytes()),
        (SUMMARY_FILE, json(&summary)?),
        (
            NORMALIZATION_FILE,
            json(&NormalizationFile {
                constants: consts.to_vec(),
            })?,
        ),
    ];
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        let path = dir.join(name);
        match stage(&path, bytes) {
            Ok(tmp) => staged.push((tmp, path)),
            Err(e) => {
                for (tmp, _) in &staged {
                    let _ = fs::remove_file(tmp);
                }
                return Err(e);
            }
        }
    }
    let mut written = Vec::with_capacity(staged.len());
    for (tmp, path) in staged {
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_summary(path: &Path) -> Result<SummaryFile> {
    Ok(serde_json::from_slice(&read(path)?)?)
}

pub fn load_normalization(path: &Path) -> Result<NormalizationFile> {
    Ok(serde_json::from_slice(&read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> DeviationTable {
        DeviationTable {
            attack: "bim".into(),
            rows: vec![
                DeviationRow {
                    image_id: 4,
                    checkpoint: 1,
                    metric: Metric::Euclidean,
                    raw: 0.1 + 0.2,
                    normalized: 1.0 / 3.0,
                },
                DeviationRow {
                    image_id: 4,
                    checkpoint: 2,
                    metric: Metric::Cosine,
                    raw: 1e-300,
                    normalized: 2f64.sqrt(),
                },
            ],
            success_filtered: true,
            near_zero_rows: 0,
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let t = table();
        let text = deviations_csv(std::slice::from_ref(&t));
        assert!(text.starts_with("image_id,attack,checkpoint,metric,raw_distance,normalized_distance\n"));
        let parsed = parse_deviations_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        for (p, r) in parsed.iter().zip(&t.rows) {
            assert_eq!(p.attack, "bim");
            assert_eq!(&p.row, r);
        }
    }

    #[test]
    fn empty_table_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = table();
        t.rows.clear();
        assert!(write_results(dir.path(), &[t], &[], &[]).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_results(dir.path(), &[table()], &[], &[]).unwrap();
        assert_eq!(written.len(), 3);
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.len(), 3, "{names:?}");
        assert!(load_summary(&dir.path().join(SUMMARY_FILE)).is_ok());
        assert!(load_normalization(&dir.path().join(NORMALIZATION_FILE)).is_ok());
    }
}
