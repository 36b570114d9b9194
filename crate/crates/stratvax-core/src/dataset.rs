//! Trial data ingestion, validation, and empirical cell statistics.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::report::{codes, Warning};
use crate::{Error, Result};

/// One participant: covariates, vaccine arm, infection status, and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Covariate vector (mixed binary/real; all entries finite).
    pub x: Vec<f64>,
    /// Vaccine arm: 1 = vaccinated, 0 = placebo/control.
    pub z: u8,
    /// Infection indicator.
    pub s: u8,
    /// Post-infection outcome (binary outcomes encoded 0/1).
    pub y: f64,
}

/// A validated, immutable rectangular dataset — the unit of all estimation.
///
/// Construction enforces the structural requirements every estimator relies
/// on: `Z, S ∈ {0,1}`, finite `Y` and covariates, consistent covariate
/// dimension, and positivity (at least one infected participant per arm).
#[derive(Debug, Clone)]
pub struct TrialData {
    observations: Vec<Observation>,
    covariate_names: Vec<String>,
    /// True when every observed outcome is exactly 0 or 1.
    binary_outcome: bool,
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub z: String,
    pub s: String,
    pub y: String,
    pub x: Vec<String>,
}

/// Empirical counts and means for the four `(z,s)` cells and both arms.
///
/// Cells with zero members keep `None` means rather than NaN; consumers decide
/// whether an empty cell is fatal for their statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStats {
    /// Count per cell, indexed `[z][s]`.
    pub count: [[usize; 2]; 2],
    /// Mean outcome per cell `μ̄_zs,n`, indexed `[z][s]`; `None` when empty.
    pub mean: [[Option<f64>; 2]; 2],
    /// Arm sizes, indexed by `z`.
    pub arm_n: [usize; 2],
    /// Infected fraction per arm `ρ̄_z,n`, indexed by `z`.
    pub infected_frac: [f64; 2],
    /// Mean outcome per arm `μ̄_z·,n`, indexed by `z`; `None` when the arm is empty.
    pub arm_mean: [Option<f64>; 2],
    /// Overall infected fraction `ρ̄_·,n`.
    pub infected_frac_all: f64,
    /// Non-fatal observations (e.g. empty cells).
    pub warnings: Vec<Warning>,
}

impl TrialData {
    /// Validates and wraps a set of observations.
    pub fn new(observations: Vec<Observation>, covariate_names: Vec<String>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyData);
        }
        let dim = covariate_names.len();
        for (i, o) in observations.iter().enumerate() {
            if o.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: o.x.len(),
                });
            }
            if o.z > 1 {
                return Err(Error::BadCell {
                    row: i,
                    column: "z".into(),
                    message: format!("expected 0 or 1, got {}", o.z),
                });
            }
            if o.s > 1 {
                return Err(Error::BadCell {
                    row: i,
                    column: "s".into(),
                    message: format!("expected 0 or 1, got {}", o.s),
                });
            }
            if !o.y.is_finite() {
                return Err(Error::BadCell {
                    row: i,
                    column: "y".into(),
                    message: "outcome is not finite".into(),
                });
            }
            if let Some(j) = o.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::BadCell {
                    row: i,
                    column: covariate_names[j].clone(),
                    message: "covariate is not finite".into(),
                });
            }
        }
        for arm in [0u8, 1u8] {
            if !observations.iter().any(|o| o.z == arm && o.s == 1) {
                return Err(Error::Positivity { arm });
            }
        }
        let binary_outcome = observations.iter().all(|o| o.y == 0.0 || o.y == 1.0);
        Ok(TrialData {
            observations,
            covariate_names,
            binary_outcome,
        })
    }

    /// Loads a comma-delimited file with a header row, mapping columns through
    /// `schema`. Row order is preserved.
    pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Csv {
                location: format!("{}: header", path.display()),
                message: e.to_string(),
            })?
            .clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn { name: name.into() })
        };
        let z_col = col(&schema.z)?;
        let s_col = col(&schema.s)?;
        let y_col = col(&schema.y)?;
        let x_cols: Vec<usize> = schema
            .x
            .iter()
            .map(|name| col(name))
            .collect::<Result<_>>()?;

        let parse_num = |record: &csv::StringRecord, row: usize, idx: usize| -> Result<f64> {
            record[idx].trim().parse::<f64>().map_err(|_| Error::BadCell {
                row,
                column: headers[idx].to_string(),
                message: format!("not numeric: {:?}", &record[idx]),
            })
        };
        let parse_bit = |record: &csv::StringRecord, row: usize, idx: usize| -> Result<u8> {
            match record[idx].trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::BadCell {
                    row,
                    column: headers[idx].to_string(),
                    message: format!("expected 0 or 1, got {other:?}"),
                }),
            }
        };

        let mut observations = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Csv {
                location: format!("{}: row {}", path.display(), i + 1),
                message: e.to_string(),
            })?;
            let z = parse_bit(&record, i + 1, z_col)?;
            let s = parse_bit(&record, i + 1, s_col)?;
            let y = parse_num(&record, i + 1, y_col)?;
            let x = x_cols
                .iter()
                .map(|&c| parse_num(&record, i + 1, c))
                .collect::<Result<Vec<f64>>>()?;
            observations.push(Observation { x, z, s, y });
        }
        TrialData::new(observations, schema.x.clone())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_names.len()
    }

    /// Whether every outcome is exactly 0 or 1 (recorded for reporting only).
    pub fn binary_outcome(&self) -> bool {
        self.binary_outcome
    }

    /// Empirical means and fractions for the `(z,s)` cells and arms.
    pub fn cell_stats(&self) -> CellStats {
        let mut count = [[0usize; 2]; 2];
        let mut sum = [[0.0f64; 2]; 2];
        for o in &self.observations {
            let (z, s) = (o.z as usize, o.s as usize);
            count[z][s] += 1;
            sum[z][s] += o.y;
        }
        let mut warnings = Vec::new();
        let mut mean = [[None; 2]; 2];
        for z in 0..2 {
            for s in 0..2 {
                if count[z][s] > 0 {
                    mean[z][s] = Some(sum[z][s] / count[z][s] as f64);
                } else {
                    warnings.push(Warning::new(
                        codes::EMPTY_CELL,
                        format!("cell (Z={z}, S={s}) has no observations"),
                    ));
                }
            }
        }
        let arm_n = [count[0][0] + count[0][1], count[1][0] + count[1][1]];
        let infected_frac = [
            count[0][1] as f64 / arm_n[0].max(1) as f64,
            count[1][1] as f64 / arm_n[1].max(1) as f64,
        ];
        let arm_mean = [
            (arm_n[0] > 0).then(|| (sum[0][0] + sum[0][1]) / arm_n[0] as f64),
            (arm_n[1] > 0).then(|| (sum[1][0] + sum[1][1]) / arm_n[1] as f64),
        ];
        let infected_frac_all =
            (count[0][1] + count[1][1]) as f64 / self.observations.len() as f64;
        CellStats {
            count,
            mean,
            arm_n,
            infected_frac,
            arm_mean,
            infected_frac_all,
            warnings,
        }
    }

    /// Groups row indices by identical covariate pattern. Used by saturated
    /// fits and covariate-adjusted bounds; keys are the byte patterns of the
    /// covariate vector, so only exactly-equal vectors share a cell.
    pub fn covariate_cells(&self, columns: &[usize]) -> HashMap<Vec<u64>, Vec<usize>> {
        let mut cells: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
        for (i, o) in self.observations.iter().enumerate() {
            let key: Vec<u64> = columns.iter().map(|&c| o.x[c].to_bits()).collect();
            cells.entry(key).or_default().push(i);
        }
        cells
    }
}
