//! Common-support enforcement by trimming on estimated propensity scores.
//!
//! For every treatment-probability column, the within-group minimum and
//! maximum (or nearest-rank quantiles) are computed per treatment group.
//! The binding lower bound is the largest group minimum, the upper bound the
//! smallest group maximum; an observation is dropped as soon as any of its
//! propensities falls outside its column's bounds. Propensities are
//! estimated once on the full sample and are not re-estimated afterwards.

use serde::{Deserialize, Serialize};

use crate::data::{standardized_difference, Dataset};
use crate::error::{Error, Result};
use crate::stats::{mean, nearest_rank_quantile};

/// Trimming variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportRule {
    /// Bounds from within-group extremes.
    MinMax,
    /// Bounds from within-group nearest-rank quantiles.
    Quantile { q_low: f64, q_high: f64 },
}

impl SupportRule {
    fn validate(&self) -> Result<()> {
        if let SupportRule::Quantile { q_low, q_high } = self {
            if !(0.0..1.0).contains(q_low) || !(*q_low < *q_high && *q_high <= 1.0) {
                return Err(Error::InvalidArgument {
                    name: "rule",
                    message: format!("need 0 <= q_low < q_high <= 1, got ({q_low}, {q_high})"),
                });
            }
        }
        Ok(())
    }
}

/// Bounds actually applied to one propensity column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnBounds {
    pub treatment: u32,
    pub lower: f64,
    pub upper: f64,
}

/// Kept-versus-dropped comparison for one covariate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeptDroppedRow {
    pub covariate: String,
    pub mean_kept: Option<f64>,
    pub mean_dropped: Option<f64>,
    /// `None` when either side is degenerate (fewer than two rows or both
    /// variances zero with differing means).
    pub std_diff: Option<f64>,
}

/// Outcome of a trimming pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportReport {
    pub rule: SupportRule,
    /// `true` for observations inside the common support.
    pub keep: Vec<bool>,
    pub bounds: Vec<ColumnBounds>,
    pub n_dropped: usize,
    pub dropped_share: f64,
    /// Kept-versus-dropped standardized differences; populated by
    /// [`support_diagnostics`].
    pub kept_vs_dropped: Option<Vec<KeptDroppedRow>>,
    pub warnings: Vec<String>,
}

impl SupportReport {
    pub fn kept_rows(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dropped_rows(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| !k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Trims observations outside the common support of the propensity matrix.
///
/// `propensities` is row-major n x K; rows must sum to one. Every treatment
/// group must be nonempty. A column whose binding bounds cross (lower >
/// upper) drops everything and is reported as a support collapse rather
/// than failing silently.
pub fn trim(
    propensities: &[Vec<f64>],
    groups: &[u32],
    n_treatments: u32,
    rule: SupportRule,
) -> Result<SupportReport> {
    rule.validate()?;
    let n = propensities.len();
    if n != groups.len() {
        return Err(Error::InvalidArgument {
            name: "groups",
            message: format!("{} labels for {} propensity rows", groups.len(), n),
        });
    }
    let k = n_treatments as usize;
    for (i, row) in propensities.iter().enumerate() {
        if row.len() != k {
            return Err(Error::InvalidArgument {
                name: "propensities",
                message: format!("row {i} has {} entries, expected {k}", row.len()),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument {
                name: "propensities",
                message: format!("row {i} sums to {sum}, not 1"),
            });
        }
    }
    let mut group_rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &g) in groups.iter().enumerate() {
        if g >= n_treatments {
            return Err(Error::InvalidArgument {
                name: "groups",
                message: format!("label {g} outside 0..{n_treatments}"),
            });
        }
        group_rows[g as usize].push(i);
    }
    if let Some(g) = group_rows.iter().position(|rows| rows.is_empty()) {
        return Err(Error::InvalidArgument {
            name: "groups",
            message: format!("treatment group {g} is empty"),
        });
    }

    let mut bounds = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for d in 0..k {
        let mut lower = f64::NEG_INFINITY;
        let mut upper = f64::INFINITY;
        for rows in &group_rows {
            let mut values: Vec<f64> = rows.iter().map(|&i| propensities[i][d]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (lo, hi) = match rule {
                SupportRule::MinMax => (values[0], values[values.len() - 1]),
                SupportRule::Quantile { q_low, q_high } => (
                    nearest_rank_quantile(&values, q_low),
                    nearest_rank_quantile(&values, q_high),
                ),
            };
            lower = lower.max(lo);
            upper = upper.min(hi);
        }
        if lower > upper {
            warnings.push(format!(
                "support collapse on treatment {d}: lower bound {lower} exceeds upper bound {upper}; all observations dropped"
            ));
        }
        bounds.push(ColumnBounds {
            treatment: d as u32,
            lower,
            upper,
        });
    }

    let keep: Vec<bool> = propensities
        .iter()
        .map(|row| {
            row.iter()
                .zip(&bounds)
                .all(|(&p, b)| p >= b.lower && p <= b.upper)
        })
        .collect();
    let n_dropped = keep.iter().filter(|&&k| !k).count();
    Ok(SupportReport {
        rule,
        keep,
        bounds,
        n_dropped,
        dropped_share: if n == 0 { 0.0 } else { n_dropped as f64 / n as f64 },
        kept_vs_dropped: None,
        warnings,
    })
}

/// Kept-versus-dropped means and standardized differences for the listed
/// covariates. Renders even when one side is empty; a note is recorded when
/// nothing was dropped.
pub fn support_diagnostics(
    data: &Dataset,
    report: &SupportReport,
    key_covariates: &[String],
) -> Result<(Vec<KeptDroppedRow>, Vec<String>)> {
    if report.keep.len() != data.n_rows() {
        return Err(Error::InvalidArgument {
            name: "report",
            message: format!(
                "mask covers {} rows, dataset has {}",
                report.keep.len(),
                data.n_rows()
            ),
        });
    }
    let kept = report.kept_rows();
    let dropped = report.dropped_rows();
    let mut notes = Vec::new();
    if dropped.is_empty() {
        notes.push("no observations dropped; comparison column left empty".to_string());
    }
    if kept.is_empty() {
        notes.push("support collapapsed: kept column left empty".to_string());
    }

    let mut rows = Vec::with_capacity(key_covariates.len());
    for name in key_covariates {
        let col = data.covariate_index(name).ok_or_else(|| Error::InvalidArgument {
            name: "key_covariates",
            message: format!("unknown covariate `{name}`"),
        })?;
        let kept_values: Vec<f64> = kept.iter().map(|&r| data.covariate_value(r, col)).collect();
        let dropped_values: Vec<f64> =
            dropped.iter().map(|&r| data.covariate_value(r, col)).collect();
        let std_diff = if kept_values.len() >= 2 && dropped_values.len() >= 2 {
            match standardized_difference(&kept_values, &dropped_values) {
                Ok(d) => Some(d),
                Err(Error::DegenerateVariance) => {
                    notes.push(format!("degenerate variance for `{name}`"));
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        rows.push(KeptDroppedRow {
            covariate: name.clone(),
            mean_kept: (!kept_values.is_empty()).then(|| mean(&kept_values)),
            mean_dropped: (!dropped_values.is_empty()).then(|| mean(&dropped_values)),
            std_diff,
        });
    }
    Ok((rows, notes))
}
