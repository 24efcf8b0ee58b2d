//! CSV emission for every pipeline artifact.
//!
//! All numbers are written with shortest round-trip formatting, so reruns
//! with identical inputs produce byte-identical files.

use std::path::Path;

use crate::cluster::ClusterProfileTable;
use crate::data::DescriptiveReport;
use crate::effects::{BgateResult, EffectCurve, EffectEstimate, GateResult};
use crate::error::Result;
use crate::mcf::WeightVector;
use crate::policy::PolicyValue;
use crate::pseudostart::PseudoStartRecord;
use crate::stats::stars;
use crate::support::{KeptDroppedRow, SupportReport};
use crate::synth::GroundTruth;

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_descriptives(path: &Path, report: &DescriptiveReport) -> Result<()> {
    write_csv(
        path,
        &["covariate", "group", "mean", "std_diff", "large"],
        report.rows.iter().map(|r| {
            vec![
                r.covariate.clone(),
                r.group.to_string(),
                fmt(r.mean),
                fmt_opt(r.std_diff),
                r.large.to_string(),
            ]
        }),
    )
}

pub fn write_support_bounds(path: &Path, report: &SupportReport) -> Result<()> {
    write_csv(
        path,
        &["treatment", "lower", "upper"],
        report
            .bounds
            .iter()
            .map(|b| vec![b.treatment.to_string(), fmt(b.lower), fmt(b.upper)]),
    )
}

pub fn write_support_mask(path: &Path, ids: &[u64], report: &SupportReport) -> Result<()> {
    write_csv(
        path,
        &["id", "kept"],
        ids.iter()
            .zip(&report.keep)
            .map(|(id, kept)| vec![id.to_string(), kept.to_string()]),
    )
}

/// Kept-versus-dropped comparison in the support-diagnostics layout
/// (mean kept, mean dropped, standardized difference).
pub fn write_support_diagnostics(path: &Path, rows: &[KeptDroppedRow]) -> Result<()> {
    write_csv(
        path,
        &["covariate", "mean_kept", "mean_dropped", "std_diff"],
        rows.iter().map(|r| {
            vec![
                r.covariate.clone(),
                fmt_opt(r.mean_kept),
                fmt_opt(r.mean_dropped),
                fmt_opt(r.std_diff),
            ]
        }),
    )
}

pub fn write_propensities(path: &Path, ids: &[u64], propensities: &[Vec<f64>]) -> Result<()> {
    let k = propensities.first().map_or(0, |row| row.len());
    let names: Vec<String> = (0..k).map(|a| format!("p{a}")).collect();
    let mut header = vec!["id".to_string()];
    header.extend(names);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        path,
        &header_refs,
        ids.iter().zip(propensities).map(|(id, row)| {
            let mut record = vec![id.to_string()];
            record.extend(row.iter().map(|&p| fmt(p)));
            record
        }),
    )
}

pub fn write_pseudo_audit(path: &Path, records: &[PseudoStartRecord]) -> Result<()> {
    write_csv(
        path,
        &["id", "prediction", "pseudo_month", "kept"],
        records.iter().map(|r| {
            vec![
                r.id.to_string(),
                fmt(r.prediction),
                r.pseudo_month.to_string(),
                r.kept.to_string(),
            ]
        }),
    )
}

fn effect_row(label: &str, cell: &str, e: &EffectEstimate) -> Vec<String> {
    vec![
        label.to_string(),
        e.contrast.to_string(),
        cell.to_string(),
        fmt(e.estimate),
        fmt(e.se),
        fmt(e.p_value),
        stars(e.p_value).to_string(),
        e.n_effective.to_string(),
    ]
}

pub const EFFECTS_HEADER: [&str; 8] = [
    "estimand",
    "contrast",
    "cell",
    "estimate",
    "se",
    "pvalue",
    "stars",
    "n_effective",
];

/// Flat effects table: ATE/ATET rows plus GATE and BGATE cells with their
/// deltas.
pub struct EffectsTable {
    pub rows: Vec<Vec<String>>,
}

impl EffectsTable {
    pub fn new() -> Self {
        EffectsTable { rows: Vec::new() }
    }

    pub fn push(&mut self, label: &str, estimate: &EffectEstimate) {
        self.rows.push(effect_row(label, "", estimate));
    }

    pub fn push_gates(&mut self, z_name: &str, result: &GateResult) {
        for cell in &result.cells {
            self.rows.push(effect_row(
                &format!("gate:{z_name}"),
                &fmt(cell.cell),
                &cell.estimate,
            ));
            self.rows.push(effect_row(
                &format!("gate_delta:{z_name}"),
                &fmt(cell.cell),
                &cell.delta,
            ));
        }
    }

    pub fn push_bgates(&mut self, z_name: &str, result: &BgateResult) {
        for cell in &result.cells {
            self.rows.push(effect_row(
                &format!("bgate:{z_name}"),
                &fmt(cell.cell),
                &cell.estimate,
            ));
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_csv(path, &EFFECTS_HEADER, self.rows.iter().cloned())
    }
}

impl Default for EffectsTable {
    fn default() -> Self {
        Self::new()
    }
}

/// Plot-ready curve: month, estimate, se, pvalue, significance flag.
pub fn write_effect_curve(path: &Path, curve: &EffectCurve) -> Result<()> {
    write_csv(
        path,
        &["month", "estimate", "se", "pvalue", "significant_5pct"],
        curve.months.iter().map(|m| {
            vec![
                m.month.to_string(),
                fmt(m.estimate.estimate),
                fmt(m.estimate.se),
                fmt(m.estimate.p_value),
                m.significant_5pct.to_string(),
            ]
        }),
    )
}

pub fn write_iates(path: &Path, ids: &[u64], estimates: &[EffectEstimate]) -> Result<()> {
    write_csv(
        path,
        &["id", "contrast", "estimate", "se", "pvalue"],
        ids.iter().zip(estimates).map(|(id, e)| {
            vec![
                id.to_string(),
                e.contrast.to_string(),
                fmt(e.estimate),
                fmt(e.se),
                fmt(e.p_value),
            ]
        }),
    )
}

/// Allocation comparison table: one row per policy with its value and
/// realized shares per arm.
pub fn write_allocations(
    path: &Path,
    arm_names: &[String],
    rows: &[(String, PolicyValue)],
) -> Result<()> {
    let mut header = vec!["policy".to_string(), "value".to_string()];
    header.extend(arm_names.iter().map(|n| format!("share_{n}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        path,
        &header_refs,
        rows.iter().map(|(label, value)| {
            let mut record = vec![label.clone(), fmt(value.value)];
            record.extend(value.shares.iter().map(|&s| fmt(s)));
            record
        }),
    )
}

/// Cluster profile table: one row per statistic (mean IATE, share, then
/// each covariate mean), one column per cluster sorted by mean IATE, plus
/// the least/most columns.
pub fn write_cluster_profile(path: &Path, table: &ClusterProfileTable) -> Result<()> {
    let mut header = vec!["statistic".to_string()];
    header.extend(table.profiles.iter().map(|p| format!("cluster_{}", p.cluster)));
    header.push("least".to_string());
    header.push("most".to_string());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();

    let least = table.least();
    let most = table.most();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut stat_row = |name: &str, values: Vec<f64>, l: f64, m: f64| {
        let mut record = vec![name.to_string()];
        record.extend(values.into_iter().map(fmt));
        record.push(fmt(l));
        record.push(fmt(m));
        rows.push(record);
    };
    stat_row(
        "mean_iate",
        table.profiles.iter().map(|p| p.mean_iate).collect(),
        least.mean_iate,
        most.mean_iate,
    );
    stat_row(
        "share",
        table.profiles.iter().map(|p| p.share).collect(),
        least.share,
        most.share,
    );
    for (i, covariate) in table.covariates.iter().enumerate() {
        stat_row(
            covariate,
            table.profiles.iter().map(|p| p.covariate_means[i]).collect(),
            least.covariate_means[i],
            most.covariate_means[i],
        );
    }
    write_csv(path, &header_refs, rows)
}

pub fn write_cluster_assignments(path: &Path, ids: &[u64], assignment: &[u32]) -> Result<()> {
    write_csv(
        path,
        &["id", "cluster"],
        ids.iter()
            .zip(assignment)
            .map(|(id, c)| vec![id.to_string(), c.to_string()]),
    )
}

/// Ground truth companion file keyed by row id.
pub fn write_ground_truth(path: &Path, ids: &[u64], truth: &GroundTruth) -> Result<()> {
    let k = truth.propensities.first().map_or(0, |row| row.len());
    let mut header = vec!["id".to_string()];
    header.extend((0..k).map(|a| format!("p{a}")));
    header.extend((0..k).map(|a| format!("tau{a}")));
    header.extend((0..k).map(|a| format!("mu{a}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        path,
        &header_refs,
        ids.iter().enumerate().map(|(r, id)| {
            let mut record = vec![id.to_string()];
            record.extend(truth.propensities[r].iter().map(|&v| fmt(v)));
            record.extend(truth.effects[r].iter().map(|&v| fmt(v)));
            record.extend(truth.potential_means[r].iter().map(|&v| fmt(v)));
            record
        }),
    )
}

/// Sparse triplet export of per-row weight vectors: prediction row, arm,
/// estimation row, weight.
pub fn write_weights(path: &Path, weights: &[WeightVector]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["pred_row", "arm", "est_row", "weight"])?;
    for (r, vector) in weights.iter().enumerate() {
        for (a, arm) in vector.arms.iter().enumerate() {
            if let Some(entries) = arm {
                for &(i, w) in entries {
                    writer.write_record([
                        r.to_string(),
                        a.to_string(),
                        i.to_string(),
                        fmt(w),
                    ])?;
                }
            }
        }
    }
    writer.flush()?;
    Ok(())
}
