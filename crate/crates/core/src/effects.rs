//! Aggregation of causal-forest weights into effect estimates at every
//! level: IATE, GATE, BGATE, ATE, ATET, GATE-minus-ATE deltas, and monthly
//! effect curves, with weight-based inference throughout.
//!
//! Every estimand over a set of prediction rows aggregates the per-row
//! leaf weights into one weight vector per treatment arm over the
//! estimation subsample. The point estimate is the weighted outcome mean
//! difference (identical to the mean of the rows' IATEs by linearity), and
//! the variance is `sum_i w_i^2 (y_i - mu)^2` per arm with the residuals
//! centered at the estimand's own arm mean, minus the shared-row
//! covariance term for paired weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::mcf::{CausalForest, McfNode};
use crate::stats::{nearest_rank_quantile, two_sided_p};

/// Treatment contrast (d, d'): the effect of `d` versus `d_prime`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contrast {
    pub d: u32,
    pub d_prime: u32,
}

impl Contrast {
    pub fn new(d: u32, d_prime: u32) -> Self {
        Contrast { d, d_prime }
    }

    pub fn flipped(self) -> Self {
        Contrast {
            d: self.d_prime,
            d_prime: self.d,
        }
    }
}

impl std::fmt::Display for Contrast {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}v{}", self.d, self.d_prime)
    }
}

/// What an estimate refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    Ate,
    Atet { treated: u32 },
    Gate { cell: f64 },
    GateDelta { cell: f64 },
    Bgate { cell: f64 },
    Iate { row: usize },
    Month { month: usize },
}

impl std::fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimandKind::Ate => write!(f, "ate"),
            EstimandKind::Atet { treated } => write!(f, "atet_{treated}"),
            EstimandKind::Gate { .. } => write!(f, "gate"),
            EstimandKind::GateDelta { .. } => write!(f, "gate_delta"),
            EstimandKind::Bgate { .. } => write!(f, "bgate"),
            EstimandKind::Iate { .. } => write!(f, "iate"),
            EstimandKind::Month { .. } => write!(f, "month"),
        }
    }
}

/// Point estimate with weight-based standard error and normal p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub kind: EstimandKind,
    pub contrast: Contrast,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub n_effective: usize,
}

/// One GATE cell with its GATE-minus-ATE delta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateCell {
    pub cell: f64,
    pub n_effective: usize,
    pub estimate: EffectEstimate,
    pub delta: EffectEstimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateResult {
    pub cells: Vec<GateCell>,
    pub ate: EffectEstimate,
}

/// One BGATE cell; shares of skipped (empty) W cells are renormalized and
/// reported as lost coverage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BgateCell {
    pub cell: f64,
    pub estimate: EffectEstimate,
    /// Share of the pooled W distribution that had no support in this z
    /// cell and was renormalized away.
    pub missing_w_share: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BgateResult {
    pub cells: Vec<BgateCell>,
    pub warnings: Vec<String>,
}

/// ATE per monthly outcome with 5% significance flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectCurve {
    pub months: Vec<MonthEffect>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonthEffect {
    pub month: usize,
    pub estimate: EffectEstimate,
    pub significant_5pct: bool,
}

/// Precomputed prediction-side state: one leaf id per (row, tree) and the
/// per-arm count of trees whose leaf is complete for that arm.
pub struct EffectsContext<'a> {
    forest: &'a CausalForest,
    pred: &'a FeatureMatrix,
    pred_treatment: Option<Vec<u32>>,
    max_undefined_share: f64,
    assign: Vec<u32>,
    tree_count: Vec<u32>,
}

impl<'a> EffectsContext<'a> {
    pub fn new(forest: &'a CausalForest, pred: &'a FeatureMatrix) -> Result<Self> {
        if pred.n_features() != forest.n_features {
            return Err(Error::InvalidArgument {
                name: "pred",
                message: "prediction features do not match the forest schema".into(),
            });
        }
        let n = pred.n_rows();
        let n_trees = forest.trees.len();
        let k = forest.n_treatments as usize;
        let mut assign = vec![0u32; n * n_trees];
        let mut tree_count = vec![0u32; n * k];
        for r in 0..n {
            let row = pred.row(r);
            for (t, tree) in forest.trees.iter().enumerate() {
                let leaf = tree.leaf_index(row);
                assign[r * n_trees + t] = leaf as u32;
                let arm_rows = tree.leaf_arm_rows(leaf);
                for (a, members) in arm_rows.iter().enumerate() {
                    if !members.is_empty() {
                        tree_count[r * k + a] += 1;
                    }
                }
            }
        }
        Ok(EffectsContext {
            forest,
            pred,
            pred_treatment: None,
            max_undefined_share: 0.05,
            assign,
            tree_count,
        })
    }

    /// Attaches the prediction rows' observed treatments (needed for ATET).
    pub fn with_treatment(mut self, treatment: &[u32]) -> Result<Self> {
        if treatment.len() != self.pred.n_rows() {
            return Err(Error::InvalidArgument {
                name: "treatment",
                message: "length does not match prediction rows".into(),
            });
        }
        self.pred_treatment = Some(treatment.to_vec());
        Ok(self)
    }

    /// Share of undefined prediction rows tolerated (excluded) before an
    /// estimand aborts.
    pub fn with_max_undefined_share(mut self, share: f64) -> Self {
        self.max_undefined_share = share;
        self
    }

    pub fn n_prediction_rows(&self) -> usize {
        self.pred.n_rows()
    }

    fn trees_for(&self, row: usize, arm: u32) -> u32 {
        self.tree_count[row * self.forest.n_treatments as usize + arm as usize]
    }

    fn check_outcomes(&self, y_est: &[f64]) -> Result<()> {
        if y_est.len() != self.forest.n_estimation_rows() {
            return Err(Error::InvalidArgument {
                name: "y_est",
                message: "outcome vector does not match the estimation subsample".into(),
            });
        }
        Ok(())
    }

    /// Splits `rows` into those defined for both contrast arms and the
    /// undefined remainder; errors when the undefined share exceeds the
    /// tolerance.
    fn defined_rows(&self, rows: &[usize], contrast: Contrast) -> Result<Vec<usize>> {
        let defined: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&r| self.trees_for(r, contrast.d) > 0 && self.trees_for(r, contrast.d_prime) > 0)
            .collect();
        let undefined = rows.len() - defined.len();
        if defined.is_empty()
            || undefined as f64 > self.max_undefined_share * rows.len() as f64
        {
            return Err(Error::Estimation(format!(
                "{undefined} of {} prediction rows have undefined potential outcomes for contrast {} (tolerance {})",
                rows.len(),
                contrast,
                self.max_undefined_share
            )));
        }
        Ok(defined)
    }

    /// Aggregated weight vector over estimation rows for one arm across
    /// `rows` (already filtered to defined ones).
    fn aggregate_weights(&self, rows: &[usize], arm: u32) -> Vec<f64> {
        let n_trees = self.forest.trees.len();
        let mut wbar = vec![0.0; self.forest.n_estimation_rows()];
        let inv_rows = 1.0 / rows.len() as f64;
        for &r in rows {
            let t_count = self.trees_for(r, arm) as f64;
            let scale = inv_rows / t_count;
            for (t, tree) in self.forest.trees.iter().enumerate() {
                let leaf = self.assign[r * n_trees + t] as usize;
                let members = &tree.leaf_arm_rows(leaf)[arm as usize];
                if members.is_empty() {
                    continue;
                }
                let w = scale / members.len() as f64;
                for &i in members {
                    wbar[i as usize] += w;
                }
            }
        }
        wbar
    }

    /// Core estimator: weighted mean difference over a row set, with
    /// weight-based variance.
    fn estimate_over_rows(
        &self,
        kind: EstimandKind,
        rows: &[usize],
        y_est: &[f64],
        contrast: Contrast,
    ) -> Result<EffectEstimate> {
        let defined = self.defined_rows(rows, contrast)?;
        let w_d = self.aggregate_weights(&defined, contrast.d);
        let w_dp = self.aggregate_weights(&defined, contrast.d_prime);
        Ok(effect_from_weights(
            kind, contrast, &w_d, &w_dp, y_est, defined.len(),
        ))
    }

    /// Average treatment effect over all prediction rows.
    pub fn ate(&self, y_est: &[f64], contrast: Contrast) -> Result<EffectEstimate> {
        self.check_outcomes(y_est)?;
        let rows: Vec<usize> = (0..self.pred.n_rows()).collect();
        self.estimate_over_rows(EstimandKind::Ate, &rows, y_est, contrast)
    }

    /// Average effect over prediction rows observed in arm `treated`.
    pub fn atet(&self, y_est: &[f64], contrast: Contrast, treated: u32) -> Result<EffectEstimate> {
        self.check_outcomes(y_est)?;
        let treatment = self.pred_treatment.as_ref().ok_or(Error::InvalidArgument {
            name: "treatment",
            message: "ATET needs prediction-row treatments; call with_treatment".into(),
        })?;
        let rows: Vec<usize> = (0..self.pred.n_rows())
            .filter(|&r| treatment[r] == treated)
            .collect();
        if rows.is_empty() {
            return Err(Error::Estimation(format!(
                "no prediction rows observed in arm {treated}"
            )));
        }
        self.estimate_over_rows(EstimandKind::Atet { treated }, &rows, y_est, contrast)
    }

    /// Group average treatment effects per cell of the (discrete) vector
    /// `z`, each with its GATE-minus-ATE delta.
    pub fn gate(&self, y_est: &[f64], contrast: Contrast, z: &[f64]) -> Result<GateResult> {
        self.check_outcomes(y_est)?;
        if z.len() != self.pred.n_rows() {
            return Err(Error::InvalidArgument {
                name: "z",
                message: "length does not match prediction rows".into(),
            });
        }
        let all_rows: Vec<usize> = (0..self.pred.n_rows()).collect();
        let ate_defined = self.defined_rows(&all_rows, contrast)?;
        let ate_w_d = self.aggregate_weights(&ate_defined, contrast.d);
        let ate_w_dp = self.aggregate_weights(&ate_defined, contrast.d_prime);
        let ate = effect_from_weights(
            EstimandKind::Ate,
            contrast,
            &ate_w_d,
            &ate_w_dp,
            y_est,
            ate_defined.len(),
        );

        let mut cells: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (r, &value) in z.iter().enumerate() {
            cells.entry(value.to_bits()).or_default().push(r);
        }
        let mut out = Vec::with_capacity(cells.len());
        for (bits, rows) in cells {
            let cell = f64::from_bits(bits);
            let defined = self.defined_rows(&rows, contrast)?;
            let w_d = self.aggregate_weights(&defined, contrast.d);
            let w_dp = self.aggregate_weights(&defined, contrast.d_prime);
            let estimate = effect_from_weights(
                EstimandKind::Gate { cell },
                contrast,
                &w_d,
                &w_dp,
                y_est,
                defined.len(),
            );
            // Delta weights: cell weights minus ATE weights, per arm; the
            // residuals are centered at the cell's arm means.
            let dw_d: Vec<f64> = w_d.iter().zip(&ate_w_d).map(|(a, b)| a - b).collect();
            let dw_dp: Vec<f64> = w_dp.iter().zip(&ate_w_dp).map(|(a, b)| a - b).collect();
            let mu_d = dot(&w_d, y_est);
            let mu_dp = dot(&w_dp, y_est);
            let delta_var = signed_weight_variance(&dw_d, y_est, mu_d)
                + signed_weight_variance(&dw_dp, y_est, mu_dp)
                - 2.0 * signed_weight_covariance(&dw_d, &dw_dp, y_est, mu_d, mu_dp);
            let delta_est = estimate.estimate - ate.estimate;
            let delta_se = delta_var.max(0.0).sqrt();
            let delta = EffectEstimate {
                kind: EstimandKind::GateDelta { cell },
                contrast,
                estimate: delta_est,
                se: delta_se,
                p_value: two_sided_p(delta_est, delta_se),
                n_effective: defined.len(),
            };
            out.push(GateCell {
                cell,
                n_effective: defined.len(),
                estimate,
                delta,
            });
        }
        Ok(GateResult { cells: out, ate })
    }

    /// Balanced GATE: within each z cell, W-cell means of IATEs are
    /// combined with the pooled W distribution, so every z cell sees the
    /// same covariate mix. Empty (z, w) cells are skipped and the shares
    /// renormalized, with a coverage warning.
    pub fn bgate(
        &self,
        y_est: &[f64],
        contrast: Contrast,
        z: &[f64],
        w_columns: &[Vec<f64>],
    ) -> Result<BgateResult> {
        self.check_outcomes(y_est)?;
        let n = self.pred.n_rows();
        if z.len() != n || w_columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument {
                name: "z",
                message: "z or W columns do not match prediction rows".into(),
            });
        }

        // Pooled W-cell shares.
        let w_key = |r: usize| -> Vec<u64> {
            w_columns.iter().map(|c| c[r].to_bits()).collect()
        };
        let mut pooled: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        for r in 0..n {
            *pooled.entry(w_key(r)).or_insert(0) += 1;
        }

        let mut z_cells: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (r, &value) in z.iter().enumerate() {
            z_cells.entry(value.to_bits()).or_default().push(r);
        }

        let mut warnings = Vec::new();
        let mut out = Vec::with_capacity(z_cells.len());
        for (bits, rows) in z_cells {
            let cell = f64::from_bits(bits);
            // Partition the z cell by W cell.
            let mut by_w: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
            for &r in &rows {
                by_w.entry(w_key(r)).or_default().push(r);
            }
            let mut covered = 0usize;
            let mut parts: Vec<(f64, EffectEstimate)> = Vec::new();
            for (key, share_count) in &pooled {
                if let Some(cell_rows) = by_w.get(key) {
                    let estimate = self.estimate_over_rows(
                        EstimandKind::Bgate { cell },
                        cell_rows,
                        y_est,
                        contrast,
                    )?;
                    covered += share_count;
                    parts.push((*share_count as f64, estimate));
                }
            }
            if parts.is_empty() {
                return Err(Error::Estimation(format!(
                    "no populated (z, w) cells for z = {cell}"
                )));
            }
            let missing_w_share = 1.0 - covered as f64 / n as f64;
            if missing_w_share > 0.0 {
                warnings.push(format!(
                    "z = {cell}: {:.1}% of the pooled W distribution has no support and was renormalized",
                    missing_w_share * 100.0
                ));
            }
            let total: f64 = parts.iter().map(|(s, _)| s).sum();
            let mut estimate = 0.0;
            let mut variance = 0.0;
            let mut n_effective = 0usize;
            for (share_count, part) in &parts {
                let share = share_count / total;
                estimate += share * part.estimate;
                variance += share * share * part.se * part.se;
                n_effective += part.n_effective;
            }
            let se = variance.max(0.0).sqrt();
            out.push(BgateCell {
                cell,
                estimate: EffectEstimate {
                    kind: EstimandKind::Bgate { cell },
                    contrast,
                    estimate,
                    se,
                    p_value: two_sided_p(estimate, se),
                    n_effective,
                },
                missing_w_share,
            });
        }
        Ok(BgateResult {
            cells: out,
            warnings,
        })
    }

    /// ATE per outcome column, flagged at the 5% level.
    pub fn effect_curve(
        &self,
        outcomes: &[Vec<f64>],
        contrast: Contrast,
    ) -> Result<EffectCurve> {
        let mut months = Vec::with_capacity(outcomes.len());
        for (idx, y_est) in outcomes.iter().enumerate() {
            let base = self.ate(y_est, contrast)?;
            let month = idx + 1;
            let estimate = EffectEstimate {
                kind: EstimandKind::Month { month },
                ..base
            };
            months.push(MonthEffect {
                month,
                significant_5pct: estimate.p_value < 0.05,
                estimate,
            });
        }
        Ok(EffectCurve { months })
    }

    /// Per-prediction-row IATE estimates with weight-based SEs.
    pub fn iate_estimates(
        &self,
        y_est: &[f64],
        contrast: Contrast,
    ) -> Result<Vec<EffectEstimate>> {
        self.check_outcomes(y_est)?;
        (0..self.pred.n_rows())
            .map(|r| {
                self.estimate_over_rows(EstimandKind::Iate { row: r }, &[r], y_est, contrast)
            })
            .collect()
    }

    /// Fast per-row potential-outcome means via per-leaf arm means;
    /// `None` marks undefined arms. Used for policy scores and clustering.
    pub fn potential_outcome_matrix(&self, y_est: &[f64]) -> Result<Vec<Vec<Option<f64>>>> {
        self.check_outcomes(y_est)?;
        let k = self.forest.n_treatments as usize;
        let n_trees = self.forest.trees.len();

        // Per tree, per node, per arm: mean estimation outcome.
        let leaf_means: Vec<Vec<Vec<f64>>> = self
            .forest
            .trees
            .iter()
            .map(|tree| {
                tree.nodes
                    .iter()
                    .map(|node| match node {
                        McfNode::Leaf { arm_rows } => arm_rows
                            .iter()
                            .map(|members| {
                                if members.is_empty() {
                                    f64::NAN
                                } else {
                                    members.iter().map(|&i| y_est[i as usize]).sum::<f64>()
                                        / members.len() as f64
                                }
                            })
                            .collect(),
                        McfNode::Split { .. } => Vec::new(),
                    })
                    .collect()
            })
            .collect();

        let mut out = Vec::with_capacity(self.pred.n_rows());
        for r in 0..self.pred.n_rows() {
            let mut row = vec![0.0f64; k];
            let mut counts = vec![0u32; k];
            for t in 0..n_trees {
                let leaf = self.assign[r * n_trees + t] as usize;
                let means = &leaf_means[t][leaf];
                for a in 0..k {
                    if !means[a].is_nan() {
                        row[a] += means[a];
                        counts[a] += 1;
                    }
                }
            }
            out.push(
                (0..k)
                    .map(|a| (counts[a] > 0).then(|| row[a] / counts[a] as f64))
                    .collect(),
            );
        }
        Ok(out)
    }
}

fn dot(w: &[f64], y: &[f64]) -> f64 {
    w.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn signed_weight_variance(w: &[f64], y: &[f64], mu: f64) -> f64 {
    w.iter()
        .zip(y)
        .map(|(&wi, &yi)| wi * wi * (yi - mu) * (yi - mu))
        .sum()
}

fn signed_weight_covariance(wa: &[f64], wb: &[f64], y: &[f64], mu_a: f64, mu_b: f64) -> f64 {
    wa.iter()
        .zip(wb)
        .zip(y)
        .map(|((&a, &b), &yi)| a * b * (yi - mu_a) * (yi - mu_b))
        .sum()
}

fn effect_from_weights(
    kind: EstimandKind,
    contrast: Contrast,
    w_d: &[f64],
    w_dp: &[f64],
    y_est: &[f64],
    n_effective: usize,
) -> EffectEstimate {
    let mu_d = dot(w_d, y_est);
    let mu_dp = dot(w_dp, y_est);
    let estimate = mu_d - mu_dp;
    let variance = signed_weight_variance(w_d, y_est, mu_d)
        + signed_weight_variance(w_dp, y_est, mu_dp)
        - 2.0 * signed_weight_covariance(w_d, w_dp, y_est, mu_d, mu_dp);
    let se = variance.max(0.0).sqrt();
    EffectEstimate {
        kind,
        contrast,
        estimate,
        se,
        p_value: two_sided_p(estimate, se),
        n_effective,
    }
}

/// Discretizes a continuous vector into decile codes 0..=9 by nearest-rank
/// quantiles.
pub fn discretize_deciles(values: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cuts: Vec<f64> = (1..10)
        .map(|q| nearest_rank_quantile(&sorted, q as f64 / 10.0))
        .collect();
    values
        .iter()
        .map(|&v| cuts.iter().filter(|&&c| v > c).count() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcf::{fit_mcf, iate, McfParams};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gen_matrix(n: usize, p: usize, seed: u64) -> FeatureMatrix {
        let mut rng = crate::rng::rng_for(seed, 99, 0);
        let values: Vec<f64> = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMatrix::continuous(n, p, values)
    }

    struct Fixture {
        x: FeatureMatrix,
        d: Vec<u32>,
        y: Vec<f64>,
        forest: CausalForest,
    }

    /// Random assignment, effect tau(x) = effect(x1), outcome noise from a
    /// seeded normal.
    fn fixture(seed: u64, n: usize, n_trees: usize, effect: impl Fn(f64) -> f64) -> Fixture {
        let x = gen_matrix(n, 3, seed);
        let mut rng = crate::rng::rng_for(seed, 90, 0);
        let d: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y: Vec<f64> = (0..n)
            .map(|r| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                x.value(r, 0) + d[r] as f64 * effect(x.value(r, 1)) + 0.5 * noise
            })
            .collect();
        let params = McfParams {
            n_trees,
            min_leaf: 4,
            subsample_fraction: 0.6,
            seed,
            ..Default::default()
        };
        let forest = fit_mcf(&x, &d, &y, &x, &d, 2, &params).unwrap();
        Fixture { x, d, y, forest }
    }

    #[test]
    fn single_row_ate_equals_iate() {
        let f = fixture(1, 80, 12, |_| 1.0);
        let single = f.x.select_rows(&[5]);
        let ctx = EffectsContext::new(&f.forest, &single).unwrap();
        let ate = ctx.ate(&f.y, Contrast::new(1, 0)).unwrap();
        let tau = iate(&f.forest, f.x.row(5), &f.y, 1, 0).unwrap();
        assert!((ate.estimate - tau).abs() < 1e-9);
        assert_eq!(ate.n_effective, 1);
    }

    #[test]
    fn contrast_antisymmetry_exact() {
        let f = fixture(2, 100, 10, |z| z);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let a = ctx.ate(&f.y, Contrast::new(1, 0)).unwrap();
        let b = ctx.ate(&f.y, Contrast::new(0, 1)).unwrap();
        assert_eq!(a.estimate, -b.estimate);
        assert_eq!(a.se, b.se);
    }

    #[test]
    fn ate_equals_mean_of_iates() {
        let f = fixture(3, 120, 10, |z| 1.0 + z);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let contrast = Contrast::new(1, 0);
        let ate = ctx.ate(&f.y, contrast).unwrap();
        let iates = ctx.iate_estimates(&f.y, contrast).unwrap();
        let mean: f64 =
            iates.iter().map(|e| e.estimate).sum::<f64>() / iates.len() as f64;
        assert!((ate.estimate - mean).abs() < 1e-9, "{} vs {mean}", ate.estimate);
    }

    #[test]
    fn atet_all_treated_equals_ate() {
        let f = fixture(4, 90, 10, |z| z);
        // Everyone labeled arm 1 on the prediction side.
        let treatment = vec![1u32; 90];
        let ctx = EffectsContext::new(&f.forest, &f.x)
            .unwrap()
            .with_treatment(&treatment)
            .unwrap();
        let contrast = Contrast::new(1, 0);
        let ate = ctx.ate(&f.y, contrast).unwrap();
        let atet = ctx.atet(&f.y, contrast, 1).unwrap();
        assert_eq!(ate.estimate, atet.estimate);
    }

    #[test]
    fn selection_on_gain_raises_atet() {
        // D = 1 more likely when the gain x1 is large: ATET(1) > ATE.
        let n = 900;
        let x = gen_matrix(n, 3, 5);
        let mut rng = crate::rng::rng_for(5, 89, 0);
        let d: Vec<u32> = (0..n)
            .map(|r| {
                let p = 1.0 / (1.0 + (-1.5 * x.value(r, 1)).exp());
                (rng.random::<f64>() < p) as u32
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|r| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                d[r] as f64 * (1.0 + 2.0 * x.value(r, 1)) + 0.3 * noise
            })
            .collect();
        let params = McfParams {
            n_trees: 40,
            min_leaf: 6,
            subsample_fraction: 0.6,
            seed: 5,
            ..Default::default()
        };
        let forest = fit_mcf(&x, &d, &y, &x, &d, 2, &params).unwrap();
        let ctx = EffectsContext::new(&forest, &x)
            .unwrap()
            .with_treatment(&d)
            .unwrap();
        let contrast = Contrast::new(1, 0);
        let ate = ctx.ate(&y, contrast).unwrap();
        let atet = ctx.atet(&y, contrast, 1).unwrap();
        assert!(
            atet.estimate > ate.estimate,
            "ATET {} should exceed ATE {}",
            atet.estimate,
            ate.estimate
        );
    }

    #[test]
    fn zero_effect_ate_within_two_se() {
        // 50 replications of a zero-effect DGP with random assignment:
        // |ATE| <= 2 SE in at least 90%.
        let mut covered = 0;
        let reps = 50;
        for rep in 0..reps {
            let n = 300;
            let x = gen_matrix(n, 3, 600 + rep);
            let mut rng = crate::rng::rng_for(600 + rep, 88, 0);
            let d: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let y: Vec<f64> = (0..n)
                .map(|r| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    x.value(r, 0) + noise
                })
                .collect();
            let params = McfParams {
                n_trees: 25,
                min_leaf: 5,
                subsample_fraction: 0.5,
                seed: rep,
                ..Default::default()
            };
            let forest = fit_mcf(&x, &d, &y, &x, &d, 2, &params).unwrap();
            let ctx = EffectsContext::new(&forest, &x).unwrap();
            let ate = ctx.ate(&y, Contrast::new(1, 0)).unwrap();
            if ate.estimate.abs() <= 2.0 * ate.se {
                covered += 1;
            }
        }
        assert!(covered * 100 >= reps * 90, "covered {covered}/{reps}");
    }

    #[test]
    fn single_cell_gate_equals_ate() {
        let f = fixture(6, 80, 8, |z| z);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let z = vec![1.0; 80];
        let result = ctx.gate(&f.y, Contrast::new(1, 0), &z).unwrap();
        assert_eq!(result.cells.len(), 1);
        let cell = &result.cells[0];
        assert_eq!(cell.estimate.estimate, result.ate.estimate);
        assert_eq!(cell.delta.estimate, 0.0);
    }

    #[test]
    fn share_weighted_gates_reproduce_ate() {
        let f = fixture(7, 150, 10, |z| 1.0 + z);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let z: Vec<f64> = (0..150).map(|r| (r % 3) as f64).collect();
        let result = ctx.gate(&f.y, Contrast::new(1, 0), &z).unwrap();
        let total: usize = result.cells.iter().map(|c| c.n_effective).sum();
        let mixed: f64 = result
            .cells
            .iter()
            .map(|c| c.n_effective as f64 / total as f64 * c.estimate.estimate)
            .sum();
        assert!(
            (mixed - result.ate.estimate).abs() < 1e-9,
            "{mixed} vs {}",
            result.ate.estimate
        );
    }

    #[test]
    fn gate_recovers_binary_heterogeneity() {
        // tau = 1{z = 1}: the GATE gap should be near 1.
        let n = 1200;
        let x = gen_matrix(n, 3, 8);
        let z: Vec<f64> = (0..n).map(|r| (x.value(r, 1) > 0.0) as u32 as f64).collect();
        let mut rng = crate::rng::rng_for(8, 87, 0);
        let d: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y: Vec<f64> = (0..n)
            .map(|r| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                d[r] as f64 * z[r] + 0.4 * noise
            })
            .collect();
        let params = McfParams {
            n_trees: 60,
            min_leaf: 6,
            subsample_fraction: 0.6,
            seed: 8,
            ..Default::default()
        };
        let forest = fit_mcf(&x, &d, &y, &x, &d, 2, &params).unwrap();
        let ctx = EffectsContext::new(&forest, &x).unwrap();
        let result = ctx.gate(&y, Contrast::new(1, 0), &z).unwrap();
        assert_eq!(result.cells.len(), 2);
        let gap = result.cells[1].estimate.estimate - result.cells[0].estimate.estimate;
        assert!((gap - 1.0).abs() <= 0.15, "gap = {gap}");
    }

    #[test]
    fn bgate_empty_w_equals_gate() {
        let f = fixture(9, 100, 8, |z| z);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let z: Vec<f64> = (0..100).map(|r| (r % 2) as f64).collect();
        let contrast = Contrast::new(1, 0);
        let gate = ctx.gate(&f.y, contrast, &z).unwrap();
        let bgate = ctx.bgate(&f.y, contrast, &z, &[]).unwrap();
        for (g, b) in gate.cells.iter().zip(&bgate.cells) {
            assert_eq!(g.estimate.estimate, b.estimate.estimate);
        }
        assert!(bgate.warnings.is_empty());
    }

    #[test]
    fn bgate_close_to_gate_when_independent() {
        // Z independent of W: BGATE and GATE agree within 2 SE.
        let f = fixture(10, 400, 20, |z| z);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let z: Vec<f64> = (0..400).map(|r| (r % 2) as f64).collect();
        let w: Vec<f64> = (0..400).map(|r| ((r / 2) % 2) as f64).collect();
        let contrast = Contrast::new(1, 0);
        let gate = ctx.gate(&f.y, contrast, &z).unwrap();
        let bgate = ctx.bgate(&f.y, contrast, &z, &[w]).unwrap();
        for (g, b) in gate.cells.iter().zip(&bgate.cells) {
            let diff = (g.estimate.estimate - b.estimate.estimate).abs();
            let band = 2.0 * g.estimate.se.max(b.estimate.se);
            assert!(diff <= band, "diff {diff} exceeds band {band}");
        }
    }

    #[test]
    fn bgate_shrinks_confounded_heterogeneity() {
        // The effect is driven by W; Z is correlated with W but has no
        // effect of its own. Balancing W must shrink the BGATE deltas
        // relative to the GATE deltas.
        let n = 1600;
        let mut rng = crate::rng::rng_for(11, 86, 0);
        let w: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.5) as u32 as f64).collect();
        // z agrees with w 80% of the time.
        let z: Vec<f64> = w
            .iter()
            .map(|&wi| {
                if rng.random::<f64>() < 0.8 {
                    wi
                } else {
                    1.0 - wi
                }
            })
            .collect();
        let mut values = Vec::with_capacity(n * 3);
        for r in 0..n {
            values.push(rng.random_range(-2.0..2.0));
            values.push(z[r]);
            values.push(w[r]);
        }
        let x = FeatureMatrix::continuous(n, 3, values);
        let d: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let y: Vec<f64> = (0..n)
            .map(|r| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                d[r] as f64 * (2.0 * w[r]) + 0.4 * noise
            })
            .collect();
        let params = McfParams {
            n_trees: 40,
            min_leaf: 8,
            subsample_fraction: 0.5,
            seed: 11,
            ..Default::default()
        };
        let forest = fit_mcf(&x, &d, &y, &x, &d, 2, &params).unwrap();
        let ctx = EffectsContext::new(&forest, &x).unwrap();
        let contrast = Contrast::new(1, 0);
        let gate = ctx.gate(&y, contrast, &z).unwrap();
        let bgate = ctx.bgate(&y, contrast, &z, &[w]).unwrap();
        let gate_spread = (gate.cells[1].estimate.estimate - gate.cells[0].estimate.estimate).abs();
        let bgate_spread =
            (bgate.cells[1].estimate.estimate - bgate.cells[0].estimate.estimate).abs();
        assert!(
            bgate_spread < gate_spread,
            "BGATE spread {bgate_spread} should shrink below GATE spread {gate_spread}"
        );
    }

    #[test]
    fn flat_curve_on_identical_months() {
        let f = fixture(12, 80, 8, |_| 1.0);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let outcomes: Vec<Vec<f64>> = (0..5).map(|_| f.y.clone()).collect();
        let curve = ctx.effect_curve(&outcomes, Contrast::new(1, 0)).unwrap();
        assert_eq!(curve.months.len(), 5);
        let first = curve.months[0].estimate.estimate;
        for m in &curve.months {
            assert_eq!(m.estimate.estimate, first);
        }
    }

    #[test]
    fn curve_has_row_per_outcome_column() {
        let f = fixture(13, 60, 6, |_| 0.5);
        let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
        let outcomes: Vec<Vec<f64>> = (0..36).map(|_| f.y.clone()).collect();
        let curve = ctx.effect_curve(&outcomes, Contrast::new(1, 0)).unwrap();
        assert_eq!(curve.months.len(), 36);
        assert!(curve
            .months
            .iter()
            .enumerate()
            .all(|(i, m)| m.month == i + 1));
    }

    #[test]
    fn lock_in_sign_pattern() {
        // Effect scaled by a lock-in template: -1 up to month 3, +1 from
        // month 6 on; the estimated curve must reproduce the signs.
        let n = 1000;
        let x = gen_matrix(n, 3, 14);
        let mut rng = crate::rng::rng_for(14, 85, 0);
        let d: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let template = [-1.0, -1.0, -1.0, 0.0, 0.5, 1.0, 1.0];
        let outcomes: Vec<Vec<f64>> = template
            .iter()
            .map(|&s| {
                (0..n)
                    .map(|r| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        x.value(r, 0) + d[r] as f64 * s + 0.4 * noise
                    })
                    .collect()
            })
            .collect();
        let params = McfParams {
            n_trees: 40,
            min_leaf: 6,
            subsample_fraction: 0.6,
            seed: 14,
            ..Default::default()
        };
        let forest = fit_mcf(&x, &d, &outcomes[0], &x, &d, 2, &params).unwrap();
        let ctx = EffectsContext::new(&forest, &x).unwrap();
        let curve = ctx.effect_curve(&outcomes, Contrast::new(1, 0)).unwrap();
        for (m, &s) in curve.months.iter().zip(&template) {
            let est = m.estimate.estimate;
            let band = 2.0 * m.estimate.se;
            assert!(
                (est - s).abs() <= band.max(0.25),
                "month {}: {est} vs template {s}",
                m.month
            );
            if s.abs() >= 1.0 {
                assert_eq!(est.signum(), s.signum(), "month {}", m.month);
            }
        }
    }

    #[test]
    fn se_decreases_as_n_quadruples() {
        let mut small = Vec::new();
        let mut large = Vec::new();
        for rep in 0..5u64 {
            for (n, out) in [(200, &mut small), (800, &mut large)] {
                let f = fixture(700 + rep, n, 15, |_| 1.0);
                let ctx = EffectsContext::new(&f.forest, &f.x).unwrap();
                let ate = ctx.ate(&f.y, Contrast::new(1, 0)).unwrap();
                out.push(ate.se);
                let _ = &f.d;
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let (m_small, m_large) = (median(&mut small), median(&mut large));
        assert!(
            m_large < m_small,
            "median SE at 4n ({m_large}) should fall below SE at n ({m_small})"
        );
    }

    #[test]
    fn deciles_partition_evenly() {
        let values: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let codes = discretize_deciles(&values);
        for dec in 0..10 {
            let count = codes.iter().filter(|&&c| c == dec as f64).count();
            assert_eq!(count, 20, "decile {dec}");
        }
    }
}
