//! Synthetic data-generating processes with known ground truth, a placebo
//! generator, and brute-force oracles anchoring the acceptance tests.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, ColumnSpec, Dataset, FeatureKind, FeatureMatrix, Role, Schema};
use crate::error::{Error, Result};
use crate::policy::{Constraints, PolicyScores};
use crate::rng;
use crate::support::SupportRule;

/// Analytic surface over the covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Constant(f64),
    /// `intercept + sum(slope * x[column])`.
    Linear {
        intercept: f64,
        terms: Vec<(usize, f64)>,
    },
    /// `below` where `x[column] <= threshold`, else `above`.
    StepAbove {
        column: usize,
        threshold: f64,
        below: f64,
        above: f64,
    },
}

impl Surface {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Surface::Constant(c) => *c,
            Surface::Linear { intercept, terms } => {
                intercept + terms.iter().map(|&(col, slope)| slope * x[col]).sum::<f64>()
            }
            Surface::StepAbove {
                column,
                threshold,
                below,
                above,
            } => {
                if x[*column] <= *threshold {
                    *below
                } else {
                    *above
                }
            }
        }
    }

    pub fn zero() -> Surface {
        Surface::Constant(0.0)
    }
}

/// Multinomial-logit utilities of one treatment arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityArm {
    pub intercept: f64,
    pub terms: Vec<(usize, f64)>,
}

impl PropensityArm {
    pub fn zero() -> Self {
        PropensityArm {
            intercept: 0.0,
            terms: Vec::new(),
        }
    }

    fn utility(&self, x: &[f64]) -> f64 {
        self.intercept + self.terms.iter().map(|&(col, s)| s * x[col]).sum::<f64>()
    }
}

/// Per-month effect multipliers for monthly outcome columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyTemplate {
    pub multipliers: Vec<f64>,
}

impl MonthlyTemplate {
    /// Lock-in shape: `lock_value` through `lock_until`, linear ramp to
    /// `final_value` at `ramp_end`, flat afterwards.
    pub fn lock_in(
        months: usize,
        lock_until: usize,
        lock_value: f64,
        ramp_end: usize,
        final_value: f64,
    ) -> Self {
        let multipliers = (1..=months)
            .map(|t| {
                if t <= lock_until {
                    lock_value
                } else if t >= ramp_end {
                    final_value
                } else {
                    let span = (ramp_end - lock_until) as f64;
                    let progress = (t - lock_until) as f64 / span;
                    lock_value + progress * (final_value - lock_value)
                }
            })
            .collect();
        MonthlyTemplate { multipliers }
    }
}

/// Synthetic data-generating process with analytically known propensities
/// and effect surfaces. Continuous covariates are standard normal;
/// categorical covariates are uniform over their codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub n_continuous: usize,
    /// Category counts of the categorical covariates.
    pub categorical: Vec<u32>,
    pub n_treatments: u32,
    /// One utility spec per arm; make arm 0 the zero reference.
    pub propensity: Vec<PropensityArm>,
    pub baseline: Surface,
    /// One effect surface per arm; arm 0 must be the zero surface.
    pub effects: Vec<Surface>,
    pub noise_sd: f64,
    /// Scales the noise sd by `0.5 + |x0|` for variance stress tests.
    pub heteroskedastic: bool,
    pub monthly: Option<MonthlyTemplate>,
    pub arm_names: Vec<String>,
    pub seed: u64,
}

impl DgpSpec {
    /// Minimal two-arm DGP with random assignment and a given effect.
    pub fn simple(n: usize, n_covariates: usize, effect: Surface, seed: u64) -> Self {
        DgpSpec {
            n,
            n_continuous: n_covariates,
            categorical: Vec::new(),
            n_treatments: 2,
            propensity: vec![PropensityArm::zero(), PropensityArm::zero()],
            baseline: Surface::zero(),
            effects: vec![Surface::zero(), effect],
            noise_sd: 1.0,
            heteroskedastic: false,
            monthly: None,
            arm_names: default_arm_names(2),
            seed,
        }
    }

    /// Five-arm programme-evaluation shape: selection on covariates,
    /// heterogeneous per-arm effects, and a 36-month lock-in curve.
    pub fn programme_shaped(n: usize, seed: u64) -> Self {
        DgpSpec {
            n,
            n_continuous: 6,
            categorical: vec![3, 2],
            n_treatments: 5,
            propensity: vec![
                PropensityArm::zero(),
                PropensityArm {
                    intercept: -0.4,
                    terms: vec![(0, 0.5), (2, -0.3)],
                },
                PropensityArm {
                    intercept: -0.6,
                    terms: vec![(1, 0.4)],
                },
                PropensityArm {
                    intercept: -0.9,
                    terms: vec![(0, -0.3), (3, 0.3)],
                },
                PropensityArm {
                    intercept: -1.1,
                    terms: vec![(1, -0.2), (4, 0.4)],
                },
            ],
            baseline: Surface::Linear {
                intercept: 8.0,
                terms: vec![(0, 1.0), (1, 0.6), (5, 0.4)],
            },
            effects: vec![
                Surface::zero(),
                Surface::Linear {
                    intercept: 0.9,
                    terms: vec![(0, 0.5)],
                },
                Surface::Linear {
                    intercept: 0.2,
                    terms: vec![(1, 0.4)],
                },
                Surface::StepAbove {
                    column: 2,
                    threshold: 0.0,
                    below: -0.2,
                    above: 0.5,
                },
                Surface::Linear {
                    intercept: -0.1,
                    terms: vec![(3, 0.3)],
                },
            ],
            noise_sd: 1.0,
            heteroskedastic: false,
            monthly: Some(MonthlyTemplate::lock_in(36, 6, -1.0, 24, 1.0)),
            arm_names: default_arm_names(5),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.n_treatments as usize;
        if self.n == 0 {
            return Err(Error::InvalidArgument {
                name: "n",
                message: "need at least one observation".into(),
            });
        }
        if k < 2 {
            return Err(Error::InvalidArgument {
                name: "n_treatments",
                message: "need at least two arms".into(),
            });
        }
        if self.propensity.len() != k || self.effects.len() != k {
            return Err(Error::InvalidArgument {
                name: "propensity",
                message: "one propensity arm and one effect surface per treatment".into(),
            });
        }
        if self.effects[0] != Surface::zero() {
            return Err(Error::InvalidArgument {
                name: "effects",
                message: "arm 0 is the reference and must carry the zero surface".into(),
            });
        }
        if self.noise_sd < 0.0 {
            return Err(Error::InvalidArgument {
                name: "noise_sd",
                message: "noise sd must be nonnegative".into(),
            });
        }
        Ok(())
    }

    pub fn n_covariates(&self) -> usize {
        self.n_continuous + self.categorical.len()
    }

    fn schema(&self) -> Schema {
        let mut columns = vec![ColumnSpec::new(
            "id",
            ColumnKind::Continuous,
            &[Role::Id],
        )];
        for j in 0..self.n_continuous {
            columns.push(ColumnSpec::new(
                &format!("x{j}"),
                ColumnKind::Continuous,
                &[Role::Confounder, Role::Policy],
            ));
        }
        for (q, &categories) in self.categorical.iter().enumerate() {
            columns.push(ColumnSpec::new(
                &format!("c{q}"),
                ColumnKind::UnorderedCategorical { categories },
                &[Role::Confounder, Role::Heterogeneity, Role::Balancing, Role::Policy],
            ));
        }
        columns.push(ColumnSpec::new(
            "d",
            ColumnKind::UnorderedCategorical {
                categories: self.n_treatments,
            },
            &[Role::Treatment],
        ));
        columns.push(ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]));
        if let Some(monthly) = &self.monthly {
            for t in 1..=monthly.multipliers.len() {
                columns.push(ColumnSpec::new(
                    &format!("y_m{t}"),
                    ColumnKind::Continuous,
                    &[Role::Outcome],
                ));
            }
        }
        Schema::new(columns).expect("generated schema is valid")
    }
}

pub fn default_arm_names(k: u32) -> Vec<String> {
    let canonical = ["NP", "WS", "BC", "TC", "EP"];
    (0..k as usize)
        .map(|a| {
            canonical
                .get(a)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("arm{a}"))
        })
        .collect()
}

/// Analytic truth emitted next to a generated dataset, keyed by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True assignment probabilities, n x K.
    pub propensities: Vec<Vec<f64>>,
    /// True effect surfaces tau_d(x) for the primary outcome, n x K.
    pub effects: Vec<Vec<f64>>,
    /// True potential-outcome means for the primary outcome, n x K.
    pub potential_means: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Mean of the true effects over the sample for a contrast.
    pub fn ate(&self, d: u32, d_prime: u32) -> f64 {
        let n = self.effects.len() as f64;
        self.effects
            .iter()
            .map(|row| row[d as usize] - row[d_prime as usize])
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// Draws a dataset from the process along with its ground truth.
pub fn generate(spec: &DgpSpec) -> Result<SyntheticData> {
    generate_impl(spec, false)
}

/// Placebo draw: treatment still depends on covariates, but outcomes are
/// generated with every effect surface forced to zero, so the true ATE of
/// every contrast is exactly zero.
pub fn generate_placebo(spec: &DgpSpec) -> Result<SyntheticData> {
    generate_impl(spec, true)
}

fn generate_impl(spec: &DgpSpec, placebo: bool) -> Result<SyntheticData> {
    spec.validate()?;
    let k = spec.n_treatments as usize;
    let p = spec.n_covariates();
    let mut rng = rng::rng_for(spec.seed, rng::stream::DGP, 0);

    let mut covariates = Vec::with_capacity(spec.n * p);
    let mut treatment = Vec::with_capacity(spec.n);
    let mut propensities = Vec::with_capacity(spec.n);
    let mut effects = Vec::with_capacity(spec.n);
    let mut potential_means = Vec::with_capacity(spec.n);
    let m = 1 + spec.monthly.as_ref().map_or(0, |t| t.multipliers.len());
    let mut outcomes = Vec::with_capacity(spec.n * m);

    for _ in 0..spec.n {
        let mut x = Vec::with_capacity(p);
        for _ in 0..spec.n_continuous {
            let v: f64 = StandardNormal.sample(&mut rng);
            x.push(v);
        }
        for &categories in &spec.categorical {
            x.push(rng.random_range(0..categories) as f64);
        }

        // Multinomial logit over the arms.
        let utilities: Vec<f64> = spec.propensity.iter().map(|arm| arm.utility(&x)).collect();
        let max_u = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = utilities.iter().map(|u| (u - max_u).exp()).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut draw = rng.random::<f64>();
        let mut d = k - 1;
        for (arm, &prob) in probs.iter().enumerate() {
            if draw < prob {
                d = arm;
                break;
            }
            draw -= prob;
        }

        let base = spec.baseline.eval(&x);
        let tau: Vec<f64> = spec
            .effects
            .iter()
            .map(|s| if placebo { 0.0 } else { s.eval(&x) })
            .collect();
        let sd = if spec.heteroskedastic {
            spec.noise_sd * (0.5 + x.first().map_or(0.0, |v| v.abs()))
        } else {
            spec.noise_sd
        };
        let noise: f64 = if sd > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        } else {
            0.0
        };
        outcomes.push(base + tau[d] + noise);
        if let Some(monthly) = &spec.monthly {
            for &mult in &monthly.multipliers {
                let noise_t: f64 = if sd > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                } else {
                    0.0
                };
                outcomes.push(base + mult * tau[d] + noise_t);
            }
        }

        potential_means.push(tau.iter().map(|t| base + t).collect());
        covariates.extend_from_slice(&x);
        treatment.push(d as u32);
        propensities.push(probs);
        effects.push(tau);
    }

    let dataset = Dataset::from_parts(spec.schema(), covariates, treatment, outcomes, None)?;
    Ok(SyntheticData {
        dataset,
        truth: GroundTruth {
            propensities,
            effects,
            potential_means,
        },
    })
}

// ---------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------

/// Outcome of the exhaustive policy-tree enumeration.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleOutcome {
    Optimal { value: f64, assignment: Vec<u32> },
    Infeasible,
}

/// Exhaustively enumerates every split structure of depth at most `depth`
/// and, per structure, every (feasible) leaf-assignment combination.
/// Intended for small instances: at most 200 rows, 4 features, 8 distinct
/// values per feature, depth 2 (3 for tiny row counts).
pub fn brute_force_tree_oracle(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    depth: usize,
    constraints: Option<&Constraints>,
) -> Result<OracleOutcome> {
    let n = scores.n_rows();
    if n == 0 || n > 200 {
        return Err(Error::InvalidArgument {
            name: "scores",
            message: "oracle handles 1..=200 rows".into(),
        });
    }
    if features.n_features() > 4 {
        return Err(Error::InvalidArgument {
            name: "features",
            message: "oracle handles at most 4 features".into(),
        });
    }
    if depth > 3 || (depth == 3 && n > 24) {
        return Err(Error::InvalidArgument {
            name: "depth",
            message: "oracle handles depth <= 2 (3 for n <= 24)".into(),
        });
    }
    for j in 0..features.n_features() {
        let mut distinct: Vec<u64> = (0..n).map(|r| features.value(r, j).to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() > 8 {
            return Err(Error::InvalidArgument {
                name: "features",
                message: format!("feature {j} has more than 8 distinct values"),
            });
        }
    }

    let k = scores.n_treatments();
    let caps: Option<Vec<Option<usize>>> = constraints.map(|c| {
        c.max_shares
            .iter()
            .map(|s| s.map(|share| (share * n as f64 + 1e-9).floor() as usize))
            .collect()
    });

    let rows: Vec<usize> = (0..n).collect();
    let mut partitions: Vec<Vec<Vec<usize>>> = Vec::new();
    enumerate_partitions(features, &rows, depth, &mut Vec::new(), &mut partitions);

    let mut best: Option<(f64, Vec<u32>)> = None;
    let mut any_feasible = false;
    for leaves in &partitions {
        match best_assignment(scores, leaves, k, caps.as_deref()) {
            Some((value, assignment)) => {
                any_feasible = true;
                if best.as_ref().map_or(true, |(bv, _)| value > *bv) {
                    best = Some((value, assignment));
                }
            }
            None => continue,
        }
    }
    match best {
        Some((value, assignment)) => Ok(OracleOutcome::Optimal {
            value: value / n as f64,
            assignment,
        }),
        None => {
            debug_assert!(!any_feasible);
            Ok(OracleOutcome::Infeasible)
        }
    }
}

/// Recursively enumerates leaf partitions reachable by depth-bounded trees
/// (including stopping early at any node).
fn enumerate_partitions(
    features: &FeatureMatrix,
    rows: &[usize],
    depth: usize,
    prefix: &mut Vec<Vec<usize>>,
    out: &mut Vec<Vec<Vec<usize>>>,
) {
    // Leaf here.
    let mut leaves = prefix.clone();
    leaves.push(rows.to_vec());
    out.push(leaves);

    if depth == 0 || rows.len() < 2 {
        return;
    }
    for feature in 0..features.n_features() {
        for rule in oracle_rules(features, rows, feature) {
            let (left, right): (Vec<usize>, Vec<usize>) = rows
                .iter()
                .partition(|&&r| rule.goes_left(features.value(r, feature)));
            if left.is_empty() || right.is_empty() {
                continue;
            }
            // All combinations of left subtrees x right subtrees.
            let mut left_parts = Vec::new();
            enumerate_partitions(features, &left, depth - 1, &mut Vec::new(), &mut left_parts);
            let mut right_parts = Vec::new();
            enumerate_partitions(features, &right, depth - 1, &mut Vec::new(), &mut right_parts);
            for lp in &left_parts {
                for rp in &right_parts {
                    let mut leaves = prefix.clone();
                    leaves.extend(lp.iter().cloned());
                    leaves.extend(rp.iter().cloned());
                    out.push(leaves);
                }
            }
        }
    }
}

fn oracle_rules(
    features: &FeatureMatrix,
    rows: &[usize],
    feature: usize,
) -> Vec<crate::forest::SplitRule> {
    use crate::forest::SplitRule;
    match features.kinds()[feature] {
        FeatureKind::Unordered { .. } => {
            let mut present: Vec<i64> = rows
                .iter()
                .map(|&r| features.value(r, feature) as i64)
                .collect();
            present.sort_unstable();
            present.dedup();
            if present.len() < 2 {
                return Vec::new();
            }
            let rest = &present[1..];
            let mut rules = Vec::new();
            for bits in 0..(1u64 << rest.len()) {
                if bits == (1u64 << rest.len()) - 1 {
                    continue;
                }
                let mut mask = 1u64 << present[0];
                for (idx, &code) in rest.iter().enumerate() {
                    if bits & (1u64 << idx) != 0 {
                        mask |= 1u64 << code;
                    }
                }
                rules.push(SplitRule::CategorySet(mask));
            }
            rules
        }
        _ => {
            let mut values: Vec<f64> = rows.iter().map(|&r| features.value(r, feature)).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            values.dedup();
            values
                .windows(2)
                .map(|w| SplitRule::Threshold(w[0] + (w[1] - w[0]) / 2.0))
                .collect()
        }
    }
}

/// Best per-leaf arm assignment for one partition; enumerates all
/// combinations when capacity caps apply.
fn best_assignment(
    scores: &PolicyScores,
    leaves: &[Vec<usize>],
    k: usize,
    caps: Option<&[Option<usize>]>,
) -> Option<(f64, Vec<u32>)> {
    let leaf_sums: Vec<Vec<f64>> = leaves
        .iter()
        .map(|rows| {
            (0..k)
                .map(|a| rows.iter().map(|&r| scores.net(r, a)).sum())
                .collect()
        })
        .collect();

    match caps {
        None => {
            let mut total = 0.0;
            let mut assignment_of_leaf = Vec::with_capacity(leaves.len());
            for sums in &leaf_sums {
                let mut best_arm = 0usize;
                for a in 1..k {
                    if sums[a] > sums[best_arm] {
                        best_arm = a;
                    }
                }
                total += sums[best_arm];
                assignment_of_leaf.push(best_arm as u32);
            }
            Some((total, flatten_assignment(scores, leaves, &assignment_of_leaf)))
        }
        Some(caps) => {
            let l = leaves.len();
            let mut best: Option<(f64, Vec<u32>)> = None;
            let mut combo = vec![0usize; l];
            loop {
                // Check feasibility of this combination.
                let mut counts = vec![0usize; k];
                for (leaf, &arm) in combo.iter().enumerate() {
                    counts[arm] += leaves[leaf].len();
                }
                let feasible = counts
                    .iter()
                    .zip(caps)
                    .all(|(&c, cap)| cap.map_or(true, |limit| c <= limit));
                if feasible {
                    let value: f64 = combo
                        .iter()
                        .enumerate()
                        .map(|(leaf, &arm)| leaf_sums[leaf][arm])
                        .sum();
                    if best.as_ref().map_or(true, |(bv, _)| value > *bv) {
                        let arms: Vec<u32> = combo.iter().map(|&a| a as u32).collect();
                        best = Some((value, flatten_assignment(scores, leaves, &arms)));
                    }
                }
                // Next combination.
                let mut pos = 0;
                loop {
                    if pos == l {
                        return best;
                    }
                    combo[pos] += 1;
                    if combo[pos] < k {
                        break;
                    }
                    combo[pos] = 0;
                    pos += 1;
                }
            }
        }
    }
}

fn flatten_assignment(
    scores: &PolicyScores,
    leaves: &[Vec<usize>],
    arm_of_leaf: &[u32],
) -> Vec<u32> {
    let mut assignment = vec![0u32; scores.n_rows()];
    for (leaf, rows) in leaves.iter().enumerate() {
        for &r in rows {
            assignment[r] = arm_of_leaf[leaf];
        }
    }
    assignment
}

/// Random small policy instance on binary features with quarter-integer
/// scores (sums stay exact in floating point), optionally with one
/// capacity constraint. Shared by the unit tests, the acceptance suite,
/// and the self-check command.
pub fn random_policy_instance(
    seed: u64,
    constrained: bool,
) -> (PolicyScores, FeatureMatrix, Option<Constraints>) {
    let mut rng = rng::rng_for(seed, rng::stream::DGP, 17);
    let n = rng.random_range(20..=200);
    let p = rng.random_range(2..=4);
    let k = rng.random_range(2..=3);
    let values: Vec<f64> = (0..n * k)
        .map(|_| rng.random_range(-32i32..=32) as f64 * 0.25)
        .collect();
    let scores = PolicyScores::new(n, k, values).expect("valid scores");
    let fvals: Vec<f64> = (0..n * p)
        .map(|_| rng.random_range(0..2) as f64)
        .collect();
    let features = FeatureMatrix::new(
        n,
        fvals,
        vec![FeatureKind::Ordered { categories: 2 }; p],
        (0..p).map(|j| format!("v{j}")).collect(),
    );
    let constraints = constrained.then(|| {
        let capped_arm = rng.random_range(1..k);
        Constraints {
            max_shares: (0..k)
                .map(|a| (a == capped_arm).then(|| rng.random_range(0.2..0.6)))
                .collect(),
        }
    });
    (scores, features, constraints)
}

/// Literal restatement of the trimming rule for oracle checks: per
/// propensity column, group extrema (or nearest-rank quantiles) bound the
/// support; a row survives only if every column lies within bounds.
pub fn naive_trim_mask(
    propensities: &[Vec<f64>],
    groups: &[u32],
    n_treatments: u32,
    rule: SupportRule,
) -> Vec<bool> {
    let k = n_treatments as usize;
    let mut keep = vec![true; propensities.len()];
    for d in 0..k {
        let mut lower = f64::NEG_INFINITY;
        let mut upper = f64::INFINITY;
        for g in 0..n_treatments {
            let mut values: Vec<f64> = propensities
                .iter()
                .zip(groups)
                .filter(|(_, &gi)| gi == g)
                .map(|(row, _)| row[d])
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (lo, hi) = match rule {
                SupportRule::MinMax => (values[0], values[values.len() - 1]),
                SupportRule::Quantile { q_low, q_high } => (
                    crate::stats::nearest_rank_quantile(&values, q_low),
                    crate::stats::nearest_rank_quantile(&values, q_high),
                ),
            };
            lower = lower.max(lo);
            upper = upper.min(hi);
        }
        for (i, row) in propensities.iter().enumerate() {
            if row[d] < lower || row[d] > upper {
                keep[i] = false;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{fit_policy_tree, ConstraintSolver, PolicyTreeParams};
    use crate::stats::mean;

    #[test]
    fn same_seed_identical_dataset() {
        let spec = DgpSpec::programme_shaped(300, 42);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate(&DgpSpec::programme_shaped(300, 43)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn noiseless_constant_effect_contrast_exact() {
        // noise sd 0, tau constant, baseline 0, random assignment: the
        // observed group-mean contrast equals the constant exactly.
        let mut spec = DgpSpec::simple(500, 3, Surface::Constant(2.5), 11);
        spec.noise_sd = 0.0;
        let data = generate(&spec).unwrap();
        let y = data.dataset.outcome_column(0);
        let d = data.dataset.treatment();
        let treated: Vec<f64> = (0..500).filter(|&r| d[r] == 1).map(|r| y[r]).collect();
        let control: Vec<f64> = (0..500).filter(|&r| d[r] == 0).map(|r| y[r]).collect();
        assert_eq!(mean(&treated) - mean(&control), 2.5);
    }

    #[test]
    fn zero_coefficients_give_uniform_shares() {
        let spec = DgpSpec::simple(4000, 2, Surface::Constant(1.0), 12);
        let data = generate(&spec).unwrap();
        let treated = data.dataset.rows_with_treatment(1).len() as f64;
        let n = 4000.0f64;
        // Binomial check at 3 standard errors around one half.
        let se: f64 = (0.5 * 0.5 / n).sqrt();
        assert!(
            (treated / n - 0.5).abs() <= 3.0 * se,
            "share = {}",
            treated / n
        );
        // True propensities are exactly uniform.
        assert!(data
            .truth
            .propensities
            .iter()
            .all(|row| (row[0] - 0.5).abs() < 1e-12));
    }

    #[test]
    fn ground_truth_ate_is_mean_of_effects() {
        let spec = DgpSpec::programme_shaped(800, 13);
        let data = generate(&spec).unwrap();
        for d in 1..5u32 {
            let by_hand = data
                .truth
                .effects
                .iter()
                .map(|row| row[d as usize])
                .sum::<f64>()
                / 800.0;
            assert!((data.truth.ate(d, 0) - by_hand).abs() < 1e-12);
        }
    }

    #[test]
    fn placebo_truth_is_exactly_zero() {
        let mut spec = DgpSpec::simple(400, 3, Surface::Constant(3.0), 14);
        spec.propensity[1] = PropensityArm {
            intercept: 0.3,
            terms: vec![(0, 0.8)],
        };
        let data = generate_placebo(&spec).unwrap();
        assert_eq!(data.truth.ate(1, 0), 0.0);
        assert!(data
            .truth
            .effects
            .iter()
            .all(|row| row.iter().all(|&t| t == 0.0)));
    }

    #[test]
    fn placebo_selection_biases_naive_contrast() {
        // Strong selection on a baseline driver: the naive group contrast
        // is far from zero even though the true effect is zero.
        let mut spec = DgpSpec::simple(3000, 3, Surface::Constant(0.0), 15);
        spec.baseline = Surface::Linear {
            intercept: 0.0,
            terms: vec![(0, 2.0)],
        };
        spec.propensity[1] = PropensityArm {
            intercept: 0.0,
            terms: vec![(0, 1.5)],
        };
        spec.noise_sd = 0.5;
        let data = generate_placebo(&spec).unwrap();
        let y = data.dataset.outcome_column(0);
        let d = data.dataset.treatment();
        let treated: Vec<f64> = (0..3000).filter(|&r| d[r] == 1).map(|r| y[r]).collect();
        let control: Vec<f64> = (0..3000).filter(|&r| d[r] == 0).map(|r| y[r]).collect();
        let naive = mean(&treated) - mean(&control);
        assert!(naive.abs() > 0.5, "selection should bias the naive contrast, got {naive}");
    }

    #[test]
    fn monthly_columns_present_and_shaped() {
        let spec = DgpSpec::programme_shaped(100, 16);
        let data = generate(&spec).unwrap();
        assert_eq!(data.dataset.n_outcomes(), 37); // y + 36 months
        let template = MonthlyTemplate::lock_in(36, 6, -1.0, 24, 1.0);
        assert_eq!(template.multipliers.len(), 36);
        assert!(template.multipliers[..6].iter().all(|&m| m == -1.0));
        assert!(template.multipliers[23..].iter().all(|&m| m == 1.0));
        assert!(template.multipliers[6] > -1.0 && template.multipliers[6] < 1.0);
    }

    #[test]
    fn oracle_four_row_instance_value_four() {
        let scores = PolicyScores::new(
            4,
            2,
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let features = FeatureMatrix::new(
            4,
            vec![0.0, 0.0, 1.0, 1.0],
            vec![FeatureKind::Ordered { categories: 2 }],
            vec!["x".into()],
        );
        match brute_force_tree_oracle(&scores, &features, 1, None).unwrap() {
            OracleOutcome::Optimal { value, assignment } => {
                assert!((value * 4.0 - 4.0).abs() < 1e-12);
                assert_eq!(assignment, vec![0, 0, 1, 1]);
            }
            OracleOutcome::Infeasible => panic!("feasible instance"),
        }
    }

    #[test]
    fn oracle_depth_zero_is_max_column_sum() {
        let scores =
            PolicyScores::new(3, 3, vec![1., 5., 0., 2., 5., 0., 3., 5., 0.]).unwrap();
        let features = FeatureMatrix::continuous(3, 1, vec![0.0, 1.0, 2.0]);
        match brute_force_tree_oracle(&scores, &features, 0, None).unwrap() {
            OracleOutcome::Optimal { value, assignment } => {
                assert!((value * 3.0 - 15.0).abs() < 1e-12);
                assert_eq!(assignment, vec![1, 1, 1]);
            }
            OracleOutcome::Infeasible => panic!("feasible instance"),
        }
    }

    #[test]
    fn oracle_reports_infeasible() {
        let scores = PolicyScores::new(4, 2, vec![1.0; 8]).unwrap();
        let features = FeatureMatrix::continuous(4, 1, vec![0., 1., 2., 3.]);
        let constraints = Constraints {
            max_shares: vec![Some(0.25), Some(0.25)],
        };
        let outcome =
            brute_force_tree_oracle(&scores, &features, 2, Some(&constraints)).unwrap();
        assert_eq!(outcome, OracleOutcome::Infeasible);
    }

    #[test]
    fn search_matches_oracle_on_random_instances() {
        // Smaller cousin of the acceptance criterion: 30 random instances,
        // half constrained, exact value agreement.
        for seed in 0..30u64 {
            let constrained = seed % 2 == 1;
            let (scores, features, constraints) = random_policy_instance(seed, constrained);
            let params = PolicyTreeParams {
                depth: 2,
                approx_stride_base: 2,
                solver: ConstraintSolver::Exact,
            };
            let cons = constraints.clone().unwrap_or_else(|| {
                crate::policy::Constraints::none(scores.n_treatments())
            });
            let tree = fit_policy_tree(&scores, &features, &cons, &params).unwrap();
            match brute_force_tree_oracle(&scores, &features, 2, constraints.as_ref()).unwrap()
            {
                OracleOutcome::Optimal { value, .. } => {
                    assert_eq!(
                        tree.value, value,
                        "seed {seed}: search {} vs oracle {value}",
                        tree.value
                    );
                }
                OracleOutcome::Infeasible => panic!("generator keeps instances feasible"),
            }
        }
    }

    #[test]
    fn naive_trim_mask_matches_module() {
        let mut rng = crate::rng::rng_for(21, 70, 0);
        for _ in 0..20 {
            let mut propensities = Vec::new();
            let mut groups = Vec::new();
            for g in 0..2u32 {
                for _ in 0..12 {
                    let p0: f64 = rng.random_range(0.1..0.9);
                    propensities.push(vec![p0, 1.0 - p0]);
                    groups.push(g);
                }
            }
            let report =
                crate::support::trim(&propensities, &groups, 2, SupportRule::MinMax).unwrap();
            let naive = naive_trim_mask(&propensities, &groups, 2, SupportRule::MinMax);
            assert_eq!(report.keep, naive);
        }
    }
}
