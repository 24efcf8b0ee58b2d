//! Optimal policy learning: exhaustive depth-bounded tree search over
//! policy scores, capacity constraints, sequential deeper trees, best-score
//! and random baselines, and policy-value evaluation.
//!
//! The search recursively enumerates every split (thresholds between
//! distinct values, category subsets for unordered features) and picks the
//! assignment maximizing the summed, cost-shifted scores. Candidate
//! thresholds thin geometrically below the root (stride `base^level`), so
//! the root keeps the finest grid. Capacity constraints come in two forms:
//! an exact dynamic program over per-arm usage counts (small instances),
//! and per-arm costs found by bisection until the in-sample shares respect
//! the caps, which stay independent of the policy class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::forest::SplitRule;
use crate::rng;

/// Policy scores theta_i(d): one row per observation, one column per arm,
/// with optional per-arm costs subtracted from the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScores {
    n: usize,
    k: usize,
    values: Vec<f64>,
    /// Economic cost per arm, subtracted from its scores; defaults to 0.
    pub costs: Vec<f64>,
}

impl PolicyScores {
    pub fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * k {
            return Err(Error::InvalidArgument {
                name: "values",
                message: format!("expected {} score entries, got {}", n * k, values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                name: "values",
                message: "scores must be finite".into(),
            });
        }
        Ok(PolicyScores {
            n,
            k,
            values,
            costs: vec![0.0; k],
        })
    }

    pub fn with_costs(mut self, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != self.k {
            return Err(Error::InvalidArgument {
                name: "costs",
                message: "one cost per treatment arm required".into(),
            });
        }
        self.costs = costs;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_treatments(&self) -> usize {
        self.k
    }

    /// Raw score.
    #[inline]
    pub fn value(&self, row: usize, arm: usize) -> f64 {
        self.values[row * self.k + arm]
    }

    /// Score net of the economic cost.
    #[inline]
    pub fn net(&self, row: usize, arm: usize) -> f64 {
        self.values[row * self.k + arm] - self.costs[arm]
    }
}

/// Per-arm maximum assignment shares; `None` leaves an arm unconstrained
/// (the control arm by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub max_shares: Vec<Option<f64>>,
}

impl Constraints {
    pub fn none(k: usize) -> Self {
        Constraints {
            max_shares: vec![None; k],
        }
    }

    /// Caps every arm except `control` at the given shares.
    pub fn capped_except(control: u32, shares: &[f64]) -> Self {
        Constraints {
            max_shares: shares
                .iter()
                .enumerate()
                .map(|(a, &s)| (a as u32 != control).then_some(s))
                .collect(),
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        self.max_shares.iter().all(|s| s.is_none())
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.max_shares.len() != k {
            return Err(Error::InvalidArgument {
                name: "constraints",
                message: "one share cap per treatment arm required".into(),
            });
        }
        let mut total = 0.0;
        let mut any_open = false;
        for share in &self.max_shares {
            match share {
                Some(s) if !(0.0..=1.0).contains(s) => {
                    return Err(Error::InvalidArgument {
                        name: "constraints",
                        message: format!("share cap {s} outside [0, 1]"),
                    })
                }
                Some(s) => total += s,
                None => any_open = true,
            }
        }
        if !any_open && total < 1.0 - 1e-9 {
            return Err(Error::Infeasible(format!(
                "share caps sum to {total} with no unconstrained arm"
            )));
        }
        Ok(())
    }

    /// Integer caps on n rows; a share cap s admits floor(s * n) rows.
    fn cap_counts(&self, n: usize) -> Vec<Option<usize>> {
        self.max_shares
            .iter()
            .map(|s| s.map(|share| (share * n as f64 + 1e-9).floor() as usize))
            .collect()
    }
}

/// Constraint mechanism used by the tree search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSolver {
    /// Exact dynamic program over per-arm usage counts. Exponential in the
    /// number of constrained arms; intended for small instances.
    Exact,
    /// Per-arm costs raised by bisection until in-sample shares fall at or
    /// below the caps (tolerance: one observation).
    #[default]
    Costs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTreeParams {
    pub depth: usize,
    /// Threshold-grid stride base below the root; 1 disables thinning.
    pub approx_stride_base: usize,
    pub solver: ConstraintSolver,
}

impl Default for PolicyTreeParams {
    fn default() -> Self {
        PolicyTreeParams {
            depth: 2,
            approx_stride_base: 2,
            solver: ConstraintSolver::Costs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyNode {
    Leaf {
        treatment: u32,
        n_rows: usize,
    },
    Split {
        feature: usize,
        rule: SplitRule,
        left: Box<PolicyNode>,
        right: Box<PolicyNode>,
    },
}

impl PolicyNode {
    pub fn assign(&self, row: &[f64]) -> u32 {
        match self {
            PolicyNode::Leaf { treatment, .. } => *treatment,
            PolicyNode::Split {
                feature,
                rule,
                left,
                right,
            } => {
                if rule.goes_left(row[*feature]) {
                    left.assign(row)
                } else {
                    right.assign(row)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            PolicyNode::Leaf { .. } => 0,
            PolicyNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn render(&self, names: &[String], indent: usize, out: &mut String) {
        let pad = "  ".repeat(indent);
        match self {
            PolicyNode::Leaf { treatment, n_rows } => {
                out.push_str(&format!("{pad}assign arm {treatment} ({n_rows} rows)\n"));
            }
            PolicyNode::Split {
                feature,
                rule,
                left,
                right,
            } => {
                let name = names
                    .get(*feature)
                    .cloned()
                    .unwrap_or_else(|| format!("x{feature}"));
                match rule {
                    SplitRule::Threshold(t) => {
                        out.push_str(&format!("{pad}if {name} <= {t}:\n"));
                    }
                    SplitRule::CategorySet(mask) => {
                        let cats: Vec<String> = (0..64)
                            .filter(|c| mask & (1u64 << c) != 0)
                            .map(|c| c.to_string())
                            .collect();
                        out.push_str(&format!("{pad}if {name} in {{{}}}:\n", cats.join(", ")));
                    }
                }
                left.render(names, indent + 1, out);
                out.push_str(&format!("{pad}else:\n"));
                right.render(names, indent + 1, out);
            }
        }
    }
}

/// Depth-bounded policy tree with its in-sample value and shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub root: PolicyNode,
    pub depth_bound: usize,
    /// Mean per-capita value on the training sample (net of economic
    /// costs, unshifted by any constraint costs).
    pub value: f64,
    /// In-sample assignment shares per arm.
    pub shares: Vec<f64>,
    /// Constraint costs applied by the bisection mechanism (zero
    /// otherwise).
    pub constraint_costs: Vec<f64>,
}

impl PolicyTree {
    pub fn assignments(&self, features: &FeatureMatrix) -> Vec<u32> {
        (0..features.n_rows())
            .map(|r| self.root.assign(features.row(r)))
            .collect()
    }

    /// Indented text rendering with feature names.
    pub fn render(&self, names: &[String]) -> String {
        let mut out = String::new();
        self.root.render(names, 0, &mut out);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Realized value and shares of an assignment under a score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub value: f64,
    pub shares: Vec<f64>,
    pub n: usize,
}

/// Splits rows into disjoint, exhaustive train/estimation/validation sets,
/// stratified by treatment. Within each stratum rows are shuffled, then a
/// running max-deficit quota keeps every prefix near the target fractions,
/// so the global sizes are exact for compatible n.
pub fn three_way_split(
    treatment: &[u32],
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::InvalidArgument {
            name: "fractions",
            message: "fractions must be positive and sum to 1".into(),
        });
    }
    let mut strata: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &d) in treatment.iter().enumerate() {
        strata.entry(d).or_default().push(i);
    }
    let mut rng = rng::rng_for(seed, rng::stream::SUBSAMPLE, 0);
    let mut splits: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut assigned = [0f64; 3];
    let mut step = 0f64;
    for rows in strata.values() {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        for &row in &rows {
            step += 1.0;
            // Deficit = target count so far minus assigned count.
            let mut best = 0;
            let mut best_deficit = f64::NEG_INFINITY;
            for s in 0..3 {
                let deficit = fractions[s] * step - assigned[s];
                if deficit > best_deficit {
                    best_deficit = deficit;
                    best = s;
                }
            }
            assigned[best] += 1.0;
            splits[best].push(row);
        }
    }
    for split in splits.iter_mut() {
        split.sort_unstable();
    }
    Ok(splits)
}

/// Fits the optimal depth-bounded policy tree by exhaustive recursive
/// search; lower-indexed features and thresholds win ties, leaf ties go to
/// the lowest treatment label.
pub fn fit_policy_tree(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    constraints: &Constraints,
    params: &PolicyTreeParams,
) -> Result<PolicyTree> {
    validate_inputs(scores, features, params)?;
    constraints.validate(scores.k)?;
    let rows: Vec<usize> = (0..scores.n).collect();

    if constraints.is_unconstrained() {
        let searcher = Searcher::new(scores, features, params, vec![0.0; scores.k]);
        let (_, root) = searcher.search(&rows, params.depth, 0);
        return Ok(finish_tree(scores, features, root, params.depth, vec![0.0; scores.k]));
    }

    match params.solver {
        ConstraintSolver::Exact => fit_exact(scores, features, constraints, params, &rows),
        ConstraintSolver::Costs => fit_with_costs(scores, features, constraints, params, &rows),
    }
}

/// Sequential deeper tree: an optimal `depth_a` tree, then an independent
/// `depth_b` tree inside each of its leaves. The composite weakly improves
/// on the base tree in-sample but is not globally optimal. Constrained
/// composites use the cost mechanism, with the bisection run on the
/// composite's shares.
pub fn fit_sequential_tree(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    constraints: &Constraints,
    depth_a: usize,
    depth_b: usize,
    params: &PolicyTreeParams,
) -> Result<PolicyTree> {
    let base_params = PolicyTreeParams {
        depth: depth_a,
        ..params.clone()
    };
    validate_inputs(scores, features, &base_params)?;
    constraints.validate(scores.k)?;
    if depth_b == 0 {
        return fit_policy_tree(scores, features, constraints, &base_params);
    }

    let rows: Vec<usize> = (0..scores.n).collect();
    if constraints.is_unconstrained() {
        let searcher = Searcher::new(scores, features, &base_params, vec![0.0; scores.k]);
        let root = build_sequential(&searcher, &rows, depth_a, depth_b);
        return Ok(finish_tree(
            scores,
            features,
            root,
            depth_a + depth_b,
            vec![0.0; scores.k],
        ));
    }
    if params.solver == ConstraintSolver::Exact {
        return Err(Error::InvalidArgument {
            name: "solver",
            message: "sequential trees support the cost mechanism only".into(),
        });
    }
    let caps = constraints.cap_counts(rows.len());
    let build = |costs: &[f64]| -> PolicyNode {
        let searcher = Searcher::new(scores, features, &base_params, costs.to_vec());
        build_sequential(&searcher, &rows, depth_a, depth_b)
    };
    let (root, costs) = bisect_costs(scores, features, &caps, &rows, build)?;
    Ok(finish_tree(scores, features, root, depth_a + depth_b, costs))
}

fn build_sequential(
    searcher: &Searcher<'_>,
    rows: &[usize],
    depth_a: usize,
    depth_b: usize,
) -> PolicyNode {
    let (_, base) = searcher.search(rows, depth_a, 0);
    refine_leaves(searcher, base, rows, depth_b, depth_a)
}

fn refine_leaves(
    searcher: &Searcher<'_>,
    node: PolicyNode,
    rows: &[usize],
    depth_b: usize,
    level: usize,
) -> PolicyNode {
    match node {
        PolicyNode::Leaf { .. } => {
            let (_, refined) = searcher.search(rows, depth_b, level);
            refined
        }
        PolicyNode::Split {
            feature,
            rule,
            left,
            right,
        } => {
            let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                .iter()
                .partition(|&&r| rule.goes_left(searcher.features.value(r, feature)));
            let left = refine_leaves(searcher, *left, &left_rows, depth_b, level + 1);
            let right = refine_leaves(searcher, *right, &right_rows, depth_b, level + 1);
            PolicyNode::Split {
                feature,
                rule,
                left: Box::new(left),
                right: Box::new(right),
            }
        }
    }
}

/// Assigns each row the arm with its highest net score. With constraints,
/// rows are processed in descending best-minus-second-best gap order and
/// receive their best arm with remaining capacity (greedy heuristic).
pub fn best_score_allocation(
    scores: &PolicyScores,
    constraints: Option<&Constraints>,
) -> Result<Vec<u32>> {
    let k = scores.k;
    let argmax_row = |r: usize, open: &dyn Fn(usize) -> bool| -> Option<u32> {
        let mut best: Option<(f64, u32)> = None;
        for a in 0..k {
            if !open(a) {
                continue;
            }
            let v = scores.net(r, a);
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, a as u32));
            }
        }
        best.map(|(_, a)| a)
    };

    match constraints {
        None => Ok((0..scores.n)
            .map(|r| argmax_row(r, &|_| true).expect("k >= 1"))
            .collect()),
        Some(constraints) => {
            constraints.validate(k)?;
            if constraints.is_unconstrained() {
                return best_score_allocation(scores, None);
            }
            let caps = constraints.cap_counts(scores.n);
            // Order rows by the gap between the best and second-best arm.
            let mut order: Vec<(f64, usize)> = (0..scores.n)
                .map(|r| {
                    let mut values: Vec<f64> = (0..k).map(|a| scores.net(r, a)).collect();
                    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    let gap = if k > 1 { values[0] - values[1] } else { 0.0 };
                    (gap, r)
                })
                .collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

            let mut used = vec![0usize; k];
            let mut assignment = vec![0u32; scores.n];
            for (_, r) in order {
                let open = |a: usize| caps[a].map_or(true, |cap| used[a] < cap);
                let arm = argmax_row(r, &open).ok_or_else(|| {
                    Error::Infeasible("all arms at capacity".into())
                })?;
                used[arm as usize] += 1;
                assignment[r] = arm;
            }
            Ok(assignment)
        }
    }
}

/// Random assignment hitting exact per-arm counts (largest-remainder
/// rounding of the shares), shuffled deterministically.
pub fn random_allocation(shares: &[f64], n: usize, seed: u64) -> Result<Vec<u32>> {
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-6 || shares.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidArgument {
            name: "shares",
            message: "shares must be nonnegative and sum to 1".into(),
        });
    }
    let ideal: Vec<f64> = shares.iter().map(|&s| s * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|&v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Largest fractional remainders get the leftover units; ties go to the
    // lowest arm label.
    let mut remainders: Vec<(f64, usize)> = ideal
        .iter()
        .enumerate()
        .map(|(a, &v)| (v - v.floor(), a))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for i in 0..n - assigned {
        counts[remainders[i % remainders.len()].1] += 1;
    }
    let mut assignment: Vec<u32> = Vec::with_capacity(n);
    for (a, &c) in counts.iter().enumerate() {
        assignment.extend(std::iter::repeat(a as u32).take(c));
    }
    let mut rng = rng::rng_for(seed, rng::stream::ALLOC, 0);
    assignment.shuffle(&mut rng);
    Ok(assignment)
}

/// Mean per-capita value of an assignment under a score matrix (estimated
/// scores or true potential outcomes), with realized shares.
pub fn evaluate_policy(assignment: &[u32], scores: &PolicyScores) -> Result<PolicyValue> {
    if assignment.len() != scores.n {
        return Err(Error::InvalidArgument {
            name: "assignment",
            message: "length does not match the score matrix".into(),
        });
    }
    let mut total = 0.0;
    let mut shares = vec![0.0; scores.k];
    for (r, &a) in assignment.iter().enumerate() {
        if a as usize >= scores.k {
            return Err(Error::InvalidArgument {
                name: "assignment",
                message: format!("arm {a} outside 0..{}", scores.k),
            });
        }
        total += scores.net(r, a as usize);
        shares[a as usize] += 1.0;
    }
    let n = scores.n;
    for s in shares.iter_mut() {
        *s /= n as f64;
    }
    Ok(PolicyValue {
        value: if n == 0 { 0.0 } else { total / n as f64 },
        shares,
        n,
    })
}

// ---------------------------------------------------------------------
// Search internals
// ---------------------------------------------------------------------

fn validate_inputs(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    params: &PolicyTreeParams,
) -> Result<()> {
    if scores.n == 0 {
        return Err(Error::InvalidArgument {
            name: "scores",
            message: "empty score matrix".into(),
        });
    }
    if features.n_rows() != scores.n {
        return Err(Error::InvalidArgument {
            name: "features",
            message: "feature rows do not match scores".into(),
        });
    }
    if params.depth == 0 || params.depth > 4 {
        return Err(Error::InvalidArgument {
            name: "depth",
            message: "optimal search supports depths 1..=4".into(),
        });
    }
    if params.approx_stride_base == 0 {
        return Err(Error::InvalidArgument {
            name: "approx_stride_base",
            message: "must be at least 1".into(),
        });
    }
    for (j, kind) in features.kinds().iter().enumerate() {
        if let FeatureKind::Unordered { categories } = kind {
            if *categories > 16 {
                return Err(Error::InvalidArgument {
                    name: "features",
                    message: format!(
                        "policy feature {j}: subset enumeration capped at 16 categories"
                    ),
                });
            }
        }
    }
    Ok(())
}

fn finish_tree(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    root: PolicyNode,
    depth_bound: usize,
    constraint_costs: Vec<f64>,
) -> PolicyTree {
    let assignment: Vec<u32> = (0..scores.n)
        .map(|r| root.assign(features.row(r)))
        .collect();
    let value = evaluate_policy(&assignment, scores).expect("assignment from own tree");
    PolicyTree {
        root,
        depth_bound,
        value: value.value,
        shares: value.shares,
        constraint_costs,
    }
}

struct Searcher<'a> {
    scores: &'a PolicyScores,
    features: &'a FeatureMatrix,
    stride_base: usize,
    /// Constraint costs subtracted on top of the economic costs.
    mech_costs: Vec<f64>,
}

impl<'a> Searcher<'a> {
    fn new(
        scores: &'a PolicyScores,
        features: &'a FeatureMatrix,
        params: &PolicyTreeParams,
        mech_costs: Vec<f64>,
    ) -> Self {
        Searcher {
            scores,
            features,
            stride_base: params.approx_stride_base,
            mech_costs,
        }
    }

    #[inline]
    fn shifted(&self, row: usize, arm: usize) -> f64 {
        self.scores.net(row, arm) - self.mech_costs[arm]
    }

    /// Candidate split rules for one feature at a given depth level.
    fn candidates(&self, rows: &[usize], feature: usize, level: usize) -> Vec<SplitRule> {
        match self.features.kinds()[feature] {
            FeatureKind::Unordered { .. } => {
                let mut present: Vec<i64> = rows
                    .iter()
                    .map(|&r| self.features.value(r, feature) as i64)
                    .collect();
                present.sort_unstable();
                present.dedup();
                if present.len() < 2 {
                    return Vec::new();
                }
                // Canonical subsets: the lowest present code stays left.
                let rest = &present[1..];
                let mut rules = Vec::new();
                for bits in 0..(1u64 << rest.len()) {
                    if bits == (1u64 << rest.len()) - 1 {
                        continue; // full set leaves the right side empty
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
                let mut values: Vec<f64> = rows
                    .iter()
                    .map(|&r| self.features.value(r, feature))
                    .collect();
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                values.dedup();
                if values.len() < 2 {
                    return Vec::new();
                }
                let stride = self.stride_base.pow(level as u32).max(1);
                (0..values.len() - 1)
                    .step_by(stride)
                    .map(|i| SplitRule::Threshold(values[i] + (values[i + 1] - values[i]) / 2.0))
                    .collect()
            }
        }
    }

    /// Best leaf for `rows`: the arm maximizing the summed shifted scores;
    /// ties go to the lowest label.
    fn best_leaf(&self, rows: &[usize]) -> (f64, PolicyNode) {
        let k = self.scores.k;
        let mut best_arm = 0usize;
        let mut best_value = f64::NEG_INFINITY;
        for a in 0..k {
            let value: f64 = rows.iter().map(|&r| self.shifted(r, a)).sum();
            if value > best_value {
                best_value = value;
                best_arm = a;
            }
        }
        (
            best_value,
            PolicyNode::Leaf {
                treatment: best_arm as u32,
                n_rows: rows.len(),
            },
        )
    }

    /// Exhaustive search for the best tree of depth at most `depth`.
    /// Returns the total shifted value and the tree. The root level
    /// parallelizes across features; determinism is preserved by reducing
    /// in feature order.
    fn search(&self, rows: &[usize], depth: usize, level: usize) -> (f64, PolicyNode) {
        let leaf = self.best_leaf(rows);
        if depth == 0 || rows.len() < 2 {
            return leaf;
        }
        let p = self.features.n_features();

        let eval_feature = |feature: usize| -> Option<(f64, PolicyNode)> {
            let mut best: Option<(f64, PolicyNode)> = None;
            for rule in self.candidates(rows, feature, level) {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&r| rule.goes_left(self.features.value(r, feature)));
                if left_rows.is_empty() || right_rows.is_empty() {
                    continue;
                }
                let (lv, lt) = self.search(&left_rows, depth - 1, level + 1);
                let (rv, rt) = self.search(&right_rows, depth - 1, level + 1);
                let value = lv + rv;
                if best.as_ref().map_or(true, |(bv, _)| value > *bv) {
                    best = Some((
                        value,
                        PolicyNode::Split {
                            feature,
                            rule,
                            left: Box::new(lt),
                            right: Box::new(rt),
                        },
                    ));
                }
            }
            best
        };

        let per_feature: Vec<Option<(f64, PolicyNode)>> = if level == 0 && rows.len() > 256 {
            (0..p).into_par_iter().map(eval_feature).collect()
        } else {
            (0..p).map(eval_feature).collect()
        };

        let mut best = leaf;
        for candidate in per_feature.into_iter().flatten() {
            if candidate.0 > best.0 {
                best = candidate;
            }
        }
        best
    }

    /// Exact constrained search: a map from per-constrained-arm usage
    /// counts to the best achievable shifted value and tree.
    fn search_exact(
        &self,
        rows: &[usize],
        depth: usize,
        level: usize,
        constrained: &[usize],
        caps: &[usize],
    ) -> BTreeMap<Vec<u32>, (f64, PolicyNode)> {
        let k = self.scores.k;
        let mut out: BTreeMap<Vec<u32>, (f64, PolicyNode)> = BTreeMap::new();
        let mut insert = |usage: Vec<u32>, value: f64, node: PolicyNode| {
            match out.get(&usage) {
                Some((existing, _)) if *existing >= value => {}
                _ => {
                    out.insert(usage, (value, node));
                }
            }
        };

        // Leaf options.
        for a in 0..k {
            let usage: Vec<u32> = constrained
                .iter()
                .map(|&c| if c == a { rows.len() as u32 } else { 0 })
                .collect();
            if usage
                .iter()
                .zip(caps)
                .any(|(&u, &cap)| u as usize > cap)
            {
                continue;
            }
            let value: f64 = rows.iter().map(|&r| self.shifted(r, a)).sum();
            insert(
                usage,
                value,
                PolicyNode::Leaf {
                    treatment: a as u32,
                    n_rows: rows.len(),
                },
            );
        }

        if depth == 0 || rows.len() < 2 {
            return out;
        }

        for feature in 0..self.features.n_features() {
            for rule in self.candidates(rows, feature, level) {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&r| rule.goes_left(self.features.value(r, feature)));
                if left_rows.is_empty() || right_rows.is_empty() {
                    continue;
                }
                let left = self.search_exact(&left_rows, depth - 1, level + 1, constrained, caps);
                let right =
                    self.search_exact(&right_rows, depth - 1, level + 1, constrained, caps);
                for (lu, (lv, lt)) in &left {
                    for (ru, (rv, rt)) in &right {
                        let usage: Vec<u32> =
                            lu.iter().zip(ru).map(|(a, b)| a + b).collect();
                        if usage
                            .iter()
                            .zip(caps)
                            .any(|(&u, &cap)| u as usize > cap)
                        {
                            continue;
                        }
                        let value = lv + rv;
                        match out.get(&usage) {
                            Some((existing, _)) if *existing >= value => {}
                            _ => {
                                out.insert(
                                    usage,
                                    (
                                        value,
                                        PolicyNode::Split {
                                            feature,
                                            rule: rule.clone(),
                                            left: Box::new(lt.clone()),
                                            right: Box::new(rt.clone()),
                                        },
                                    ),
                                );
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn fit_exact(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    constraints: &Constraints,
    params: &PolicyTreeParams,
    rows: &[usize],
) -> Result<PolicyTree> {
    let caps_all = constraints.cap_counts(rows.len());
    let constrained: Vec<usize> = (0..scores.k).filter(|&a| caps_all[a].is_some()).collect();
    let caps: Vec<usize> = constrained
        .iter()
        .map(|&a| caps_all[a].unwrap().min(rows.len()))
        .collect();
    let state_bound: f64 = caps.iter().map(|&c| (c + 1) as f64).product();
    if state_bound > 4e6 {
        return Err(Error::InvalidArgument {
            name: "solver",
            message: format!(
                "exact constrained search needs {state_bound:.0} usage states; use the cost mechanism"
            ),
        });
    }
    let searcher = Searcher::new(scores, features, params, vec![0.0; scores.k]);
    let map = searcher.search_exact(rows, params.depth, 0, &constrained, &caps);
    let best = map
        .into_iter()
        .map(|(_, vt)| vt)
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .ok_or_else(|| Error::Infeasible("no assignment satisfies the caps".into()))?;
    Ok(finish_tree(
        scores,
        features,
        best.1,
        params.depth,
        vec![0.0; scores.k],
    ))
}

fn fit_with_costs(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    constraints: &Constraints,
    params: &PolicyTreeParams,
    rows: &[usize],
) -> Result<PolicyTree> {
    let caps = constraints.cap_counts(rows.len());
    let build = |costs: &[f64]| -> PolicyNode {
        let searcher = Searcher::new(scores, features, params, costs.to_vec());
        searcher.search(rows, params.depth, 0).1
    };
    let (root, costs) = bisect_costs(scores, features, &caps, rows, build)?;
    Ok(finish_tree(scores, features, root, params.depth, costs))
}

/// Raises per-arm costs by bisection until every capped arm's in-sample
/// count is at or below its cap. The bisection interval shrinks until the
/// binding count moves by at most one observation.
fn bisect_costs(
    scores: &PolicyScores,
    features: &FeatureMatrix,
    caps: &[Option<usize>],
    rows: &[usize],
    build: impl Fn(&[f64]) -> PolicyNode,
) -> Result<(PolicyNode, Vec<f64>)> {
    let k = scores.k;
    let count_arm = |node: &PolicyNode, arm: usize| -> usize {
        rows.iter()
            .filter(|&&r| node.assign(features.row(r)) == arm as u32)
            .count()
    };
    let score_range = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..scores.n {
            for a in 0..k {
                lo = lo.min(scores.net(r, a));
                hi = hi.max(scores.net(r, a));
            }
        }
        (hi - lo).max(1.0)
    };
    // A cost beyond the full score range removes an arm entirely.
    let hard_max = 2.0 * score_range + 1.0;

    let mut costs = vec![0.0; k];
    let mut node = build(&costs);
    for _round in 0..8 {
        let violated: Vec<usize> = (0..k)
            .filter(|&a| caps[a].map_or(false, |cap| count_arm(&node, a) > cap))
            .collect();
        if violated.is_empty() {
            return Ok((node, costs));
        }
        for arm in violated {
            let cap = caps[arm].unwrap();
            let mut lo = costs[arm];
            let mut hi = hard_max;
            // Invariant: the count at `hi` is within the cap.
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                costs[arm] = mid;
                let candidate = build(&costs);
                if count_arm(&candidate, arm) <= cap {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo < 1e-9 * score_range {
                    break;
                }
            }
            costs[arm] = hi;
            node = build(&costs);
        }
    }
    // Verify; any arm still violating gets priced out entirely.
    for a in 0..k {
        if caps[a].map_or(false, |cap| count_arm(&node, a) > cap) {
            costs[a] = hard_max;
        }
    }
    node = build(&costs);
    for a in 0..k {
        if let Some(cap) = caps[a] {
            let count = count_arm(&node, a);
            if count > cap {
                return Err(Error::Infeasible(format!(
                    "arm {a} still assigns {count} rows against a cap of {cap}"
                )));
            }
        }
    }
    Ok((node, costs))
}
