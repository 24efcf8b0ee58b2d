//! Modified causal forest: honest multi-treatment trees grown on a
//! pairwise MSE/MCE criterion, yielding per-prediction outcome weights.
//!
//! For a candidate split the objective sums, over every pair of treatment
//! arms present in the node and over both daughters,
//! `MSE(m) + MSE(l) - 2 * MCE(m, l)`, where the within-daughter MSE of an
//! arm is the mean squared deviation from the arm's daughter mean and the
//! MCE pairs each row's residual with the residual of its nearest
//! other-arm neighbour (features standardized within the node, Hamming
//! distance on categoricals). A penalty proportional to the similarity of
//! the daughters' treatment-share vectors is added, so splits that also
//! separate treatment assignment are preferred. Lower scores win.
//!
//! Trees are honest: structure is learned on the training subsample, and
//! leaves are filled with estimation-subsample rows only. A leaf is usable
//! for an arm only if it holds at least one estimation row of that arm;
//! other trees cover the gap, and an arm with no usable leaf in any tree
//! yields an undefined-prediction error.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::forest::SplitRule;
use crate::rng;
use crate::stats::sample_variance;

/// Serialization format version for cached causal forests.
pub const MCF_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McfParams {
    pub n_trees: usize,
    /// Features drawn per split; `None` uses `min(p, 3 * ceil(sqrt(p)))`.
    pub mtry: Option<usize>,
    /// Minimum rows per treatment arm in every daughter.
    pub min_leaf: usize,
    /// Penalty weight lambda; `None` scales by the node outcome variance.
    pub penalty_weight: Option<f64>,
    /// Neighbours averaged in the MCE matching.
    pub nn_count: usize,
    /// Fraction of training rows subsampled (without replacement) per tree.
    pub subsample_fraction: f64,
    /// Optional depth cap; `None` grows until no valid split remains.
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for McfParams {
    fn default() -> Self {
        McfParams {
            n_trees: 1000,
            mtry: None,
            min_leaf: 12,
            penalty_weight: None,
            nn_count: 1,
            subsample_fraction: 0.5,
            max_depth: None,
            seed: 0,
        }
    }
}

impl McfParams {
    fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidArgument {
                name: "n_trees",
                message: "must be at least 1".into(),
            });
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument {
                name: "min_leaf",
                message: "must be at least 1".into(),
            });
        }
        if self.nn_count == 0 {
            return Err(Error::InvalidArgument {
                name: "nn_count",
                message: "must be at least 1".into(),
            });
        }
        if let Some(mtry) = self.mtry {
            if mtry == 0 || mtry > p {
                return Err(Error::InvalidArgument {
                    name: "mtry",
                    message: format!("must be in 1..={p}"),
                });
            }
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::InvalidArgument {
                name: "subsample_fraction",
                message: "must lie in (0, 1]".into(),
            });
        }
        if let Some(lambda) = self.penalty_weight {
            if lambda < 0.0 {
                return Err(Error::InvalidArgument {
                    name: "penalty_weight",
                    message: "must be nonnegative".into(),
                });
            }
        }
        Ok(())
    }

    fn effective_mtry(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| 3 * (p as f64).sqrt().ceil() as usize)
            .clamp(1, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum McfNode {
    Split {
        feature: usize,
        rule: SplitRule,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Estimation-subsample row ids falling here, per treatment arm.
        arm_rows: Vec<Vec<u32>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McfTree {
    pub nodes: Vec<McfNode>,
}

impl McfTree {
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                McfNode::Split {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    idx = if rule.goes_left(row[*feature]) {
                        *left
                    } else {
                        *right
                    };
                }
                McfNode::Leaf { .. } => return idx,
            }
        }
    }

    pub fn leaf_arm_rows(&self, leaf: usize) -> &[Vec<u32>] {
        match &self.nodes[leaf] {
            McfNode::Leaf { arm_rows } => arm_rows,
            McfNode::Split { .. } => panic!("node {leaf} is not a leaf"),
        }
    }
}

/// Honest multi-treatment forest with per-arm leaf membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForest {
    pub format_version: u32,
    pub params: McfParams,
    pub n_treatments: u32,
    pub n_features: usize,
    pub kinds: Vec<FeatureKind>,
    pub trees: Vec<McfTree>,
    /// Treatment labels of the estimation subsample the leaves reference.
    pub est_treatment: Vec<u32>,
}

impl CausalForest {
    pub fn n_estimation_rows(&self) -> usize {
        self.est_treatment.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let forest: CausalForest = serde_json::from_str(text)?;
        if forest.format_version != MCF_FORMAT_VERSION {
            return Err(Error::InvalidArgument {
                name: "format_version",
                message: format!(
                    "unsupported forest format {} (expected {MCF_FORMAT_VERSION})",
                    forest.format_version
                ),
            });
        }
        Ok(forest)
    }
}

/// Sparse per-arm weights over estimation rows for one prediction point.
/// An undefined arm (no complete leaf in any tree) is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub arms: Vec<Option<Vec<(u32, f64)>>>,
}

impl WeightVector {
    pub fn arm(&self, d: u32) -> Result<&[(u32, f64)]> {
        self.arms[d as usize]
            .as_deref()
            .ok_or(Error::UndefinedPrediction { arm: d })
    }
}

/// Scores one candidate split of `rows` under the MCF criterion.
///
/// Returns an error when a daughter misses a treatment arm present in the
/// node or violates the per-arm minimum leaf size. The score is the sum of
/// the pairwise `MSE + MSE - 2 MCE` terms over both daughters plus the
/// treatment-share similarity penalty; lower is better.
pub fn split_objective(
    x: &FeatureMatrix,
    rows: &[usize],
    y: &[f64],
    d: &[u32],
    n_treatments: u32,
    feature: usize,
    rule: &SplitRule,
    params: &McfParams,
) -> Result<f64> {
    let matches = NodeMatches::compute(x, rows, y, d, n_treatments, params.nn_count);
    let (left, right): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&r| rule.goes_left(x.value(r, feature)));
    let arms = present_arms(rows, d, n_treatments);
    for side in [&left, &right] {
        for &a in &arms {
            let cnt = side.iter().filter(|&&r| d[r] == a).count();
            if cnt == 0 {
                return Err(Error::Estimation(format!(
                    "candidate rejected: daughter misses treatment arm {a}"
                )));
            }
            if cnt < params.min_leaf {
                return Err(Error::Estimation(format!(
                    "candidate rejected: arm {a} below min_leaf in a daughter"
                )));
            }
        }
    }
    let lambda = params
        .penalty_weight
        .unwrap_or_else(|| node_outcome_variance(rows, y));
    let score = direct_side_score(&left, y, d, &arms, &matches)
        + direct_side_score(&right, y, d, &arms, &matches)
        + lambda * share_similarity(&left, &right, d, n_treatments);
    Ok(score)
}

/// Fits the causal forest: tree structure from `train`, leaves filled with
/// `estimation` rows. Both subsamples must contain every treatment arm.
#[allow(clippy::too_many_arguments)]
pub fn fit_mcf(
    x_train: &FeatureMatrix,
    d_train: &[u32],
    y_train: &[f64],
    x_est: &FeatureMatrix,
    d_est: &[u32],
    n_treatments: u32,
    params: &McfParams,
) -> Result<CausalForest> {
    let p = x_train.n_features();
    params.validate(p)?;
    if x_est.n_features() != p {
        return Err(Error::InvalidArgument {
            name: "estimation",
            message: "estimation features do not match training schema".into(),
        });
    }
    let n_train = x_train.n_rows();
    if d_train.len() != n_train || y_train.len() != n_train {
        return Err(Error::InvalidArgument {
            name: "train",
            message: "treatment/outcome length mismatch".into(),
        });
    }
    if d_est.len() != x_est.n_rows() {
        return Err(Error::InvalidArgument {
            name: "estimation",
            message: "treatment length mismatch".into(),
        });
    }
    for (label, arms) in [("training", d_train), ("estimation", d_est)] {
        for a in 0..n_treatments {
            if !arms.contains(&a) {
                return Err(Error::Estimation(format!(
                    "treatment arm {a} absent from the {label} subsample"
                )));
            }
        }
    }

    let subsample_size = ((params.subsample_fraction * n_train as f64).floor() as usize)
        .clamp(1, n_train);

    let trees: Vec<McfTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::rng_for(params.seed, rng::stream::TREE, t as u64);
            let mut indices: Vec<u32> = (0..n_train as u32).collect();
            indices.shuffle(&mut rng);
            let mut bag: Vec<usize> = indices[..subsample_size]
                .iter()
                .map(|&i| i as usize)
                .collect();
            bag.sort_unstable();
            let mut grower = McfGrower {
                x: x_train,
                y: y_train,
                d: d_train,
                n_treatments,
                params,
                rng,
                nodes: Vec::new(),
            };
            grower.build(bag, 0);
            let mut tree = McfTree {
                nodes: grower.nodes,
            };
            fill_leaves(&mut tree, x_est, d_est, n_treatments);
            tree
        })
        .collect();

    Ok(CausalForest {
        format_version: MCF_FORMAT_VERSION,
        params: params.clone(),
        n_treatments,
        n_features: p,
        kinds: x_train.kinds().to_vec(),
        trees,
        est_treatment: d_est.to_vec(),
    })
}

/// Per-arm weights over estimation rows for one prediction row.
///
/// Each tree whose leaf holds estimation rows of arm `d` contributes
/// `1 / |leaf arm|` to each member; contributions are averaged over those
/// trees, so every defined arm's weights sum to one.
pub fn weights_for(forest: &CausalForest, row: &[f64]) -> Result<WeightVector> {
    if row.len() != forest.n_features {
        return Err(Error::InvalidArgument {
            name: "x",
            message: format!(
                "row has {} features, forest expects {}",
                row.len(),
                forest.n_features
            ),
        });
    }
    let k = forest.n_treatments as usize;
    let n_est = forest.n_estimation_rows();
    let mut dense: Vec<Vec<f64>> = vec![vec![0.0; n_est]; k];
    let mut tree_counts = vec![0usize; k];
    for tree in &forest.trees {
        let leaf = tree.leaf_index(row);
        let arm_rows = tree.leaf_arm_rows(leaf);
        for a in 0..k {
            let members = &arm_rows[a];
            if members.is_empty() {
                continue;
            }
            tree_counts[a] += 1;
            let w = 1.0 / members.len() as f64;
            for &i in members {
                dense[a][i as usize] += w;
            }
        }
    }
    let arms = (0..k)
        .map(|a| {
            if tree_counts[a] == 0 {
                return None;
            }
            let scale = 1.0 / tree_counts[a] as f64;
            let mut sparse: Vec<(u32, f64)> = dense[a]
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, &w)| (i as u32, w * scale))
                .collect();
            // Renormalize so the arm sums to exactly one.
            let total: f64 = sparse.iter().map(|(_, w)| w).sum();
            for (_, w) in sparse.iter_mut() {
                *w /= total;
            }
            Some(sparse)
        })
        .collect();
    Ok(WeightVector { arms })
}

/// Estimated potential-outcome means for every arm at one prediction row.
pub fn potential_outcomes(
    forest: &CausalForest,
    row: &[f64],
    y_est: &[f64],
) -> Result<Vec<f64>> {
    if y_est.len() != forest.n_estimation_rows() {
        return Err(Error::InvalidArgument {
            name: "y_est",
            message: "outcome vector does not match the estimation subsample".into(),
        });
    }
    let weights = weights_for(forest, row)?;
    (0..forest.n_treatments)
        .map(|a| {
            let arm = weights.arm(a)?;
            Ok(arm.iter().map(|&(i, w)| w * y_est[i as usize]).sum())
        })
        .collect()
}

/// IATE at one prediction row for the contrast (d, d_prime).
pub fn iate(
    forest: &CausalForest,
    row: &[f64],
    y_est: &[f64],
    d: u32,
    d_prime: u32,
) -> Result<f64> {
    let mu = potential_outcomes(forest, row, y_est)?;
    Ok(mu[d as usize] - mu[d_prime as usize])
}

// ---------------------------------------------------------------------
// Growth internals
// ---------------------------------------------------------------------

fn present_arms(rows: &[usize], d: &[u32], n_treatments: u32) -> Vec<u32> {
    let mut present = vec![false; n_treatments as usize];
    for &r in rows {
        present[d[r] as usize] = true;
    }
    (0..n_treatments).filter(|&a| present[a as usize]).collect()
}

fn node_outcome_variance(rows: &[usize], y: &[f64]) -> f64 {
    let values: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
    sample_variance(&values)
}

/// `1 - total-variation distance` between the daughters' treatment-share
/// vectors: 1.0 when the shares coincide, 0.0 when disjoint.
fn share_similarity(left: &[usize], right: &[usize], d: &[u32], n_treatments: u32) -> f64 {
    let k = n_treatments as usize;
    let mut share_l = vec![0.0; k];
    let mut share_r = vec![0.0; k];
    for &r in left {
        share_l[d[r] as usize] += 1.0;
    }
    for &r in right {
        share_r[d[r] as usize] += 1.0;
    }
    let (nl, nr) = (left.len() as f64, right.len() as f64);
    let tv: f64 = (0..k)
        .map(|a| (share_l[a] / nl - share_r[a] / nr).abs())
        .sum::<f64>()
        / 2.0;
    1.0 - tv
}

/// Matched outcomes toward every other arm, computed once per node.
/// `matched[i_local][l]` is the mean outcome of the `nn_count` nearest rows
/// of arm `l` (standardized Euclidean on continuous features, Hamming on
/// categoricals); `NAN` marks the row's own arm and arms absent from the
/// node.
struct NodeMatches {
    row_pos: std::collections::HashMap<usize, usize>,
    matched: Vec<Vec<f64>>,
}

impl NodeMatches {
    fn compute(
        x: &FeatureMatrix,
        rows: &[usize],
        y: &[f64],
        d: &[u32],
        n_treatments: u32,
        nn_count: usize,
    ) -> NodeMatches {
        let k = n_treatments as usize;
        let p = x.n_features();
        let n = rows.len();

        // Node-level standardization for continuous features.
        let mut inv_sd = vec![0.0; p];
        let mut means = vec![0.0; p];
        for j in 0..p {
            if matches!(x.kinds()[j], FeatureKind::Continuous) {
                let values: Vec<f64> = rows.iter().map(|&r| x.value(r, j)).collect();
                let sd = sample_variance(&values).sqrt();
                means[j] = crate::stats::mean(&values);
                inv_sd[j] = if sd > 0.0 { 1.0 / sd } else { 0.0 };
            }
        }
        let distance = |a: usize, b: usize| -> f64 {
            let mut acc = 0.0;
            for j in 0..p {
                match x.kinds()[j] {
                    FeatureKind::Continuous => {
                        let diff = (x.value(a, j) - x.value(b, j)) * inv_sd[j];
                        acc += diff * diff;
                    }
                    _ => {
                        if x.value(a, j) != x.value(b, j) {
                            acc += 1.0;
                        }
                    }
                }
            }
            acc
        };

        let mut by_arm: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &r in rows {
            by_arm[d[r] as usize].push(r);
        }

        let mut matched = vec![vec![f64::NAN; k]; n];
        for (pos, &r) in rows.iter().enumerate() {
            for a in 0..k {
                if a as u32 == d[r] || by_arm[a].is_empty() {
                    continue;
                }
                // (distance, row id) pairs; ties resolve to the lowest id.
                let mut candidates: Vec<(f64, usize)> = by_arm[a]
                    .iter()
                    .map(|&other| (distance(r, other), other))
                    .collect();
                let take = nn_count.min(candidates.len());
                candidates.sort_by(|x1, x2| {
                    x1.0.partial_cmp(&x2.0).unwrap().then(x1.1.cmp(&x2.1))
                });
                let sum: f64 = candidates[..take].iter().map(|&(_, j)| y[j]).sum();
                matched[pos][a] = sum / take as f64;
            }
        }
        NodeMatches {
            row_pos: rows.iter().enumerate().map(|(pos, &r)| (r, pos)).collect(),
            matched,
        }
    }

    #[inline]
    fn matched_outcome(&self, row: usize, arm: usize) -> f64 {
        self.matched[self.row_pos[&row]][arm]
    }
}

/// Reference (two-pass) daughter score; the incremental sweep must agree.
fn direct_side_score(
    side: &[usize],
    y: &[f64],
    d: &[u32],
    node_arms: &[u32],
    matches: &NodeMatches,
) -> f64 {
    let mut means = std::collections::HashMap::new();
    for &a in node_arms {
        let values: Vec<f64> = side.iter().filter(|&&r| d[r] == a).map(|&r| y[r]).collect();
        means.insert(a, (values.len(), crate::stats::mean(&values)));
    }
    let mse = |a: u32| -> f64 {
        let (cnt, mean_a) = means[&a];
        side.iter()
            .filter(|&&r| d[r] == a)
            .map(|&r| (y[r] - mean_a) * (y[r] - mean_a))
            .sum::<f64>()
            / cnt as f64
    };
    if node_arms.len() == 1 {
        return mse(node_arms[0]);
    }
    let mut score = 0.0;
    for (i, &m) in node_arms.iter().enumerate() {
        for &l in &node_arms[i + 1..] {
            let (cnt_m, mean_m) = means[&m];
            let (cnt_l, mean_l) = means[&l];
            let mut cross = 0.0;
            for &r in side {
                if d[r] == m {
                    cross += (y[r] - mean_m) * (matches.matched_outcome(r, l as usize) - mean_l);
                } else if d[r] == l {
                    cross += (y[r] - mean_l) * (matches.matched_outcome(r, m as usize) - mean_m);
                }
            }
            let mce = cross / (cnt_m + cnt_l) as f64;
            score += mse(m) + mse(l) - 2.0 * mce;
        }
    }
    score
}

struct McfGrower<'a> {
    x: &'a FeatureMatrix,
    y: &'a [f64],
    d: &'a [u32],
    n_treatments: u32,
    params: &'a McfParams,
    rng: ChaCha8Rng,
    nodes: Vec<McfNode>,
}

/// Per-arm sufficient statistics of one sweep side, including the directed
/// matched-outcome cross sums needed for the MCE terms.
struct SideStats {
    cnt: Vec<f64>,
    sum_y: Vec<f64>,
    sum_y2: Vec<f64>,
    /// Indexed `[arm_of_row][other_arm]`.
    sum_ym: Vec<Vec<f64>>,
    sum_y_ym: Vec<Vec<f64>>,
}

impl SideStats {
    fn zeros(k: usize) -> SideStats {
        SideStats {
            cnt: vec![0.0; k],
            sum_y: vec![0.0; k],
            sum_y2: vec![0.0; k],
            sum_ym: vec![vec![0.0; k]; k],
            sum_y_ym: vec![vec![0.0; k]; k],
        }
    }

    fn add(&mut self, row: usize, y: &[f64], d: &[u32], matches: &NodeMatches, sign: f64) {
        let a = d[row] as usize;
        let yi = y[row];
        self.cnt[a] += sign;
        self.sum_y[a] += sign * yi;
        self.sum_y2[a] += sign * yi * yi;
        let matched = &matches.matched[matches.row_pos[&row]];
        for (l, &ym) in matched.iter().enumerate() {
            if !ym.is_nan() {
                self.sum_ym[a][l] += sign * ym;
                self.sum_y_ym[a][l] += sign * yi * ym;
            }
        }
    }

    /// Pairwise MSE/MCE score of this side over the node's arms.
    fn score(&self, node_arms: &[u32]) -> f64 {
        let mse = |a: usize| -> f64 {
            let mean = self.sum_y[a] / self.cnt[a];
            self.sum_y2[a] / self.cnt[a] - mean * mean
        };
        if node_arms.len() == 1 {
            return mse(node_arms[0] as usize);
        }
        let mut score = 0.0;
        for (i, &m) in node_arms.iter().enumerate() {
            for &l in &node_arms[i + 1..] {
                let (m, l) = (m as usize, l as usize);
                let mean_m = self.sum_y[m] / self.cnt[m];
                let mean_l = self.sum_y[l] / self.cnt[l];
                // Expanded sum of (y_i - mean_a)(ym_i - mean_b) terms.
                let cross_m = self.sum_y_ym[m][l] - mean_l * self.sum_y[m]
                    - mean_m * self.sum_ym[m][l]
                    + self.cnt[m] * mean_m * mean_l;
                let cross_l = self.sum_y_ym[l][m] - mean_m * self.sum_y[l]
                    - mean_l * self.sum_ym[l][m]
                    + self.cnt[l] * mean_l * mean_m;
                let mce = (cross_m + cross_l) / (self.cnt[m] + self.cnt[l]);
                score += mse(m) + mse(l) - 2.0 * mce;
            }
        }
        score
    }

    fn share_similarity_to(&self, other: &SideStats, k: usize) -> f64 {
        let nl: f64 = self.cnt.iter().sum();
        let nr: f64 = other.cnt.iter().sum();
        let tv: f64 = (0..k)
            .map(|a| (self.cnt[a] / nl - other.cnt[a] / nr).abs())
            .sum::<f64>()
            / 2.0;
        1.0 - tv
    }
}

struct McfBestSplit {
    score: f64,
    feature: usize,
    rule: SplitRule,
}

impl McfGrower<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(McfNode::Leaf {
            arm_rows: Vec::new(),
        });

        let depth_ok = self.params.max_depth.map_or(true, |d| depth < d);
        let outcomes_constant = rows
            .windows(2)
            .all(|w| self.y[w[0]] == self.y[w[1]]);
        if depth_ok && !outcomes_constant && rows.len() >= 2 {
            if let Some(best) = self.best_split(&rows) {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&r| best.rule.goes_left(self.x.value(r, best.feature)));
                let left = self.build(left_rows, depth + 1);
                let right = self.build(right_rows, depth + 1);
                self.nodes[idx] = McfNode::Split {
                    feature: best.feature,
                    rule: best.rule,
                    left,
                    right,
                };
            }
        }
        idx
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<McfBestSplit> {
        let p = self.x.n_features();
        let mtry = self.params.effective_mtry(p);
        let mut features: Vec<usize> = (0..p).collect();
        features.shuffle(&mut self.rng);
        let mut chosen = features[..mtry].to_vec();
        chosen.sort_unstable();

        let node_arms = present_arms(rows, self.d, self.n_treatments);
        // Cheap feasibility screen: every node arm needs 2 * min_leaf rows.
        for &a in &node_arms {
            let cnt = rows.iter().filter(|&&r| self.d[r] == a).count();
            if cnt < 2 * self.params.min_leaf {
                return None;
            }
        }

        let matches = NodeMatches::compute(
            self.x,
            rows,
            self.y,
            self.d,
            self.n_treatments,
            self.params.nn_count,
        );
        let lambda = self
            .params
            .penalty_weight
            .unwrap_or_else(|| node_outcome_variance(rows, self.y));

        let mut best: Option<McfBestSplit> = None;
        for &feature in &chosen {
            let candidate = match self.x.kinds()[feature] {
                FeatureKind::Unordered { .. } => {
                    self.sweep_feature(rows, feature, &node_arms, &matches, lambda, true)
                }
                _ => self.sweep_feature(rows, feature, &node_arms, &matches, lambda, false),
            };
            if let Some(c) = candidate {
                if best.as_ref().map_or(true, |b| c.score < b.score) {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// Sweeps candidate boundaries of one feature, moving rows left one at
    /// a time and scoring incrementally. For unordered categoricals the
    /// sweep runs over categories ordered by pooled outcome mean and the
    /// resulting rule is a category set.
    fn sweep_feature(
        &self,
        rows: &[usize],
        feature: usize,
        node_arms: &[u32],
        matches: &NodeMatches,
        lambda: f64,
        categorical: bool,
    ) -> Option<McfBestSplit> {
        let k = self.n_treatments as usize;
        let min_leaf = self.params.min_leaf;

        // Sorted sweep order plus the category ordering when needed.
        let (order, cat_order): (Vec<usize>, Option<Vec<i64>>) = if categorical {
            let mut stats: std::collections::BTreeMap<i64, (f64, f64)> = Default::default();
            for &r in rows {
                let code = self.x.value(r, feature) as i64;
                let entry = stats.entry(code).or_insert((0.0, 0.0));
                entry.0 += 1.0;
                entry.1 += self.y[r];
            }
            if stats.len() < 2 {
                return None;
            }
            let mut ordered: Vec<(i64, f64)> = stats
                .iter()
                .map(|(&code, &(cnt, sum))| (code, sum / cnt))
                .collect();
            ordered.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let rank: std::collections::HashMap<i64, usize> = ordered
                .iter()
                .enumerate()
                .map(|(i, &(code, _))| (code, i))
                .collect();
            let mut order: Vec<usize> = rows.to_vec();
            order.sort_by_key(|&r| (rank[&(self.x.value(r, feature) as i64)], r));
            (order, Some(ordered.into_iter().map(|(code, _)| code).collect()))
        } else {
            let mut order: Vec<usize> = rows.to_vec();
            order.sort_by(|&a, &b| {
                self.x
                    .value(a, feature)
                    .partial_cmp(&self.x.value(b, feature))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            (order, None)
        };

        let n = order.len();
        let mut left = SideStats::zeros(k);
        let mut right = SideStats::zeros(k);
        for &r in &order {
            right.add(r, self.y, self.d, matches, 1.0);
        }

        let boundary_differs = |a: usize, b: usize| -> bool {
            self.x.value(a, feature) != self.x.value(b, feature)
        };

        let mut best: Option<(f64, usize)> = None; // (score, boundary index)
        for i in 0..n - 1 {
            left.add(order[i], self.y, self.d, matches, 1.0);
            right.add(order[i], self.y, self.d, matches, -1.0);
            if !boundary_differs(order[i], order[i + 1]) {
                continue;
            }
            let valid = node_arms.iter().all(|&a| {
                left.cnt[a as usize] >= min_leaf as f64
                    && right.cnt[a as usize] >= min_leaf as f64
            });
            if !valid {
                continue;
            }
            let score = left.score(node_arms)
                + right.score(node_arms)
                + lambda * left.share_similarity_to(&right, k);
            if best.map_or(true, |(s, _)| score < s) {
                best = Some((score, i));
            }
        }

        best.map(|(score, boundary)| {
            let rule = match &cat_order {
                Some(codes) => {
                    let boundary_code = self.x.value(order[boundary], feature) as i64;
                    let mut mask = 0u64;
                    for &code in codes {
                        mask |= 1u64 << code;
                        if code == boundary_code {
                            break;
                        }
                    }
                    SplitRule::CategorySet(mask)
                }
                None => {
                    let v = self.x.value(order[boundary], feature);
                    let next = self.x.value(order[boundary + 1], feature);
                    SplitRule::Threshold(v + (next - v) / 2.0)
                }
            };
            McfBestSplit {
                score,
                feature,
                rule,
            }
        })
    }
}

/// Routes every estimation row to its leaf and records per-arm membership.
fn fill_leaves(tree: &mut McfTree, x_est: &FeatureMatrix, d_est: &[u32], n_treatments: u32) {
    let k = n_treatments as usize;
    let mut assignments: Vec<Vec<Vec<u32>>> = vec![Vec::new(); tree.nodes.len()];
    for node in assignments.iter_mut() {
        *node = vec![Vec::new(); k];
    }
    for r in 0..x_est.n_rows() {
        let leaf = tree.leaf_index(x_est.row(r));
        assignments[leaf][d_est[r] as usize].push(r as u32);
    }
    for (idx, node) in tree.nodes.iter_mut().enumerate() {
        if let McfNode::Leaf { arm_rows } = node {
            *arm_rows = std::mem::take(&mut assignments[idx]);
        }
    }
}
