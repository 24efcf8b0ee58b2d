//! Generic honest random forest for regression and classification.
//!
//! Used for propensity scores and the pseudo-start prediction model. Trees
//! are grown on subsamples drawn without replacement; the per-tree
//! membership is exposed so callers can work with out-of-sample rows.
//! Fitting is deterministic given the seed.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng;

/// Serialization format version for cached models.
pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features drawn per split; `None` uses `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    /// Fraction of rows subsampled (without replacement) per tree.
    pub bootstrap_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            mtry: None,
            min_leaf: 5,
            bootstrap_fraction: 0.632,
            seed: 0,
        }
    }
}

impl ForestParams {
    fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidArgument {
                name: "n_trees",
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
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument {
                name: "min_leaf",
                message: "must be at least 1".into(),
            });
        }
        if !(self.bootstrap_fraction > 0.0 && self.bootstrap_fraction <= 1.0) {
            return Err(Error::InvalidArgument {
                name: "bootstrap_fraction",
                message: "must lie in (0, 1]".into(),
            });
        }
        Ok(())
    }

    fn effective_mtry(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p)
    }
}

/// Split rule of an internal node; rows matching the rule go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// Left iff `value <= threshold`.
    Threshold(f64),
    /// Left iff the integer code's bit is set. Unseen codes go right.
    CategorySet(u64),
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, value: f64) -> bool {
        match self {
            SplitRule::Threshold(t) => value <= *t,
            SplitRule::CategorySet(mask) => {
                let code = value as i64;
                (0..64).contains(&code) && mask & (1u64 << code) != 0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        rule: SplitRule,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Leaf mean for regression, class frequencies for classification.
        value: Vec<f64>,
        n_rows: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Index of the leaf node the feature row falls into.
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Split {
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
                Node::Leaf { .. } => return idx,
            }
        }
    }

    fn leaf_value(&self, row: &[f64]) -> &[f64] {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification { n_classes: u32 },
}

/// Fitted forest with per-tree subsample membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub params: ForestParams,
    pub task: Task,
    pub n_features: usize,
    pub kinds: Vec<FeatureKind>,
    pub trees: Vec<Tree>,
    /// Sorted row ids used to grow each tree (the honesty hook).
    pub in_bag: Vec<Vec<u32>>,
}

impl ForestModel {
    /// Mean prediction for one row (regression).
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(self.task, Task::Regression);
        let sum: f64 = self.trees.iter().map(|t| t.leaf_value(row)[0]).sum();
        sum / self.trees.len() as f64
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.n_rows()).map(|r| self.predict_row(x.row(r))).collect()
    }

    /// Forest-averaged class frequencies for one row.
    pub fn predict_proba_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        let k = match self.task {
            Task::Classification { n_classes } => n_classes as usize,
            Task::Regression => {
                return Err(Error::InvalidArgument {
                    name: "model",
                    message: "probability prediction requires a classification forest".into(),
                })
            }
        };
        if row.len() != self.n_features {
            return Err(Error::InvalidArgument {
                name: "x",
                message: format!(
                    "row has {} features, model expects {}",
                    row.len(),
                    self.n_features
                ),
            });
        }
        let mut probs = vec![0.0; k];
        for tree in &self.trees {
            for (acc, v) in probs.iter_mut().zip(tree.leaf_value(row)) {
                *acc += v;
            }
        }
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(probs)
    }

    /// n x K propensity matrix over all rows.
    pub fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        (0..x.n_rows())
            .map(|r| self.predict_proba_row(x.row(r)))
            .collect()
    }

    /// Single-tree mean prediction, for out-of-bag evaluation.
    pub fn predict_row_with_tree(&self, tree: usize, row: &[f64]) -> f64 {
        self.trees[tree].leaf_value(row)[0]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ForestModel = serde_json::from_str(text)?;
        if model.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::InvalidArgument {
                name: "format_version",
                message: format!(
                    "unsupported forest format {} (expected {FOREST_FORMAT_VERSION})",
                    model.format_version
                ),
            });
        }
        Ok(model)
    }
}

/// Fits a regression forest with variance-reduction splitting.
pub fn fit_regression(x: &FeatureMatrix, y: &[f64], params: &ForestParams) -> Result<ForestModel> {
    fit_impl(x, Target::Regression(y), params)
}

/// Fits a classification forest with Gini splitting; leaves hold class
/// frequencies.
pub fn fit_classification(
    x: &FeatureMatrix,
    labels: &[u32],
    n_classes: u32,
    params: &ForestParams,
) -> Result<ForestModel> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument {
            name: "labels",
            message: format!("label {bad} outside 0..{n_classes}"),
        });
    }
    fit_impl(x, Target::Classification { labels, n_classes }, params)
}

#[derive(Clone, Copy)]
enum Target<'a> {
    Regression(&'a [f64]),
    Classification { labels: &'a [u32], n_classes: u32 },
}

fn fit_impl(x: &FeatureMatrix, target: Target<'_>, params: &ForestParams) -> Result<ForestModel> {
    let n = x.n_rows();
    let p = x.n_features();
    params.validate(p)?;
    let len = match target {
        Target::Regression(y) => y.len(),
        Target::Classification { labels, .. } => labels.len(),
    };
    if len != n {
        return Err(Error::InvalidArgument {
            name: "target",
            message: format!("target has {len} rows, features have {n}"),
        });
    }
    if n < 2 * params.min_leaf {
        return Err(Error::InvalidArgument {
            name: "data",
            message: format!("need at least {} rows", 2 * params.min_leaf),
        });
    }
    for (j, kind) in x.kinds().iter().enumerate() {
        if let FeatureKind::Unordered { categories } = kind {
            if *categories > 64 {
                return Err(Error::InvalidArgument {
                    name: "features",
                    message: format!("feature {j}: more than 64 categories unsupported"),
                });
            }
        }
    }

    let subsample_size =
        ((params.bootstrap_fraction * n as f64).floor() as usize).clamp(1, n).max(
            (2 * params.min_leaf).min(n),
        );

    let results: Vec<(Tree, Vec<u32>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::rng_for(params.seed, rng::stream::TREE, t as u64);
            let mut indices: Vec<u32> = (0..n as u32).collect();
            indices.shuffle(&mut rng);
            let mut bag: Vec<u32> = indices[..subsample_size].to_vec();
            bag.sort_unstable();
            let rows: Vec<usize> = bag.iter().map(|&i| i as usize).collect();
            let mut builder = TreeBuilder {
                x,
                target,
                params,
                rng,
                nodes: Vec::new(),
            };
            builder.build(rows);
            (Tree { nodes: builder.nodes }, bag)
        })
        .collect();

    let (trees, in_bag): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let task = match target {
        Target::Regression(_) => Task::Regression,
        Target::Classification { n_classes, .. } => Task::Classification { n_classes },
    };
    Ok(ForestModel {
        format_version: FOREST_FORMAT_VERSION,
        params: params.clone(),
        task,
        n_features: p,
        kinds: x.kinds().to_vec(),
        trees,
        in_bag,
    })
}

struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    target: Target<'a>,
    params: &'a ForestParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    rule: SplitRule,
}

impl TreeBuilder<'_> {
    fn build(&mut self, rows: Vec<usize>) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: Vec::new(),
            n_rows: rows.len(),
        });

        if rows.len() >= 2 * self.params.min_leaf && !self.is_pure(&rows) {
            if let Some(best) = self.best_split(&rows) {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&r| best.rule.goes_left(self.x.value(r, best.feature)));
                let left = self.build(left_rows);
                let right = self.build(right_rows);
                self.nodes[idx] = Node::Split {
                    feature: best.feature,
                    rule: best.rule,
                    left,
                    right,
                };
                return idx;
            }
        }

        self.nodes[idx] = Node::Leaf {
            value: self.leaf_value(&rows),
            n_rows: rows.len(),
        };
        idx
    }

    fn is_pure(&self, rows: &[usize]) -> bool {
        match self.target {
            Target::Regression(y) => rows.windows(2).all(|w| y[w[0]] == y[w[1]]),
            Target::Classification { labels, .. } => {
                rows.windows(2).all(|w| labels[w[0]] == labels[w[1]])
            }
        }
    }

    fn leaf_value(&self, rows: &[usize]) -> Vec<f64> {
        match self.target {
            Target::Regression(y) => {
                let sum: f64 = rows.iter().map(|&r| y[r]).sum();
                vec![sum / rows.len() as f64]
            }
            Target::Classification { labels, n_classes } => {
                let mut freq = vec![0.0; n_classes as usize];
                for &r in rows {
                    freq[labels[r] as usize] += 1.0;
                }
                for f in freq.iter_mut() {
                    *f /= rows.len() as f64;
                }
                freq
            }
        }
    }

    /// Best candidate over a random draw of `mtry` features. Features are
    /// scanned in ascending index order and thresholds in ascending order,
    /// and only a strictly larger gain replaces the incumbent, so ties
    /// resolve to the lowest feature index, then the lowest threshold.
    fn best_split(&mut self, rows: &[usize]) -> Option<BestSplit> {
        let p = self.x.n_features();
        let mtry = self.params.effective_mtry(p);
        let mut features: Vec<usize> = (0..p).collect();
        features.shuffle(&mut self.rng);
        let mut chosen = features[..mtry].to_vec();
        chosen.sort_unstable();

        let mut best: Option<BestSplit> = None;
        for &feature in &chosen {
            let candidate = match self.x.kinds()[feature] {
                FeatureKind::Unordered { .. } => self.best_categorical_split(rows, feature),
                _ => self.best_threshold_split(rows, feature),
            };
            if let Some(c) = candidate {
                if c.gain > 0.0 && best.as_ref().map_or(true, |b| c.gain > b.gain) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn best_threshold_split(&self, rows: &[usize], feature: usize) -> Option<BestSplit> {
        let mut order: Vec<usize> = rows.to_vec();
        order.sort_by(|&a, &b| {
            self.x
                .value(a, feature)
                .partial_cmp(&self.x.value(b, feature))
                .unwrap()
                .then(a.cmp(&b))
        });
        let n = order.len();
        let min_leaf = self.params.min_leaf;

        match self.target {
            Target::Regression(y) => {
                let total_sum: f64 = order.iter().map(|&r| y[r]).sum();
                let base = total_sum * total_sum / n as f64;
                let mut sum_left = 0.0;
                let mut best: Option<(f64, f64)> = None; // (gain, threshold)
                for i in 0..n - 1 {
                    sum_left += y[order[i]];
                    let v = self.x.value(order[i], feature);
                    let next = self.x.value(order[i + 1], feature);
                    if v == next {
                        continue;
                    }
                    let n_left = i + 1;
                    let n_right = n - n_left;
                    if n_left < min_leaf || n_right < min_leaf {
                        continue;
                    }
                    let sum_right = total_sum - sum_left;
                    let proxy = sum_left * sum_left / n_left as f64
                        + sum_right * sum_right / n_right as f64;
                    let gain = proxy - base;
                    if best.map_or(true, |(g, _)| gain > g) {
                        best = Some((gain, midpoint(v, next)));
                    }
                }
                best.map(|(gain, threshold)| BestSplit {
                    gain,
                    feature,
                    rule: SplitRule::Threshold(threshold),
                })
            }
            Target::Classification { labels, n_classes } => {
                let k = n_classes as usize;
                let mut total = vec![0.0f64; k];
                for &r in &order {
                    total[labels[r] as usize] += 1.0;
                }
                let base: f64 = total.iter().map(|c| c * c).sum::<f64>() / n as f64;
                let mut left = vec![0.0f64; k];
                let mut best: Option<(f64, f64)> = None;
                for i in 0..n - 1 {
                    left[labels[order[i]] as usize] += 1.0;
                    let v = self.x.value(order[i], feature);
                    let next = self.x.value(order[i + 1], feature);
                    if v == next {
                        continue;
                    }
                    let n_left = i + 1;
                    let n_right = n - n_left;
                    if n_left < min_leaf || n_right < min_leaf {
                        continue;
                    }
                    let mut proxy = 0.0;
                    for c in 0..k {
                        let l = left[c];
                        let r = total[c] - l;
                        proxy += l * l / n_left as f64 + r * r / n_right as f64;
                    }
                    let gain = proxy - base;
                    if best.map_or(true, |(g, _)| gain > g) {
                        best = Some((gain, midpoint(v, next)));
                    }
                }
                best.map(|(gain, threshold)| BestSplit {
                    gain,
                    feature,
                    rule: SplitRule::Threshold(threshold),
                })
            }
        }
    }

    /// CART trick for unordered categoricals: order the categories present
    /// in the node by their mean target, then sweep that ordering as if it
    /// were one-dimensional. The left branch is a category bitmask.
    fn best_categorical_split(&self, rows: &[usize], feature: usize) -> Option<BestSplit> {
        let mut stats: std::collections::BTreeMap<i64, (f64, f64)> = Default::default();
        for &r in rows {
            let code = self.x.value(r, feature) as i64;
            let t = match self.target {
                Target::Regression(y) => y[r],
                Target::Classification { labels, .. } => labels[r] as f64,
            };
            let entry = stats.entry(code).or_insert((0.0, 0.0));
            entry.0 += 1.0;
            entry.1 += t;
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

        let n = order.len();
        let min_leaf = self.params.min_leaf;
        let rank_of = |r: usize| rank[&(self.x.value(r, feature) as i64)];

        let best = match self.target {
            Target::Regression(y) => {
                let total_sum: f64 = order.iter().map(|&r| y[r]).sum();
                let base = total_sum * total_sum / n as f64;
                let mut sum_left = 0.0;
                let mut best: Option<(f64, usize)> = None; // (gain, last left rank)
                for i in 0..n - 1 {
                    sum_left += y[order[i]];
                    if rank_of(order[i]) == rank_of(order[i + 1]) {
                        continue;
                    }
                    let (n_left, n_right) = (i + 1, n - i - 1);
                    if n_left < min_leaf || n_right < min_leaf {
                        continue;
                    }
                    let sum_right = total_sum - sum_left;
                    let proxy = sum_left * sum_left / n_left as f64
                        + sum_right * sum_right / n_right as f64;
                    let gain = proxy - base;
                    if best.map_or(true, |(g, _)| gain > g) {
                        best = Some((gain, rank_of(order[i])));
                    }
                }
                best
            }
            Target::Classification { labels, n_classes } => {
                let k = n_classes as usize;
                let mut total = vec![0.0f64; k];
                for &r in &order {
                    total[labels[r] as usize] += 1.0;
                }
                let base: f64 = total.iter().map(|c| c * c).sum::<f64>() / n as f64;
                let mut left = vec![0.0f64; k];
                let mut best: Option<(f64, usize)> = None;
                for i in 0..n - 1 {
                    left[labels[order[i]] as usize] += 1.0;
                    if rank_of(order[i]) == rank_of(order[i + 1]) {
                        continue;
                    }
                    let (n_left, n_right) = (i + 1, n - i - 1);
                    if n_left < min_leaf || n_right < min_leaf {
                        continue;
                    }
                    let mut proxy = 0.0;
                    for c in 0..k {
                        let l = left[c];
                        let r = total[c] - l;
                        proxy += l * l / n_left as f64 + r * r / n_right as f64;
                    }
                    let gain = proxy - base;
                    if best.map_or(true, |(g, _)| gain > g) {
                        best = Some((gain, rank_of(order[i])));
                    }
                }
                best
            }
        };

        best.map(|(gain, last_left_rank)| {
            let mut mask = 0u64;
            for &(code, _) in ordered.iter().take(last_left_rank + 1) {
                mask |= 1u64 << code;
            }
            BestSplit {
                gain,
                feature,
                rule: SplitRule::CategorySet(mask),
            }
        })
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    a + (b - a) / 2.0
}
