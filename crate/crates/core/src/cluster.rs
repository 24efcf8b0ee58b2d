//! k-means++ clustering of IATE vectors with silhouette-based selection of
//! the cluster count and a minimum-cluster-share requirement, plus
//! covariate profiling of the least- and most-benefiting clusters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::mean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansParams {
    /// Candidate cluster counts.
    pub k_range: Vec<usize>,
    /// Minimum share of observations per cluster.
    pub min_share: f64,
    /// Random restarts per k; the best by within-cluster sum of squares
    /// wins.
    pub n_init: usize,
    /// Lloyd stops when the largest centroid movement falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KmeansParams {
    fn default() -> Self {
        KmeansParams {
            k_range: (2..=8).collect(),
            min_share: 0.01,
            n_init: 10,
            tol: 1e-6,
            max_iter: 300,
            seed: 0,
        }
    }
}

/// Fitted clustering: centroids, assignments, silhouette, shares, and the
/// WCSS trace of the winning run (nonincreasing across Lloyd iterations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<u32>,
    pub mean_silhouette: f64,
    pub shares: Vec<f64>,
    pub wcss_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// One candidate-k solution from a Lloyd run.
struct RunResult {
    centroids: Vec<Vec<f64>>,
    assignment: Vec<u32>,
    wcss: f64,
    wcss_trace: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centroid uniform, later ones drawn with
/// probability proportional to the squared distance to the nearest chosen
/// centroid.
fn seed_centroids(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let chosen = if total <= 0.0 {
            // All points coincide with a centroid already; any draw works.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        centroids.push(points[chosen].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centroids.last().unwrap());
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    centroids
}

fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    params: &KmeansParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> RunResult {
    let n = points.len();
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignment = vec![0u32; n];
    let mut wcss_trace = Vec::new();

    for _iter in 0..params.max_iter {
        // Assignment step.
        let mut wcss = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            assignment[i] = c as u32;
            wcss += d;
        }
        wcss_trace.push(wcss);

        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an emptied centroid at the farthest point.
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        nearest_centroid(a, &centroids)
                            .1
                            .partial_cmp(&nearest_centroid(b, &centroids).1)
                            .unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                movement = f64::INFINITY;
                centroids[c] = points[far].clone();
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(squared_distance(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if movement < params.tol {
            break;
        }
    }

    // Final assignment consistent with the final centroids.
    let mut wcss = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest_centroid(p, &centroids);
        assignment[i] = c as u32;
        wcss += d;
    }
    wcss_trace.push(wcss);
    RunResult {
        centroids,
        assignment,
        wcss,
        wcss_trace,
    }
}

/// Mean silhouette coefficient over all points (Euclidean); 0 when k = 1.
pub fn mean_silhouette(points: &[Vec<f64>], assignment: &[u32], k: usize) -> f64 {
    if k < 2 {
        return 0.0;
    }
    let n = points.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c as usize].push(i);
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = assignment[i] as usize;
        let a = {
            let peers = &members[own];
            if peers.len() <= 1 {
                0.0
            } else {
                peers
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| squared_distance(&points[i], &points[j]).sqrt())
                    .sum::<f64>()
                    / (peers.len() - 1) as f64
            }
        };
        let b = (0..k)
            .filter(|&c| c != own && !members[c].is_empty())
            .map(|c| {
                members[c]
                    .iter()
                    .map(|&j| squared_distance(&points[i], &points[j]).sqrt())
                    .sum::<f64>()
                    / members[c].len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    total / n as f64
}

/// Fits k-means++ for every candidate k and picks the k with the highest
/// mean silhouette among solutions whose cluster shares all reach
/// `min_share`; if none qualifies, the smallest candidate k wins with a
/// warning. All points identical forces k = 1 with a degeneracy warning.
pub fn kmeanspp_fit(points: &[Vec<f64>], params: &KmeansParams) -> Result<ClusterModel> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidArgument {
            name: "points",
            message: "no points to cluster".into(),
        });
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument {
            name: "points",
            message: "points must share a nonzero dimension".into(),
        });
    }
    if params.k_range.is_empty() {
        return Err(Error::InvalidArgument {
            name: "k_range",
            message: "no candidate cluster counts".into(),
        });
    }
    if let Some(&bad) = params.k_range.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidArgument {
            name: "k_range",
            message: format!("candidate k = {bad} outside 1..={n}"),
        });
    }

    let all_identical = points.windows(2).all(|w| w[0] == w[1]);
    if all_identical && params.k_range.iter().any(|&k| k >= 2) {
        return Ok(ClusterModel {
            k: 1,
            centroids: vec![points[0].clone()],
            assignment: vec![0; n],
            mean_silhouette: 0.0,
            shares: vec![1.0],
            wcss_trace: vec![0.0],
            warnings: vec!["all points identical; k forced to 1".to_string()],
        });
    }

    struct Candidate {
        k: usize,
        run: RunResult,
        silhouette: f64,
        shares: Vec<f64>,
        meets_min_share: bool,
    }

    let candidates: Vec<Candidate> = params
        .k_range
        .par_iter()
        .map(|&k| {
            let run = (0..params.n_init)
                .map(|init| {
                    let mut rng =
                        rng::rng_for(params.seed, rng::stream::KMEANS, (k * 1000 + init) as u64);
                    lloyd(points, k, params, &mut rng)
                })
                .min_by(|a, b| a.wcss.partial_cmp(&b.wcss).unwrap())
                .expect("n_init >= 1");
            let silhouette = mean_silhouette(points, &run.assignment, k);
            let mut shares = vec![0.0; k];
            for &c in &run.assignment {
                shares[c as usize] += 1.0 / n as f64;
            }
            let meets_min_share = shares.iter().all(|&s| s >= params.min_share);
            Candidate {
                k,
                run,
                silhouette,
                shares,
                meets_min_share,
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let chosen = if let Some(best) = candidates
        .iter()
        .filter(|c| c.meets_min_share)
        .max_by(|a, b| {
            a.silhouette
                .partial_cmp(&b.silhouette)
                .unwrap()
                .then(b.k.cmp(&a.k))
        }) {
        best
    } else {
        warnings.push(format!(
            "no candidate k respects the minimum cluster share {}; smallest k kept",
            params.min_share
        ));
        candidates.iter().min_by_key(|c| c.k).unwrap()
    };

    Ok(ClusterModel {
        k: chosen.k,
        centroids: chosen.run.centroids.clone(),
        assignment: chosen.run.assignment.clone(),
        mean_silhouette: chosen.silhouette,
        shares: chosen.shares.clone(),
        wcss_trace: chosen.run.wcss_trace.clone(),
        warnings,
    })
}

/// Covariate profile of one cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster: u32,
    pub share: f64,
    pub mean_iate: f64,
    pub covariate_means: Vec<f64>,
    pub least_benefiting: bool,
    pub most_benefiting: bool,
}

/// Per-cluster covariate means sorted by mean IATE (first point column),
/// with the least- and most-benefiting clusters flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterProfileTable {
    pub covariates: Vec<String>,
    pub profiles: Vec<ClusterProfile>,
}

impl ClusterProfileTable {
    pub fn least(&self) -> &ClusterProfile {
        self.profiles.iter().find(|p| p.least_benefiting).unwrap()
    }

    pub fn most(&self) -> &ClusterProfile {
        self.profiles.iter().find(|p| p.most_benefiting).unwrap()
    }
}

pub fn profile_clusters(
    model: &ClusterModel,
    points: &[Vec<f64>],
    data: &Dataset,
    covariates: &[String],
) -> Result<ClusterProfileTable> {
    if model.assignment.len() != data.n_rows() || points.len() != data.n_rows() {
        return Err(Error::InvalidArgument {
            name: "model",
            message: "assignment does not match the dataset rows".into(),
        });
    }
    let cols: Vec<usize> = covariates
        .iter()
        .map(|name| {
            data.covariate_index(name).ok_or_else(|| Error::InvalidArgument {
                name: "covariates",
                message: format!("unknown covariate `{name}`"),
            })
        })
        .collect::<Result<_>>()?;

    let mut profiles: Vec<ClusterProfile> = (0..model.k as u32)
        .map(|cluster| {
            let members: Vec<usize> = model
                .assignment
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == cluster)
                .map(|(i, _)| i)
                .collect();
            let iates: Vec<f64> = members.iter().map(|&i| points[i][0]).collect();
            let covariate_means = cols
                .iter()
                .map(|&col| {
                    let values: Vec<f64> =
                        members.iter().map(|&r| data.covariate_value(r, col)).collect();
                    mean(&values)
                })
                .collect();
            ClusterProfile {
                cluster,
                share: members.len() as f64 / data.n_rows() as f64,
                mean_iate: mean(&iates),
                covariate_means,
                least_benefiting: false,
                most_benefiting: false,
            }
        })
        .collect();
    profiles.sort_by(|a, b| {
        a.mean_iate
            .partial_cmp(&b.mean_iate)
            .unwrap()
            .then(a.cluster.cmp(&b.cluster))
    });
    profiles.first_mut().unwrap().least_benefiting = true;
    profiles.last_mut().unwrap().most_benefiting = true;
    Ok(ClusterProfileTable {
        covariates: covariates.to_vec(),
        profiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnKind, ColumnSpec, Role, Schema};
    use rand_distr::{Distribution, StandardNormal};

    fn one_d(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn k1_centroid_is_mean() {
        let points = one_d(&[1.0, 2.0, 3.0, 6.0]);
        let params = KmeansParams {
            k_range: vec![1],
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        assert_eq!(model.k, 1);
        assert!((model.centroids[0][0] - 3.0).abs() < 1e-12);
        assert_eq!(model.shares, vec![1.0]);
    }

    #[test]
    fn two_separated_groups_split_perfectly() {
        let points = one_d(&[0.0, 0.1, 10.0, 10.1]);
        let params = KmeansParams {
            k_range: vec![2],
            min_share: 0.01,
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        // Exhaustive check over all 2^4 assignments: the optimal WCSS
        // partition is {0,1} vs {2,3}.
        let mut best = (f64::INFINITY, 0u32);
        for mask in 0u32..16 {
            let groups: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            if groups.iter().all(|&g| g == 0) || groups.iter().all(|&g| g == 1) {
                continue;
            }
            let mut wcss = 0.0;
            for g in 0..2 {
                let vals: Vec<f64> = (0..4)
                    .filter(|&i| groups[i] == g)
                    .map(|i| points[i][0])
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let m = mean(&vals);
                wcss += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            if wcss < best.0 {
                best = (wcss, mask);
            }
        }
        assert_eq!(best.1 & 0b11, (best.1 >> 2) ^ 0b11 & 0b11);
        assert_eq!(model.assignment[0], model.assignment[1]);
        assert_eq!(model.assignment[2], model.assignment[3]);
        assert_ne!(model.assignment[0], model.assignment[2]);
        let wcss = model.wcss_trace.last().unwrap();
        assert!((wcss - best.0).abs() < 1e-9, "wcss {wcss} vs {}", best.0);
    }

    /// Direct restatement of the silhouette definition for the oracle.
    fn silhouette_oracle(points: &[Vec<f64>], assignment: &[u32], k: usize) -> f64 {
        let n = points.len();
        let dist = |a: usize, b: usize| -> f64 {
            points[a]
                .iter()
                .zip(&points[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut total = 0.0;
        for i in 0..n {
            let own: Vec<usize> = (0..n)
                .filter(|&j| assignment[j] == assignment[i] && j != i)
                .collect();
            let a = if own.is_empty() {
                0.0
            } else {
                own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64
            };
            let mut b = f64::INFINITY;
            for c in 0..k as u32 {
                if c == assignment[i] {
                    continue;
                }
                let others: Vec<usize> = (0..n).filter(|&j| assignment[j] == c).collect();
                if others.is_empty() {
                    continue;
                }
                let m = others.iter().map(|&j| dist(i, j)).sum::<f64>() / others.len() as f64;
                b = b.min(m);
            }
            if a.max(b) > 0.0 {
                total += (b - a) / a.max(b);
            }
        }
        total / n as f64
    }

    #[test]
    fn silhouette_selects_two_for_two_groups() {
        let points = one_d(&[0.0, 0.1, 0.05, 10.0, 10.1, 10.05]);
        let params = KmeansParams {
            k_range: vec![2, 3, 4],
            min_share: 0.0,
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        assert_eq!(model.k, 2, "silhouette should pick 2 clusters");
        assert!(model.mean_silhouette > 0.9);
        let oracle = silhouette_oracle(&points, &model.assignment, model.k);
        assert!((model.mean_silhouette - oracle).abs() < 1e-12);
    }

    #[test]
    fn silhouette_in_range_everywhere() {
        let mut rng = crate::rng::rng_for(17, 79, 0);
        for trial in 0..20 {
            let n = 20 + trial;
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    vec![v, StandardNormal.sample(&mut rng)]
                })
                .collect();
            let params = KmeansParams {
                k_range: vec![3],
                min_share: 0.0,
                n_init: 2,
                ..Default::default()
            };
            let model = kmeanspp_fit(&points, &params).unwrap();
            assert!((-1.0..=1.0).contains(&model.mean_silhouette));
        }
    }

    #[test]
    fn lloyd_objective_nonincreasing() {
        let mut rng = crate::rng::rng_for(18, 78, 0);
        for trial in 0..10 {
            let points: Vec<Vec<f64>> = (0..60)
                .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
                .collect();
            let params = KmeansParams {
                k_range: vec![2 + trial % 4],
                min_share: 0.0,
                n_init: 3,
                ..Default::default()
            };
            let model = kmeanspp_fit(&points, &params).unwrap();
            for w in model.wcss_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "trial {trial}: WCSS rose from {} to {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn identical_points_force_k1_with_warning() {
        let points = one_d(&[2.5; 30]);
        let params = KmeansParams {
            k_range: vec![2, 3],
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        assert_eq!(model.k, 1);
        assert!(!model.warnings.is_empty());
        assert_eq!(model.centroids[0], vec![2.5]);
    }

    #[test]
    fn min_share_filters_candidate_ks() {
        // One far outlier: at k = 2 it forms a 1/41-share cluster, below a
        // 10% floor, so no candidate qualifies and the smallest k is kept
        // with a warning.
        let mut values = vec![0.0; 40];
        values.push(100.0);
        let points = one_d(&values);
        let params = KmeansParams {
            k_range: vec![2, 3],
            min_share: 0.10,
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        assert_eq!(model.k, 2);
        assert!(model
            .warnings
            .iter()
            .any(|w| w.contains("minimum cluster share")));
    }

    #[test]
    fn shares_sum_to_one() {
        let mut rng = crate::rng::rng_for(19, 77, 0);
        let points: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![StandardNormal.sample(&mut rng)])
            .collect();
        let params = KmeansParams {
            k_range: vec![4],
            min_share: 0.0,
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        let total: f64 = model.shares.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    fn profile_dataset(education: Vec<f64>) -> Dataset {
        let n = education.len();
        let schema = Schema::new(vec![
            ColumnSpec::new("education", ColumnKind::Continuous, &[Role::Confounder]),
            ColumnSpec::new(
                "d",
                ColumnKind::UnorderedCategorical { categories: 2 },
                &[Role::Treatment],
            ),
            ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]),
        ])
        .unwrap();
        let treatment: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        Dataset::from_parts(schema, education, treatment, vec![0.0; n], None).unwrap()
    }

    #[test]
    fn single_cluster_least_equals_most() {
        let points = one_d(&[1.0, 1.1, 0.9, 1.05]);
        let params = KmeansParams {
            k_range: vec![1],
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        let data = profile_dataset(vec![1.0, 2.0, 3.0, 4.0]);
        let table =
            profile_clusters(&model, &points, &data, &["education".to_string()]).unwrap();
        assert_eq!(table.profiles.len(), 1);
        assert!(table.profiles[0].least_benefiting && table.profiles[0].most_benefiting);
    }

    #[test]
    fn education_drives_most_benefiting_cluster() {
        // IATE rises with education: the most-benefiting cluster must show
        // a higher mean education than the least-benefiting one.
        let mut rng = crate::rng::rng_for(20, 76, 0);
        let n = 400;
        let education: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let points: Vec<Vec<f64>> = education
            .iter()
            .map(|&e| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                vec![e + 0.1 * noise]
            })
            .collect();
        let params = KmeansParams {
            k_range: vec![3],
            min_share: 0.0,
            seed: 20,
            ..Default::default()
        };
        let model = kmeanspp_fit(&points, &params).unwrap();
        let data = profile_dataset(education);
        let table =
            profile_clusters(&model, &points, &data, &["education".to_string()]).unwrap();
        assert!(
            table.most().covariate_means[0] > table.least().covariate_means[0],
            "most {} vs least {}",
            table.most().covariate_means[0],
            table.least().covariate_means[0]
        );
        let total: f64 = table.profiles.iter().map(|p| p.share).sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }
}
