//! Pseudo programme start dates for control observations.
//!
//! A regression forest is trained on a random draw of the treated rows to
//! predict months from spell start to programme start. Controls receive
//! the rounded prediction, clamped to `[1, horizon]`, and are kept only if
//! they were still unemployed at that month. The training draw is reused
//! in the main analysis.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::forest::{fit_regression, ForestModel, ForestParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStartConfig {
    /// Share of treated rows drawn to train the start model.
    pub train_share: f64,
    /// Months; predictions are clamped to `[1, horizon]`.
    pub horizon: u32,
    pub forest: ForestParams,
    pub seed: u64,
}

impl Default for PseudoStartConfig {
    fn default() -> Self {
        PseudoStartConfig {
            train_share: 0.20,
            horizon: 6,
            forest: ForestParams::default(),
            seed: 0,
        }
    }
}

impl PseudoStartConfig {
    fn validate(&self) -> Result<()> {
        if !(self.train_share > 0.0 && self.train_share < 1.0) {
            return Err(Error::InvalidArgument {
                name: "train_share",
                message: "must lie in (0, 1)".into(),
            });
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument {
                name: "horizon",
                message: "must be at least 1 month".into(),
            });
        }
        Ok(())
    }
}

/// Per-control audit record emitted alongside the filter decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoStartRecord {
    pub id: u64,
    pub prediction: f64,
    pub pseudo_month: u32,
    pub kept: bool,
}

/// Fits the start-date model on a `train_share` draw of the treated rows.
///
/// `start_month` holds the observed months from spell start to programme
/// start for each treated row, in `[1, horizon]`.
pub fn fit_start_model(
    treated: &FeatureMatrix,
    start_month: &[f64],
    cfg: &PseudoStartConfig,
) -> Result<ForestModel> {
    cfg.validate()?;
    let n = treated.n_rows();
    if start_month.len() != n {
        return Err(Error::InvalidArgument {
            name: "start_month",
            message: "length does not match treated rows".into(),
        });
    }
    if n == 0 {
        return Err(Error::Estimation("empty treated subsample".into()));
    }
    for (i, &m) in start_month.iter().enumerate() {
        if !(1.0..=cfg.horizon as f64).contains(&m) {
            return Err(Error::Cell {
                row: i,
                column: "start_month".into(),
                message: format!("start month {m} outside [1, {}]", cfg.horizon),
            });
        }
    }
    let draw_size = ((cfg.train_share * n as f64).round() as usize)
        .clamp(2 * cfg.forest.min_leaf, n);
    if n < 2 * cfg.forest.min_leaf {
        return Err(Error::Estimation(format!(
            "treated subsample too small: {n} rows for min_leaf {}",
            cfg.forest.min_leaf
        )));
    }
    let mut rng = rng::rng_for(cfg.seed, rng::stream::SUBSAMPLE, 1);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let mut draw: Vec<usize> = indices[..draw_size].to_vec();
    draw.sort_unstable();

    let x = treated.select_rows(&draw);
    let y: Vec<f64> = draw.iter().map(|&r| start_month[r]).collect();
    let params = ForestParams {
        seed: cfg.seed,
        ..cfg.forest.clone()
    };
    fit_regression(&x, &y, &params)
}

/// Clamped nearest-integer pseudo month (ties round up).
pub fn pseudo_month(prediction: f64, horizon: u32) -> u32 {
    (prediction.round() as i64).clamp(1, horizon as i64) as u32
}

/// Assigns pseudo months to controls and keeps those still unemployed at
/// that month (`duration >= pseudo_month`).
pub fn assign_and_filter(
    controls: &FeatureMatrix,
    control_ids: &[u64],
    model: &ForestModel,
    unemployment_duration: &[f64],
    cfg: &PseudoStartConfig,
) -> Result<Vec<PseudoStartRecord>> {
    cfg.validate()?;
    let n = controls.n_rows();
    if unemployment_duration.len() != n || control_ids.len() != n {
        return Err(Error::InvalidArgument {
            name: "unemployment_duration",
            message: "durations and ids must match control rows".into(),
        });
    }
    if controls.n_features() != model.n_features {
        return Err(Error::InvalidArgument {
            name: "controls",
            message: "control features do not match the model schema".into(),
        });
    }
    if let Some(&bad) = unemployment_duration.iter().find(|&&d| d < 0.0) {
        return Err(Error::InvalidArgument {
            name: "unemployment_duration",
            message: format!("negative duration {bad}"),
        });
    }
    Ok((0..n)
        .map(|r| {
            let prediction = model.predict_row(controls.row(r));
            let month = pseudo_month(prediction, cfg.horizon);
            PseudoStartRecord {
                id: control_ids[r],
                prediction,
                pseudo_month: month,
                kept: unemployment_duration[r] >= month as f64,
            }
        })
        .collect())
}
