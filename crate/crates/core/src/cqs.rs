//! Consistency Quality Score.
//!
//! Per image: `t` is the alignment with the combined identity + per-image
//! prompt, `a` the alignment with the per-image prompt alone, and `d` the
//! mean perceptual distance to the other images of its set. The distance is
//! inverted and min–max mapped onto the dataset range of `t`, adjusted by
//! gap-driven penalties and rewards, and combined with `t` by a harmonic
//! mean. The score is the flat mean over every image in the dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for symmetry and zero-diagonal checks on `dist`.
pub const DIST_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSet {
    pub set_id: String,
    pub t: Vec<f64>,
    pub a: Vec<f64>,
    pub dist: Vec<Vec<f64>>,
}

impl ScoreSet {
    pub fn k(&self) -> usize {
        self.t.len()
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.set_id;
        let k = self.t.len();
        if k < 2 {
            return Err(Error::invariant("k ≥ 2", format!("set {id} has {k} images")));
        }
        if self.a.len() != k || self.dist.len() != k || self.dist.iter().any(|r| r.len() != k) {
            return Err(Error::invariant(
                "t, a and dist describe the same k images",
                format!(
                    "set {id}: |t| = {k}, |a| = {}, dist is {}×?",
                    self.a.len(),
                    self.dist.len()
                ),
            ));
        }
        for (name, xs) in [("t", &self.t), ("a", &self.a)] {
            if let Some((i, x)) = xs.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
                return Err(Error::invariant(
                    "scores in [0, 1]",
                    format!("set {id}: {name}[{i}] = {x}"),
                ));
            }
        }
        for i in 0..k {
            if self.dist[i][i].abs() > DIST_TOLERANCE {
                return Err(Error::invariant(
                    "dist zero diagonal",
                    format!("set {id}: dist[{i}][{i}] = {}", self.dist[i][i]),
                ));
            }
            for j in 0..k {
                let x = self.dist[i][j];
                if !(0.0..=1.0).contains(&x) && i != j {
                    return Err(Error::invariant(
                        "dist entries in [0, 1]",
                        format!("set {id}: dist[{i}][{j}] = {x}"),
                    ));
                }
                if (x - self.dist[j][i]).abs() > DIST_TOLERANCE {
                    return Err(Error::invariant(
                        "dist symmetric",
                        format!("set {id}: dist[{i}][{j}] = {x}, dist[{j}][{i}] = {}", self.dist[j][i]),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    pub sets: Vec<ScoreSet>,
}

impl ScoreTable {
    pub fn validate(&self) -> Result<()> {
        self.sets.iter().try_for_each(ScoreSet::validate)
    }

    pub fn n_images(&self) -> usize {
        self.sets.iter().map(ScoreSet::k).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqsConfig {
    pub mu: f64,
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for CqsConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            tau: 0.5,
            lambda: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl CqsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invariant("mu ≥ 0", format!("mu = {}", self.mu)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invariant("tau ≥ 0", format!("tau = {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invariant(
                "lambda in [0, 1]",
                format!("lambda = {}", self.lambda),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invariant("epsilon > 0", format!("epsilon = {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub set_id: String,
    pub index: usize,
    pub t: f64,
    pub a: f64,
    pub d_raw: f64,
    pub d_scaled: f64,
    pub delta: f64,
    pub penalty: f64,
    pub reward: f64,
    pub d_star: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqsBreakdown {
    pub config: CqsConfig,
    pub n_sets: usize,
    pub n_images: usize,
    pub delta_pos_mean: f64,
    pub delta_neg_mean: f64,
    pub images: Vec<ImageScore>,
    pub cqs_har: f64,
}

/// Mean of row `i` of a distance matrix, diagonal excluded.
pub fn identity_distance(dist: &[Vec<f64>], i: usize) -> Result<f64> {
    let k = dist.len();
    if k < 2 {
        return Err(Error::TooFewImages(k));
    }
    let row = dist.get(i).ok_or(Error::IndexOutOfRange { index: i + 1, len: k })?;
    let total: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, d)| d).sum();
    Ok(total / (k - 1) as f64)
}

fn range(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Map `1 − d` linearly from its own range onto the range of `t`.
///
/// With a zero-width source or target range each value is instead clamped
/// into `[min t, max t]`.
pub fn rescale_identity(d_raw: &[f64], t_all: &[f64]) -> Result<Vec<f64>> {
    if d_raw.is_empty() || t_all.is_empty() {
        return Err(Error::EmptyInput("no identity distances to rescale".into()));
    }
    let similarity: Vec<f64> = d_raw.iter().map(|d| 1.0 - d).collect();
    let (x_min, x_max) = range(&similarity);
    let (t_min, t_max) = range(t_all);
    if x_max == x_min || t_max == t_min {
        return Ok(similarity.iter().map(|x| x.clamp(t_min, t_max)).collect());
    }
    let slope = (t_max - t_min) / (x_max - x_min);
    Ok(similarity.iter().map(|x| t_min + (x - x_min) * slope).collect())
}

fn conditional_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn compute_cqs(table: &ScoreTable, cfg: &CqsConfig) -> Result<CqsBreakdown> {
    cfg.validate()?;
    table.validate()?;
    if table.sets.is_empty() {
        return Err(Error::EmptyInput("score table has no sets".into()));
    }

    // First pass: dataset-level statistics.
    let mut images = Vec::with_capacity(table.n_images());
    for set in &table.sets {
        for i in 0..set.k() {
            images.push(ImageScore {
                set_id: set.set_id.clone(),
                index: i,
                t: set.t[i],
                a: set.a[i],
                d_raw: identity_distance(&set.dist, i)?,
                d_scaled: 0.0,
                delta: set.a[i] - set.t[i],
                penalty: 0.0,
                reward: 0.0,
                d_star: 0.0,
                h: 0.0,
            });
        }
    }
    let d_raw: Vec<f64> = images.iter().map(|im| im.d_raw).collect();
    let t_all: Vec<f64> = images.iter().map(|im| im.t).collect();
    let scaled = rescale_identity(&d_raw, &t_all)?;
    let delta_pos_mean = conditional_mean(images.iter().map(|im| im.delta).filter(|&g| g > 0.0));
    let delta_neg_mean = conditional_mean(images.iter().map(|im| im.delta).filter(|&g| g < 0.0));

    // Second pass: per-image adjustment and harmonic mean.
    let lambda = cfg.lambda;
    for (im, s) in images.iter_mut().zip(scaled) {
        im.d_scaled = s;
        im.penalty = (1.0 - lambda) * delta_neg_mean.abs() + lambda * (-im.delta).max(0.0);
        im.reward = (1.0 - lambda) * delta_pos_mean + lambda * im.delta.max(0.0);
        let mut d_star = s;
        if im.delta < 0.0 {
            d_star -= cfg.mu * im.penalty;
        }
        if im.delta > 0.0 {
            d_star += cfg.tau * im.reward;
        }
        im.d_star = d_star.max(0.0);
        im.h = 2.0 * im.t * im.d_star / (im.t + im.d_star + cfg.epsilon);
    }
    let cqs_har = images.iter().map(|im| im.h).sum::<f64>() / images.len() as f64;

    Ok(CqsBreakdown {
        config: *cfg,
        n_sets: table.sets.len(),
        n_images: images.len(),
        delta_pos_mean,
        delta_neg_mean,
        images,
        cqs_har,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mu: f64,
    pub tau: f64,
    pub cqs: f64,
}

/// `compute_cqs` at each `(mu, tau)`, other settings from `base`.
pub fn sweep_weights(table: &ScoreTable, base: &CqsConfig, grid: &[(f64, f64)]) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&(mu, tau)| {
            let cfg = CqsConfig { mu, tau, ..*base };
            compute_cqs(table, &cfg).map(|b| SweepPoint {
                mu,
                tau,
                cqs: b.cqs_har,
            })
        })
        .collect()
}

/// `(w, w)` for `w = 0.1, 0.2, …, 1.0`.
pub fn joint_weight_grid() -> Vec<(f64, f64)> {
    (1..=10).map(|i| f64::from(i) / 10.0).map(|w| (w, w)).collect()
}
