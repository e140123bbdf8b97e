//! Ambiguity-gated residual feature sharing.
//!
//! A short probe pass dumps one residual vector per image at a single
//! (block, step). Their dispersion, measured as the mean distance of the
//! unit-normalized vectors to their centroid, decides whether the identity
//! prompt is ambiguous. Only ambiguous identities get a replacement plan
//! that swaps in residuals cached from the identity-only run.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::StepRange;

pub const DEFAULT_RADIUS_THRESHOLD: f64 = 0.1285;
pub const DEFAULT_PROBE_BLOCK: usize = 23;
pub const DEFAULT_PROBE_STEP: usize = 4;
pub const CACHE_SOURCE: &str = "id";

/// Which run a residual vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ImageKey {
    /// Zero-based per-image index.
    Image(usize),
    /// The identity-only cache run.
    Identity,
}

impl fmt::Display for ImageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageKey::Image(i) => write!(f, "{i}"),
            ImageKey::Identity => f.write_str(CACHE_SOURCE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureKey {
    pub block: usize,
    pub step: usize,
    pub image: ImageKey,
}

impl FeatureKey {
    pub fn new(block: usize, step: usize, image: ImageKey) -> Self {
        Self { block, step, image }
    }

    /// Dump file name, `res_b{block}_s{step}_i{image}.npy`.
    pub fn file_name(&self) -> String {
        format!("res_b{}_s{}_i{}.npy", self.block, self.step, self.image)
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(block {}, step {}, image {})", self.block, self.step, self.image)
    }
}

/// Flattened residual vectors keyed by `(block, step, image)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualFeatureSet {
    entries: BTreeMap<FeatureKey, Vec<f64>>,
}

impl ResidualFeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vectors at the same `(block, step)` must share a length.
    pub fn insert(&mut self, key: FeatureKey, vector: Vec<f64>) -> Result<()> {
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite residual at {key}")));
        }
        if let Some((other, v)) = self
            .entries
            .iter()
            .find(|(k, _)| k.block == key.block && k.step == key.step)
        {
            if v.len() != vector.len() {
                return Err(Error::Shape(format!(
                    "residual at {key} has length {}, {other} has {}",
                    vector.len(),
                    v.len()
                )));
            }
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &FeatureKey> {
        self.entries.keys()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfsConfig {
    pub threshold: f64,
    pub probe_block: usize,
    pub probe_step: usize,
    pub share_blocks: Vec<usize>,
    pub share_steps: StepRange,
}

impl Default for AfsConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_RADIUS_THRESHOLD,
            probe_block: DEFAULT_PROBE_BLOCK,
            probe_step: DEFAULT_PROBE_STEP,
            share_blocks: vec![0, 1, 2, 17, 18],
            share_steps: StepRange::new(1, 6),
        }
    }
}

impl AfsConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(Error::invariant(
                "threshold ≥ 0",
                format!("threshold = {}", self.threshold),
            ));
        }
        if self.share_blocks.is_empty() || self.share_steps.is_empty() {
            return Err(Error::invariant(
                "plan lists ≥ 1 block and a nonempty step interval",
                format!("blocks {:?}, steps {:?}", self.share_blocks, self.share_steps),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ambiguity {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityDecision {
    pub radius: f64,
    pub threshold: f64,
    pub label: Ambiguity,
    pub probe_block: usize,
    pub probe_step: usize,
}

impl AmbiguityDecision {
    /// Strict `>`: a radius equal to the threshold is low ambiguity.
    pub fn from_radius(radius: f64, threshold: f64, probe_block: usize, probe_step: usize) -> Self {
        let label = if radius > threshold {
            Ambiguity::High
        } else {
            Ambiguity::Low
        };
        Self {
            radius,
            threshold,
            label,
            probe_block,
            probe_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub share_blocks: Vec<usize>,
    pub share_steps: StepRange,
    pub active: bool,
    pub cache_source: String,
}

/// Mean distance from each unit-normalized vector to the centroid.
pub fn euclidean_radius(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::TooFewInputs {
            needed: 2,
            got: features.len(),
        });
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("residual vectors differ in length".into()));
    }
    let unit = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::DegenerateVector(format!("residual vector {i} has zero norm")))
            } else {
                Ok(f.iter().map(|x| x / n).collect::<Vec<_>>())
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let count = unit.len() as f64;
    let mut centroid = vec![0.0; dim];
    for u in &unit {
        for (c, x) in centroid.iter_mut().zip(u) {
            *c += x;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= count);

    let total: f64 = unit
        .iter()
        .map(|u| {
            u.iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / count)
}

/// Classify from the `k` probe vectors at `(probe_block, probe_step)`.
pub fn classify_ambiguity(set: &ResidualFeatureSet, k: usize, cfg: &AfsConfig) -> Result<AmbiguityDecision> {
    if k < 2 {
        return Err(Error::TooFewInputs { needed: 2, got: k });
    }
    let keys: Vec<FeatureKey> = (0..k)
        .map(|i| FeatureKey::new(cfg.probe_block, cfg.probe_step, ImageKey::Image(i)))
        .collect();
    let missing: Vec<String> = keys
        .iter()
        .filter(|key| set.get(key).is_none())
        .map(ToString::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingProbeFeatures(missing));
    }
    let vectors: Vec<Vec<f64>> = keys.iter().map(|key| set.get(key).unwrap().to_vec()).collect();
    let radius = euclidean_radius(&vectors)?;
    Ok(AmbiguityDecision::from_radius(
        radius,
        cfg.threshold,
        cfg.probe_block,
        cfg.probe_step,
    ))
}

pub fn build_plan(decision: &AmbiguityDecision, cfg: &AfsConfig) -> SharingPlan {
    SharingPlan {
        share_blocks: cfg.share_blocks.clone(),
        share_steps: cfg.share_steps,
        active: decision.label == Ambiguity::High,
        cache_source: CACHE_SOURCE.to_string(),
    }
}

/// Cached identity-run residual to substitute at `(block, step)`, if the
/// plan calls for one.
pub fn select_replacement<'a>(
    cache: &'a ResidualFeatureSet,
    block: usize,
    step: usize,
    plan: &SharingPlan,
) -> Result<Option<&'a [f64]>> {
    if !plan.active || !plan.share_blocks.contains(&block) || !plan.share_steps.contains(step) {
        return Ok(None);
    }
    cache
        .get(&FeatureKey::new(block, step, ImageKey::Identity))
        .map(Some)
        .ok_or(Error::CacheMiss { block, step })
}
