//! Liver-referenced SUV standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarKind, ScalarVolume};

pub const DEFAULT_MIN_LIVER_VOXELS: usize = 100;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// `(v - mean) / std`
    #[default]
    Zscore,
    /// `v / mean`
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationConfig {
    pub mode: NormalizationMode,
    pub min_liver_voxels: usize,
    pub epsilon: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            mode: NormalizationMode::Zscore,
            min_liver_voxels: DEFAULT_MIN_LIVER_VOXELS,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// SUV mean and population standard deviation inside the liver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiverStats {
    pub mean_suv: f64,
    pub std_suv: f64,
    pub voxel_count: usize,
}

pub fn compute_liver_stats(pet: &ScalarVolume, liver_mask: &LabelVolume) -> Result<LiverStats> {
    compute_liver_stats_with(pet, liver_mask, DEFAULT_MIN_LIVER_VOXELS)
}

pub fn compute_liver_stats_with(
    pet: &ScalarVolume,
    liver_mask: &LabelVolume,
    min_voxels: usize,
) -> Result<LiverStats> {
    pet.grid().ensure_matches(liver_mask.grid(), "liver mask")?;
    liver_mask.ensure_binary()?;
    let values: Vec<f64> = liver_mask
        .labels()
        .iter()
        .zip(pet.values())
        .filter(|(&l, _)| l == 1)
        .map(|(_, &v)| v)
        .collect();
    if values.is_empty() || values.len() < min_voxels {
        return Err(Error::LiverStatsUnavailable(format!(
            "liver mask has {} voxels, need at least {}",
            values.len(),
            min_voxels.max(1)
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let stats = LiverStats {
        mean_suv: mean,
        std_suv: var.sqrt(),
        voxel_count: values.len(),
    };
    if !(stats.mean_suv.is_finite() && stats.std_suv.is_finite()) {
        return Err(Error::LiverStatsUnavailable("non-finite liver SUV".into()));
    }
    Ok(stats)
}

/// Z-score normalization against the liver reference.
pub fn liver_normalize(pet: &ScalarVolume, stats: &LiverStats) -> Result<ScalarVolume> {
    normalize_with(pet, stats, NormalizationMode::Zscore, DEFAULT_EPSILON)
}

pub fn normalize_with(
    pet: &ScalarVolume,
    stats: &LiverStats,
    mode: NormalizationMode,
    epsilon: f64,
) -> Result<ScalarVolume> {
    let values = match mode {
        NormalizationMode::Zscore => {
            if !(stats.std_suv > epsilon) {
                return Err(Error::DegenerateLiver(format!(
                    "liver SUV std {} <= {epsilon}",
                    stats.std_suv
                )));
            }
            let (m, s) = (stats.mean_suv, stats.std_suv);
            pet.values().iter().map(|v| (v - m) / s).collect()
        }
        NormalizationMode::Ratio => {
            if !(stats.mean_suv > epsilon) {
                return Err(Error::DegenerateLiver(format!(
                    "liver SUV mean {} <= {epsilon}",
                    stats.mean_suv
                )));
            }
            pet.values().iter().map(|v| v / stats.mean_suv).collect()
        }
    };
    ScalarVolume::new(*pet.grid(), values, ScalarKind::SuvNorm)
}
