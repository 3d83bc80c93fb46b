//! Binary lesion masks: the SUV threshold baseline, or an imported mask.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{mask_components, nifti, Connectivity, Grid3, Interpolation, LabelVolume, Resample, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentationMode {
    #[default]
    Threshold,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub mode: SegmentationMode,
    pub suv_threshold: f64,
    pub znorm_threshold: f64,
    pub combine: Combine,
    pub min_lesion_voxels: usize,
    pub connectivity: Connectivity,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            mode: SegmentationMode::Threshold,
            suv_threshold: 2.5,
            znorm_threshold: 2.0,
            combine: Combine::And,
            min_lesion_voxels: 3,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.suv_threshold.is_finite() || !self.znorm_threshold.is_finite() {
            return Err(Error::Config("segmentation thresholds must be finite".into()));
        }
        if self.min_lesion_voxels < 1 {
            return Err(Error::Config("min_lesion_voxels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Voxel is foreground iff `SUV > suv_threshold` combined with
/// `SUVnorm > znorm_threshold`; components below `min_lesion_voxels` are dropped.
pub fn threshold_segment(pet: &ScalarVolume, petnorm: &ScalarVolume, cfg: &SegmentationConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    pet.grid().ensure_matches(petnorm.grid(), "normalized PET")?;
    let raw: Vec<bool> = pet
        .values()
        .iter()
        .zip(petnorm.values())
        .map(|(&s, &z)| {
            let a = s > cfg.suv_threshold;
            let b = z > cfg.znorm_threshold;
            match cfg.combine {
                Combine::And => a && b,
                Combine::Or => a || b,
            }
        })
        .collect();
    let grid = *pet.grid();
    let filtered = remove_small_components(&grid, &raw, cfg.min_lesion_voxels, cfg.connectivity);
    LabelVolume::binary(grid, &filtered, "lesion")
}

/// Threshold segmentation on SUV alone, for runs without a liver reference.
pub fn suv_threshold_segment(pet: &ScalarVolume, cfg: &SegmentationConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    let raw: Vec<bool> = pet.values().iter().map(|&s| s > cfg.suv_threshold).collect();
    let grid = *pet.grid();
    let filtered = remove_small_components(&grid, &raw, cfg.min_lesion_voxels, cfg.connectivity);
    LabelVolume::binary(grid, &filtered, "lesion")
}

pub fn remove_small_components(grid: &Grid3, mask: &[bool], min_voxels: usize, connectivity: Connectivity) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for comp in mask_components(grid, mask, connectivity) {
        if comp.len() >= min_voxels {
            for &i in comp.indices() {
                out[i] = true;
            }
        }
    }
    out
}

/// Reads a lesion mask, binarizes any nonzero label and resamples it
/// (nearest) onto `target`.
pub fn import_lesion_mask(path: impl AsRef<Path>, target: &Grid3) -> Result<LabelVolume> {
    let path = path.as_ref();
    let labels = nifti::read_labels(path, Default::default())?;
    let mask = labels.binarized("lesion");
    let mask = if mask.grid().matches(target) {
        mask
    } else {
        mask.resample(target, Interpolation::Nearest)?
    };
    let n = mask.foreground_count();
    if n == 0 {
        warn!("lesion mask {} has no foreground voxels", path.display());
    } else {
        log::info!("lesion mask {}: {n} foreground voxels", path.display());
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::normalization::{compute_liver_stats_with, liver_normalize, LiverStats};
    use crate::volume::ScalarKind;

    fn grid() -> Grid3 {
        Grid3::ras([8, 8, 8], [2.0; 3], [0.0; 3]).unwrap()
    }

    fn norm(pet: &ScalarVolume, mean: f64, std: f64) -> ScalarVolume {
        let s = LiverStats {
            mean_suv: mean,
            std_suv: std,
            voxel_count: 100,
        };
        liver_normalize(pet, &s).unwrap()
    }

    #[test]
    fn all_zero_pet_gives_empty_mask() {
        let pet = ScalarVolume::filled(grid(), 0.0, ScalarKind::Suv).unwrap();
        let m = threshold_segment(&pet, &norm(&pet, 2.0, 0.5), &SegmentationConfig::default()).unwrap();
        assert_eq!(m.foreground_count(), 0);
    }

    #[test]
    fn four_voxel_blob_is_recovered_exactly() {
        let g = grid();
        let mut v = vec![0.5; g.len()];
        let blob = [g.linear(3, 3, 3), g.linear(4, 3, 3), g.linear(3, 4, 3), g.linear(3, 3, 4)];
        for &i in &blob {
            v[i] = 8.0;
        }
        let pet = ScalarVolume::new(g, v, ScalarKind::Suv).unwrap();
        // z = (8 - 2) / 0.5 = 12; background z = -3
        let m = threshold_segment(&pet, &norm(&pet, 2.0, 0.5), &SegmentationConfig::default()).unwrap();
        let mut expected = blob.to_vec();
        expected.sort();
        assert_eq!(m.foreground().indices(), expected.as_slice());
    }

    #[test]
    fn two_voxel_blob_is_filtered() {
        let g = grid();
        let mut v = vec![0.5; g.len()];
        v[g.linear(1, 1, 1)] = 8.0;
        v[g.linear(2, 1, 1)] = 8.0;
        let pet = ScalarVolume::new(g, v, ScalarKind::Suv).unwrap();
        let m = threshold_segment(&pet, &norm(&pet, 2.0, 0.5), &SegmentationConfig::default()).unwrap();
        assert_eq!(m.foreground_count(), 0);
        let cfg = SegmentationConfig {
            min_lesion_voxels: 2,
            ..Default::default()
        };
        assert_eq!(threshold_segment(&pet, &norm(&pet, 2.0, 0.5), &cfg).unwrap().foreground_count(), 2);
    }

    #[test]
    fn suv_only_ignores_liver_reference() {
        let g = grid();
        let mut v = vec![0.5; g.len()];
        for i in [g.linear(1, 1, 1), g.linear(2, 1, 1), g.linear(3, 1, 1)] {
            v[i] = 2.6;
        }
        let pet = ScalarVolume::new(g, v, ScalarKind::Suv).unwrap();
        // z = (2.6 - 2) / 0.5 = 1.2 fails the combined rule
        let cfg = SegmentationConfig::default();
        assert_eq!(threshold_segment(&pet, &norm(&pet, 2.0, 0.5), &cfg).unwrap().foreground_count(), 0);
        assert_eq!(suv_threshold_segment(&pet, &cfg).unwrap().foreground_count(), 3);
    }

    #[test]
    fn external_mask_round_trips_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let mut labels = vec![0u32; g.len()];
        labels[5] = 7;
        labels[77] = 7;
        let vol = LabelVolume::with_default_names(g, labels, Default::default()).unwrap();
        let p = dir.path().join("m.nii.gz");
        nifti::write_labels(&p, &vol).unwrap();
        let m = import_lesion_mask(&p, &g).unwrap();
        assert_eq!(m.foreground().indices(), &[5, 77]);
        assert!(m.labels().iter().all(|&l| l <= 1));
    }

    fn random_pet(values: &[f64]) -> (ScalarVolume, LabelVolume) {
        let g = Grid3::ras([6, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
        let v: Vec<f64> = (0..g.len()).map(|i| values[i % values.len()]).collect();
        let liver: Vec<bool> = (0..g.len()).map(|i| i < 72).collect();
        (
            ScalarVolume::new(g, v, ScalarKind::Suv).unwrap(),
            LabelVolume::binary(g, &liver, "liver").unwrap(),
        )
    }

    proptest! {
        #[test]
        fn raising_suv_threshold_never_adds_voxels(
            values in proptest::collection::vec(0.0f64..10.0, 50..216),
            t1 in 0.0f64..6.0,
            dt in 0.0f64..4.0,
        ) {
            let (pet, liver) = random_pet(&values);
            let s = compute_liver_stats_with(&pet, &liver, 1).unwrap();
            prop_assume!(s.std_suv > 1e-3);
            let z = liver_normalize(&pet, &s).unwrap();
            let lo = SegmentationConfig { suv_threshold: t1, ..Default::default() };
            let hi = SegmentationConfig { suv_threshold: t1 + dt, ..Default::default() };
            let a = threshold_segment(&pet, &z, &lo).unwrap();
            let b = threshold_segment(&pet, &z, &hi).unwrap();
            prop_assert!(b.labels().iter().zip(a.labels()).all(|(&hb, &ha)| hb <= ha));
        }

        #[test]
        fn znorm_only_is_invariant_to_affine_rescaling(
            values in proptest::collection::vec(0.0f64..10.0, 50..216),
            scale in 0.2f64..5.0,
            shift in 0.0f64..3.0,
        ) {
            let (pet, liver) = random_pet(&values);
            let cfg = SegmentationConfig {
                suv_threshold: -1.0,
                ..Default::default()
            };
            let s = compute_liver_stats_with(&pet, &liver, 1).unwrap();
            prop_assume!(s.std_suv > 1e-3);
            let base = threshold_segment(&pet, &liver_normalize(&pet, &s).unwrap(), &cfg).unwrap();
            let moved: Vec<f64> = pet.values().iter().map(|v| scale * v + shift).collect();
            let pet2 = ScalarVolume::new(*pet.grid(), moved, ScalarKind::Suv).unwrap();
            let s2 = compute_liver_stats_with(&pet2, &liver, 1).unwrap();
            let z2 = liver_normalize(&pet2, &s2).unwrap();
            let z1 = liver_normalize(&pet, &s).unwrap();
            // skip draws whose z-scores sit within rounding of the threshold
            prop_assume!(z1.values().iter().all(|z| (z - cfg.znorm_threshold).abs() > 1e-9));
            let other = threshold_segment(&pet2, &z2, &cfg).unwrap();
            prop_assert_eq!(base.labels(), other.labels());
        }
    }
}
