//! Volumes on regular grids, voxel sets, resampling and connected components.

mod components;
mod grid;
pub mod nifti;
mod resample;
mod voxelset;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use components::{connected_components, mask_components, Connectivity};
pub use grid::{orientation_string, parse_orientation, AxisCode, Grid3};
pub use resample::{Interpolation, Resample};
pub use voxelset::{overlap_count, volume_ml, VoxelSet};

/// What a scalar volume's values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    Suv,
    Hu,
    SuvNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: Grid3,
    values: Vec<f64>,
    kind: ScalarKind,
}

impl ScalarVolume {
    /// SUV volumes must have every finite value >= 0.
    pub fn new(grid: Grid3, values: Vec<f64>, kind: ScalarKind) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "{} values for a grid of {} voxels",
                values.len(),
                grid.len()
            )));
        }
        if kind == ScalarKind::Suv {
            if let Some(bad) = values.iter().find(|v| v.is_finite() && **v < 0.0) {
                return Err(Error::InvalidVolume(format!("negative SUV {bad}")));
            }
        }
        Ok(ScalarVolume { grid, values, kind })
    }

    pub fn filled(grid: Grid3, value: f64, kind: ScalarKind) -> Result<Self> {
        ScalarVolume::new(grid, vec![value; grid.len()], kind)
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> ScalarKind {
        self.kind
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.linear(i, j, k)]
    }
}

/// Integer label map. Label 0 is background; every nonzero label present
/// in the array has a name in the dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid3,
    labels: Vec<u32>,
    dictionary: BTreeMap<u32, String>,
}

impl LabelVolume {
    pub fn new(grid: Grid3, labels: Vec<u32>, dictionary: BTreeMap<u32, String>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "{} labels for a grid of {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        if dictionary.contains_key(&0) {
            return Err(Error::InvalidVolume("label 0 is reserved for background".into()));
        }
        let mut seen = vec![];
        for &l in &labels {
            if l != 0 && !dictionary.contains_key(&l) && !seen.contains(&l) {
                seen.push(l);
            }
        }
        if !seen.is_empty() {
            seen.sort_unstable();
            return Err(Error::InvalidVolume(format!(
                "labels {seen:?} present in the volume but missing from the dictionary"
            )));
        }
        Ok(LabelVolume {
            grid,
            labels,
            dictionary,
        })
    }

    /// Builds a volume naming any label not in `dictionary` as `label_<id>`.
    pub fn with_default_names(
        grid: Grid3,
        labels: Vec<u32>,
        mut dictionary: BTreeMap<u32, String>,
    ) -> Result<Self> {
        for &l in &labels {
            if l != 0 {
                dictionary.entry(l).or_insert_with(|| format!("label_{l}"));
            }
        }
        LabelVolume::new(grid, labels, dictionary)
    }

    /// Binary mask {0,1} with label 1 named `name`.
    pub fn binary(grid: Grid3, mask: &[bool], name: &str) -> Result<Self> {
        let labels = mask.iter().map(|&b| b as u32).collect();
        LabelVolume::new(grid, labels, BTreeMap::from([(1, name.to_string())]))
    }

    pub fn empty(grid: Grid3) -> Self {
        LabelVolume {
            grid,
            labels: vec![0; grid.len()],
            dictionary: BTreeMap::new(),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn dictionary(&self) -> &BTreeMap<u32, String> {
        &self.dictionary
    }

    pub fn label_id(&self, name: &str) -> Option<u32> {
        self.dictionary
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(id, _)| *id)
    }

    pub fn label_name(&self, id: u32) -> Option<&str> {
        self.dictionary.get(&id).map(String::as_str)
    }

    /// Errors unless every voxel is 0 or 1.
    pub fn ensure_binary(&self) -> Result<()> {
        match self.labels.iter().find(|&&l| l > 1) {
            Some(&l) => Err(Error::NonBinaryMask(l)),
            None => Ok(()),
        }
    }

    /// Copy where every nonzero label becomes 1.
    pub fn binarized(&self, name: &str) -> LabelVolume {
        LabelVolume {
            grid: self.grid,
            labels: self.labels.iter().map(|&l| (l != 0) as u32).collect(),
            dictionary: BTreeMap::from([(1, name.to_string())]),
        }
    }

    pub fn foreground(&self) -> VoxelSet {
        VoxelSet::from_sorted_unchecked(
            self.grid,
            self.labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != 0)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn voxels_with_label(&self, label: u32) -> VoxelSet {
        VoxelSet::from_sorted_unchecked(
            self.grid,
            self.labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == label)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}
