use crate::error::{Error, Result};

use super::Grid3;

/// Sparse voxel set: strictly increasing linear indices into `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    grid: Grid3,
    indices: Vec<usize>,
}

impl VoxelSet {
    /// Sorts and deduplicates; errors on out-of-bounds indices.
    pub fn new(grid: Grid3, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= grid.len() {
                return Err(Error::InvalidVolume(format!(
                    "voxel index {last} outside grid of {} voxels",
                    grid.len()
                )));
            }
        }
        Ok(VoxelSet { grid, indices })
    }

    pub(crate) fn from_sorted_unchecked(grid: Grid3, indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(indices.last().is_none_or(|&l| l < grid.len()));
        VoxelSet { grid, indices }
    }

    pub fn empty(grid: Grid3) -> Self {
        VoxelSet {
            grid,
            indices: Vec::new(),
        }
    }

    pub fn from_mask(grid: Grid3, mask: &[bool]) -> Self {
        debug_assert_eq!(mask.len(), grid.len());
        let indices = mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        VoxelSet { grid, indices }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn min_index(&self) -> Option<usize> {
        self.indices.first().copied()
    }

    pub fn to_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.grid.len()];
        for &i in &self.indices {
            mask[i] = true;
        }
        mask
    }

    pub fn volume_ml(&self) -> f64 {
        self.indices.len() as f64 * self.grid.voxel_volume_ml()
    }

    /// Mean world coordinate of the voxel centers.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        if self.indices.is_empty() {
            return None;
        }
        let mut acc = [0.0; 3];
        for &i in &self.indices {
            let w = self.grid.world_of_index(i);
            for a in 0..3 {
                acc[a] += w[a];
            }
        }
        let n = self.indices.len() as f64;
        Some(acc.map(|v| v / n))
    }
}

/// Size of the intersection of two sets on the same grid.
pub fn overlap_count(a: &VoxelSet, b: &VoxelSet) -> Result<usize> {
    a.grid.ensure_matches(&b.grid, "overlap_count")?;
    let (mut i, mut j, mut n) = (0, 0, 0);
    let (x, y) = (&a.indices, &b.indices);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(n)
}

/// Volume of `set` in millilitres on grid `grid`.
pub fn volume_ml(set: &VoxelSet, grid: &Grid3) -> Result<f64> {
    if let Some(&last) = set.indices.last() {
        if last >= grid.len() {
            return Err(Error::InvalidVolume(format!(
                "voxel index {last} outside grid of {} voxels",
                grid.len()
            )));
        }
    }
    Ok(set.len() as f64 * grid.voxel_volume_ml())
}
