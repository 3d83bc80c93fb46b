use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::{Grid3, LabelVolume, VoxelSet};

/// Voxel adjacency: faces (6), faces+edges (18), faces+edges+corners (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::Eighteen => nonzero == 1 || nonzero == 2,
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Connected components of a binary {0,1} label volume, largest first
/// (ties: smallest minimum index first).
pub fn connected_components(mask: &LabelVolume, connectivity: Connectivity) -> Result<Vec<VoxelSet>> {
    mask.ensure_binary()?;
    let fg: Vec<bool> = mask.labels().iter().map(|&l| l == 1).collect();
    Ok(mask_components(mask.grid(), &fg, connectivity))
}

/// Same as [`connected_components`] over a dense boolean mask.
pub fn mask_components(grid: &Grid3, mask: &[bool], connectivity: Connectivity) -> Vec<VoxelSet> {
    assert_eq!(mask.len(), grid.len(), "mask size does not match grid");
    let offsets = connectivity.offsets();
    let [nx, ny, nz] = grid.dims().map(|d| d as i64);
    let mut visited = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    let mut components = Vec::new();

    for seed in 0..mask.len() {
        if !mask[seed] || visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        let mut members = Vec::new();
        while let Some(v) = queue.pop_front() {
            members.push(v);
            let [x, y, z] = grid.coords(v).map(|c| c as i64);
            for [dx, dy, dz] in &offsets {
                let (a, b, c) = (x + dx, y + dy, z + dz);
                if a < 0 || b < 0 || c < 0 || a >= nx || b >= ny || c >= nz {
                    continue;
                }
                let n = (a + nx * (b + ny * c)) as usize;
                if mask[n] && !visited[n] {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
        members.sort_unstable();
        components.push(VoxelSet::from_sorted_unchecked(*grid, members));
    }
    // seeds are visited in index order, so a stable sort by size keeps the
    // min-index tie-break
    components.sort_by(|a, b| b.len().cmp(&a.len()));
    components
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::error::Error;

    use super::*;

    fn grid(d: [usize; 3]) -> Grid3 {
        Grid3::ras(d, [1.0; 3], [0.0; 3]).unwrap()
    }

    fn binary(g: Grid3, on: &[usize]) -> LabelVolume {
        let mut labels = vec![0; g.len()];
        for &i in on {
            labels[i] = 1;
        }
        LabelVolume::new(g, labels, BTreeMap::from([(1, "fg".to_string())])).unwrap()
    }

    #[test]
    fn empty_mask_has_no_components() {
        let g = grid([3, 3, 3]);
        assert!(connected_components(&binary(g, &[]), Connectivity::TwentySix)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn in_plane_diagonal_depends_on_connectivity() {
        let g = grid([3, 3, 3]);
        let m = binary(g, &[g.linear(0, 0, 1), g.linear(1, 1, 1)]);
        assert_eq!(connected_components(&m, Connectivity::Six).unwrap().len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).unwrap().len(), 1);
        // corner-only contact needs 26
        let c = binary(g, &[g.linear(0, 0, 0), g.linear(1, 1, 1)]);
        assert_eq!(connected_components(&c, Connectivity::Eighteen).unwrap().len(), 2);
        assert_eq!(connected_components(&c, Connectivity::TwentySix).unwrap().len(), 1);
    }

    #[test]
    fn rejects_non_binary_masks() {
        let g = grid([2, 2, 2]);
        let m = LabelVolume::with_default_names(g, vec![0, 2, 0, 0, 0, 0, 0, 0], BTreeMap::new()).unwrap();
        assert!(matches!(
            connected_components(&m, Connectivity::Six),
            Err(Error::NonBinaryMask(2))
        ));
    }

    #[test]
    fn ordering_is_size_then_min_index() {
        let g = grid([10, 1, 1]);
        let m = binary(g, &[0, 2, 3, 5, 7, 8]);
        let comps = connected_components(&m, Connectivity::Six).unwrap();
        let sizes: Vec<_> = comps.iter().map(|c| (c.len(), c.min_index().unwrap())).collect();
        assert_eq!(sizes, vec![(2, 2), (2, 7), (1, 0), (1, 5)]);
    }

    // Independent oracle: union-find over explicit neighbour pairs.
    fn union_find_components(g: &Grid3, mask: &[bool], conn: Connectivity) -> BTreeSet<BTreeSet<usize>> {
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut parent: Vec<usize> = (0..mask.len()).collect();
        for a in 0..mask.len() {
            if !mask[a] {
                continue;
            }
            for b in (a + 1)..mask.len() {
                if !mask[b] {
                    continue;
                }
                let pa = g.coords(a);
                let pb = g.coords(b);
                let d: Vec<i64> = (0..3).map(|k| (pa[k] as i64 - pb[k] as i64).abs()).collect();
                if d.iter().any(|&v| v > 1) {
                    continue;
                }
                let nonzero = d.iter().filter(|&&v| v == 1).count();
                let adjacent = match conn {
                    Connectivity::Six => nonzero == 1,
                    Connectivity::Eighteen => nonzero <= 2,
                    Connectivity::TwentySix => true,
                };
                if adjacent {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    parent[ra] = rb;
                }
            }
        }
        let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for v in 0..mask.len() {
            if mask[v] {
                let r = find(&mut parent, v);
                groups.entry(r).or_default().insert(v);
            }
        }
        groups.into_values().collect()
    }

    #[test]
    fn agrees_with_union_find_on_random_sparse_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..200 {
            let g = grid([6, 5, 4]);
            let density = rng.random_range(0.05..0.35);
            let mask: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(density)).collect();
            let conn = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix][trial % 3];
            let got: BTreeSet<BTreeSet<usize>> = mask_components(&g, &mask, conn)
                .into_iter()
                .map(|c| c.indices().iter().copied().collect())
                .collect();
            assert_eq!(got, union_find_components(&g, &mask, conn), "trial {trial}");
        }
    }
}
