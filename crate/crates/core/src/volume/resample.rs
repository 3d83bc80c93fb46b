use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Grid3, LabelVolume, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// Resampling onto another grid of the same orientation. Target voxel
/// centers are mapped through world space into source index space;
/// samples that fall outside the source field are 0 (background).
pub trait Resample: Sized {
    fn resample(&self, target: &Grid3, mode: Interpolation) -> Result<Self>;
}

/// Continuous coordinates closer than this to an integer are snapped, so
/// that resampling onto the identical grid is exact.
const SNAP: f64 = 1e-9;

fn axis_coordinates(src: &Grid3, target: &Grid3) -> Result<[Vec<f64>; 3]> {
    if src.orientation() != target.orientation() {
        return Err(Error::OrientationMismatch {
            source_codes: src.orientation_code(),
            target_codes: target.orientation_code(),
        });
    }
    let mut out: [Vec<f64>; 3] = Default::default();
    for (axis, slot) in out.iter_mut().enumerate() {
        let code = src.orientation()[axis];
        let w = code.world_axis();
        let offset = (target.origin()[w] - src.origin()[w]) * code.sign() / src.spacing()[axis];
        let step = target.spacing()[axis] / src.spacing()[axis];
        *slot = (0..target.dims()[axis])
            .map(|i| {
                let c = offset + i as f64 * step;
                let r = c.round();
                if (c - r).abs() < SNAP {
                    r
                } else {
                    c
                }
            })
            .collect();
    }
    Ok(out)
}

fn nearest_indices(coords: &[f64], dim: usize) -> Vec<Option<usize>> {
    coords
        .iter()
        .map(|&c| {
            let n = (c + 0.5).floor();
            (n >= 0.0 && n < dim as f64).then_some(n as usize)
        })
        .collect()
}

/// Per-axis interpolation taps; zero-weight taps are dropped.
fn linear_taps(coords: &[f64], dim: usize) -> Vec<Option<Vec<(usize, f64)>>> {
    let last = (dim - 1) as f64;
    coords
        .iter()
        .map(|&c| {
            if !(c >= 0.0 && c <= last) {
                return None;
            }
            let i0 = c.floor();
            let t = c - i0;
            let i0 = i0 as usize;
            if t == 0.0 || i0 + 1 >= dim {
                Some(vec![(i0, 1.0)])
            } else {
                Some(vec![(i0, 1.0 - t), (i0 + 1, t)])
            }
        })
        .collect()
}

fn sample_nearest<T: Copy>(src: &Grid3, values: &[T], target: &Grid3, background: T) -> Result<Vec<T>> {
    let coords = axis_coordinates(src, target)?;
    let d = src.dims();
    let ix = nearest_indices(&coords[0], d[0]);
    let iy = nearest_indices(&coords[1], d[1]);
    let iz = nearest_indices(&coords[2], d[2]);
    let mut out = Vec::with_capacity(target.len());
    for z in &iz {
        for y in &iy {
            for x in &ix {
                out.push(match (x, y, z) {
                    (Some(x), Some(y), Some(z)) => values[src.linear(*x, *y, *z)],
                    _ => background,
                });
            }
        }
    }
    Ok(out)
}

fn sample_trilinear(src: &Grid3, values: &[f64], target: &Grid3) -> Result<Vec<f64>> {
    let coords = axis_coordinates(src, target)?;
    let d = src.dims();
    let tx = linear_taps(&coords[0], d[0]);
    let ty = linear_taps(&coords[1], d[1]);
    let tz = linear_taps(&coords[2], d[2]);
    let mut out = Vec::with_capacity(target.len());
    for z in &tz {
        for y in &ty {
            for x in &tx {
                let (Some(xs), Some(ys), Some(zs)) = (x, y, z) else {
                    out.push(0.0);
                    continue;
                };
                let mut acc = 0.0;
                for &(k, wz) in zs {
                    for &(j, wy) in ys {
                        for &(i, wx) in xs {
                            acc += wz * wy * wx * values[src.linear(i, j, k)];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(out)
}

impl Resample for ScalarVolume {
    fn resample(&self, target: &Grid3, mode: Interpolation) -> Result<Self> {
        let values = match mode {
            Interpolation::Nearest => sample_nearest(self.grid(), self.values(), target, 0.0)?,
            Interpolation::Trilinear => sample_trilinear(self.grid(), self.values(), target)?,
        };
        ScalarVolume::new(*target, values, self.kind())
    }
}

impl Resample for LabelVolume {
    fn resample(&self, target: &Grid3, mode: Interpolation) -> Result<Self> {
        if mode == Interpolation::Trilinear {
            return Err(Error::TrilinearLabels);
        }
        let labels = sample_nearest(self.grid(), self.labels(), target, 0)?;
        LabelVolume::new(*target, labels, self.dictionary().clone())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::volume::{parse_orientation, ScalarKind};

    fn src_grid() -> Grid3 {
        Grid3::new(
            [4, 3, 5],
            [1.3, 0.7, 2.1],
            [-100.3, 12.9, 7.7],
            parse_orientation("LPS").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_is_bit_exact_in_both_modes() {
        let g = src_grid();
        let values: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        let v = ScalarVolume::new(g, values, ScalarKind::Hu).unwrap();
        assert_eq!(v.resample(&g, Interpolation::Nearest).unwrap(), v);
        assert_eq!(v.resample(&g, Interpolation::Trilinear).unwrap(), v);
    }

    #[test]
    fn constant_field_trilinear_on_finer_grid() {
        let g = Grid3::ras([4, 4, 4], [2.0; 3], [0.0; 3]).unwrap();
        let v = ScalarVolume::filled(g, 5.0, ScalarKind::Suv).unwrap();
        let fine = Grid3::ras([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let r = v.resample(&fine, Interpolation::Trilinear).unwrap();
        for (idx, &val) in r.values().iter().enumerate() {
            let ijk = fine.coords(idx);
            // world coordinates 0..=6 lie within the source field
            let interior = ijk.iter().all(|&c| c <= 6);
            if interior {
                assert!((val - 5.0).abs() < 1e-12, "{ijk:?} -> {val}");
            } else {
                assert_eq!(val, 0.0);
            }
        }
    }

    #[test]
    fn labels_refuse_trilinear_and_orientation_must_match() {
        let g = Grid3::ras([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let l = LabelVolume::empty(g);
        assert!(matches!(l.resample(&g, Interpolation::Trilinear), Err(Error::TrilinearLabels)));
        let lps = Grid3::new([2, 2, 2], [1.0; 3], [0.0; 3], parse_orientation("LPS").unwrap()).unwrap();
        assert!(matches!(
            l.resample(&lps, Interpolation::Nearest),
            Err(Error::OrientationMismatch { .. })
        ));
    }

    #[test]
    fn checkerboard_upsampling_matches_world_lookup() {
        let src = Grid3::ras([2, 2, 2], [2.0; 3], [1.0, 1.0, 1.0]).unwrap();
        let labels: Vec<u32> = (0..8)
            .map(|i| {
                let [x, y, z] = src.coords(i);
                ((x + y + z) % 2) as u32 + 1
            })
            .collect();
        let dict = BTreeMap::from([(1, "a".to_string()), (2, "b".to_string())]);
        let vol = LabelVolume::new(src, labels, dict).unwrap();
        // 2x upsampled grid covering the same field: voxel centers at 0.5, 1.5, ...
        let fine = Grid3::ras([4, 4, 4], [1.0; 3], [0.5, 0.5, 0.5]).unwrap();
        let out = vol.resample(&fine, Interpolation::Nearest).unwrap();

        // brute force: pick the source voxel whose cell [c-1, c+1) contains the point
        for idx in 0..fine.len() {
            let w = fine.world_of_index(idx);
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                let mut found = None;
                for s in 0..2 {
                    let c = 1.0 + 2.0 * s as f64;
                    if w[a] >= c - 1.0 && w[a] < c + 1.0 {
                        found = Some(s);
                    }
                }
                ijk[a] = found.unwrap();
            }
            let expected = vol.labels()[src.linear(ijk[0], ijk[1], ijk[2])];
            assert_eq!(out.labels()[idx], expected, "voxel {idx}");
        }
        // each source voxel expands to a 2x2x2 block
        for (s, &l) in vol.labels().iter().enumerate() {
            let n = out.labels().iter().filter(|&&x| x == l).count();
            assert_eq!(n, 8 * vol.labels().iter().filter(|&&x| x == l).count(), "label of {s}");
        }
    }
}
