use std::collections::HashMap;
use std::sync::Arc;

use crate::error::Result;
use crate::volume::{Grid3, LabelVolume, VoxelSet};

use super::ast::{Expr, Reference, RuleSet, Side};

/// Evaluates rule expressions against one patient's landmark map.
///
/// Masks are dense booleans on the landmark grid. Missing or empty
/// landmarks evaluate to the empty set and record a warning.
pub struct Evaluator<'a> {
    landmarks: &'a LabelVolume,
    grid: Grid3,
    /// World coordinate of each slice, per world axis.
    world: [Vec<f64>; 3],
    /// Voxel axis running along each world axis.
    voxel_axis: [usize; 3],
    defines: HashMap<String, Arc<Vec<bool>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(landmarks: &'a LabelVolume) -> Self {
        let grid = *landmarks.grid();
        Evaluator {
            landmarks,
            grid,
            world: grid.world_axis_coordinates(),
            voxel_axis: [0, 1, 2].map(|w| grid.voxel_axis_for_world(w)),
            defines: HashMap::new(),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    /// Evaluates every `define` once, in declaration order.
    pub fn prime(&mut self, rules: &RuleSet, warnings: &mut Vec<String>) {
        for (name, body) in &rules.defines {
            let mask = self.eval(body, warnings);
            self.defines.insert(name.clone(), Arc::new(mask));
        }
    }

    pub fn eval_set(&self, expr: &Expr, warnings: &mut Vec<String>) -> VoxelSet {
        VoxelSet::from_mask(self.grid, &self.eval(expr, warnings))
    }

    pub fn eval(&self, expr: &Expr, warnings: &mut Vec<String>) -> Vec<bool> {
        let n = self.grid.len();
        match expr {
            Expr::Empty => vec![false; n],
            Expr::Landmark(name) => self.landmark(name, warnings),
            Expr::Define { name, body } => match self.defines.get(name) {
                Some(m) => m.as_ref().clone(),
                None => self.eval(body, warnings),
            },
            Expr::Union(es) => {
                let mut acc = vec![false; n];
                for e in es {
                    for (a, b) in acc.iter_mut().zip(self.eval(e, warnings)) {
                        *a |= b;
                    }
                }
                acc
            }
            Expr::Intersect(es) => {
                let mut acc = self.eval(&es[0], warnings);
                for e in &es[1..] {
                    if !acc.contains(&true) {
                        break;
                    }
                    for (a, b) in acc.iter_mut().zip(self.eval(e, warnings)) {
                        *a &= b;
                    }
                }
                acc
            }
            Expr::Subtract(es) => {
                let mut acc = self.eval(&es[0], warnings);
                for e in &es[1..] {
                    for (a, b) in acc.iter_mut().zip(self.eval(e, warnings)) {
                        *a &= !b;
                    }
                }
                acc
            }
            Expr::Dilate(e, r) => dilate(&self.grid, &self.eval(e, warnings), *r),
            Expr::BBox(e) => {
                let m = self.eval(e, warnings);
                match self.extents(&m) {
                    Some(ext) => self.select(|w| (0..3).all(|a| w[a] >= ext[a][0] && w[a] <= ext[a][1])),
                    None => vec![false; n],
                }
            }
            Expr::HalfSpace {
                direction,
                reference,
                offset_mm,
            } => {
                let (axis, positive) = direction.world_axis();
                let plane = match reference {
                    Reference::BBox(e) => self.extents(&self.eval(e, warnings)).map(|ext| {
                        if positive {
                            ext[axis][1] + offset_mm
                        } else {
                            ext[axis][0] - offset_mm
                        }
                    }),
                    Reference::Centroid(e) => self.centroid(&self.eval(e, warnings)).map(|c| {
                        if positive {
                            c[axis] + offset_mm
                        } else {
                            c[axis] - offset_mm
                        }
                    }),
                };
                match plane {
                    Some(p) if positive => self.select(|w| w[axis] > p),
                    Some(p) => self.select(|w| w[axis] < p),
                    None => {
                        warnings.push(format!("{} reference is empty", direction.keyword()));
                        vec![false; n]
                    }
                }
            }
            Expr::Slab { refs, margin_mm } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for e in refs {
                    if let Some(ext) = self.extents(&self.eval(e, warnings)) {
                        lo = lo.min(ext[2][0]);
                        hi = hi.max(ext[2][1]);
                    }
                }
                if lo > hi {
                    warnings.push("slab references are all empty".into());
                    return vec![false; n];
                }
                let (lo, hi) = (lo - margin_mm, hi + margin_mm);
                self.select(|w| w[2] >= lo && w[2] <= hi)
            }
            Expr::Split { side, expr, midline } => {
                let Some(c) = self.centroid(&self.eval(midline, warnings)) else {
                    warnings.push("split midline reference is empty".into());
                    return vec![false; n];
                };
                let half = match side {
                    Side::Left => self.select(|w| w[0] < c[0]),
                    Side::Right => self.select(|w| w[0] >= c[0]),
                };
                let mut m = self.eval(expr, warnings);
                for (a, b) in m.iter_mut().zip(half) {
                    *a &= b;
                }
                m
            }
        }
    }

    fn landmark(&self, name: &str, warnings: &mut Vec<String>) -> Vec<bool> {
        let Some(id) = self.landmarks.label_id(name) else {
            warnings.push(format!("landmark `{name}` is not in the label map"));
            return vec![false; self.grid.len()];
        };
        let m: Vec<bool> = self.landmarks.labels().iter().map(|&l| l == id).collect();
        if !m.contains(&true) {
            warnings.push(format!("landmark `{name}` is empty"));
        }
        m
    }

    /// Voxels whose center satisfies `pred` on its world coordinate.
    fn select(&self, pred: impl Fn([f64; 3]) -> bool) -> Vec<bool> {
        let [nx, ny, nz] = self.grid.dims();
        let mut out = Vec::with_capacity(self.grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(pred(self.world_at([i, j, k])));
                }
            }
        }
        out
    }

    #[inline]
    fn world_at(&self, ijk: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|w| self.world[w][ijk[self.voxel_axis[w]]])
    }

    /// Per world axis, `[min, max]` of voxel-center coordinates.
    fn extents(&self, mask: &[bool]) -> Option<[[f64; 2]; 3]> {
        let mut ext = [[f64::INFINITY, f64::NEG_INFINITY]; 3];
        let mut any = false;
        for (idx, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
            any = true;
            let w = self.world_at(self.grid.coords(idx));
            for a in 0..3 {
                ext[a][0] = ext[a][0].min(w[a]);
                ext[a][1] = ext[a][1].max(w[a]);
            }
        }
        any.then_some(ext)
    }

    fn centroid(&self, mask: &[bool]) -> Option<[f64; 3]> {
        VoxelSet::from_mask(self.grid, mask).centroid()
    }
}

/// Voxels whose center lies within `radius_mm` (Euclidean) of a voxel of `mask`.
pub fn dilate(grid: &Grid3, mask: &[bool], radius_mm: f64) -> Vec<bool> {
    if radius_mm <= 0.0 {
        return mask.to_vec();
    }
    let sp = grid.spacing();
    let r2 = radius_mm * radius_mm * (1.0 + 1e-12);
    let reach = sp.map(|s| (radius_mm / s).floor() as i64);
    let mut kernel = Vec::new();
    for dk in -reach[2]..=reach[2] {
        for dj in -reach[1]..=reach[1] {
            for di in -reach[0]..=reach[0] {
                let d2 = (di as f64 * sp[0]).powi(2) + (dj as f64 * sp[1]).powi(2) + (dk as f64 * sp[2]).powi(2);
                if d2 <= r2 {
                    kernel.push([di, dj, dk]);
                }
            }
        }
    }
    let dims = grid.dims().map(|d| d as i64);
    let mut out = mask.to_vec();
    // The nearest set voxel to any outside point is a boundary voxel, so
    // stamping the kernel from boundary voxels alone is exact.
    for (idx, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
        let c = grid.coords(idx).map(|v| v as i64);
        let boundary = (0..3).any(|a| {
            [-1i64, 1].iter().any(|&s| {
                let mut p = c;
                p[a] += s;
                grid.contains(p) && !mask[grid.linear(p[0] as usize, p[1] as usize, p[2] as usize)]
            })
        });
        if !boundary {
            continue;
        }
        for o in &kernel {
            let p = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if (0..3).all(|a| p[a] >= 0 && p[a] < dims[a]) {
                out[grid.linear(p[0] as usize, p[1] as usize, p[2] as usize)] = true;
            }
        }
    }
    out
}

/// Evaluates a single rule expression on `landmarks`. Defines referenced
/// by `expr` are evaluated inline.
pub fn evaluate_rule(expr: &Expr, landmarks: &LabelVolume, grid: &Grid3) -> Result<(VoxelSet, Vec<String>)> {
    landmarks.grid().ensure_matches(grid, "landmark map")?;
    let ev = Evaluator::new(landmarks);
    let mut warnings = Vec::new();
    let set = ev.eval_set(expr, &mut warnings);
    Ok((set, warnings))
}
