use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anatomical direction a voxel axis increases toward.
///
/// World coordinates are RAS+ (x toward patient right, y anterior,
/// z superior), the NIfTI convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisCode {
    L,
    R,
    A,
    P,
    S,
    I,
}

impl AxisCode {
    pub fn world_axis(self) -> usize {
        match self {
            AxisCode::L | AxisCode::R => 0,
            AxisCode::A | AxisCode::P => 1,
            AxisCode::S | AxisCode::I => 2,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            AxisCode::R | AxisCode::A | AxisCode::S => 1.0,
            AxisCode::L | AxisCode::P | AxisCode::I => -1.0,
        }
    }

    pub fn from_world(axis: usize, positive: bool) -> AxisCode {
        match (axis, positive) {
            (0, true) => AxisCode::R,
            (0, false) => AxisCode::L,
            (1, true) => AxisCode::A,
            (1, false) => AxisCode::P,
            (2, true) => AxisCode::S,
            _ => AxisCode::I,
        }
    }

    fn from_char(c: char) -> Option<AxisCode> {
        Some(match c.to_ascii_uppercase() {
            'L' => AxisCode::L,
            'R' => AxisCode::R,
            'A' => AxisCode::A,
            'P' => AxisCode::P,
            'S' => AxisCode::S,
            'I' => AxisCode::I,
            _ => return None,
        })
    }

    fn as_char(self) -> char {
        match self {
            AxisCode::L => 'L',
            AxisCode::R => 'R',
            AxisCode::A => 'A',
            AxisCode::P => 'P',
            AxisCode::S => 'S',
            AxisCode::I => 'I',
        }
    }
}

/// Parses a three-letter orientation such as `"RAS"` or `"LPS"`.
pub fn parse_orientation(s: &str) -> Result<[AxisCode; 3]> {
    let codes: Vec<AxisCode> = s.chars().filter_map(AxisCode::from_char).collect();
    if codes.len() != 3 || s.chars().count() != 3 {
        return Err(Error::InvalidGrid(format!("bad orientation code {s:?}")));
    }
    let orientation = [codes[0], codes[1], codes[2]];
    validate_orientation(&orientation)?;
    Ok(orientation)
}

pub fn orientation_string(orientation: &[AxisCode; 3]) -> String {
    orientation.iter().map(|c| c.as_char()).collect()
}

fn validate_orientation(orientation: &[AxisCode; 3]) -> Result<()> {
    let mut seen = [false; 3];
    for code in orientation {
        let w = code.world_axis();
        if seen[w] {
            return Err(Error::InvalidGrid(format!(
                "orientation {} uses a world axis twice",
                orientation_string(orientation)
            )));
        }
        seen[w] = true;
    }
    Ok(())
}

/// Regular voxel grid. Voxel centers sit at `origin + index * spacing` along
/// the oriented axes; linear indices run x-fastest (`i + nx*(j + ny*k)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid3 {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    orientation: [AxisCode; 3],
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    orientation: String,
}

impl TryFrom<GridRepr> for Grid3 {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        Grid3::new(r.dims, r.spacing, r.origin, parse_orientation(&r.orientation)?)
    }
}

impl From<Grid3> for GridRepr {
    fn from(g: Grid3) -> Self {
        GridRepr {
            dims: g.dims,
            spacing: g.spacing,
            origin: g.origin,
            orientation: orientation_string(&g.orientation),
        }
    }
}

const GEOMETRY_TOL_MM: f64 = 1e-4;

impl Grid3 {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        orientation: [AxisCode; 3],
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite origin {origin:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidGrid(format!("dims {dims:?} overflow")))?;
        validate_orientation(&orientation)?;
        Ok(Grid3 {
            dims,
            spacing,
            origin,
            orientation,
        })
    }

    /// Grid with axes increasing toward patient right, anterior, superior.
    pub fn ras(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Grid3::new(dims, spacing, origin, [AxisCode::R, AxisCode::A, AxisCode::S])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn orientation(&self) -> [AxisCode; 3] {
        self.orientation
    }

    pub fn orientation_code(&self) -> String {
        orientation_string(&self.orientation)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one voxel in millilitres.
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// World coordinate (mm) along the world axis that voxel axis `axis` maps to.
    #[inline]
    pub fn axis_world(&self, axis: usize, i: usize) -> f64 {
        let code = self.orientation[axis];
        self.origin[code.world_axis()] + code.sign() * (i as f64) * self.spacing[axis]
    }

    /// World coordinate (mm, RAS+) of a voxel center.
    pub fn world(&self, ijk: [usize; 3]) -> [f64; 3] {
        let mut out = self.origin;
        for (axis, &i) in ijk.iter().enumerate() {
            let code = self.orientation[axis];
            out[code.world_axis()] += code.sign() * (i as f64) * self.spacing[axis];
        }
        out
    }

    pub fn world_of_index(&self, index: usize) -> [f64; 3] {
        self.world(self.coords(index))
    }

    /// Continuous voxel coordinate of a world point (inverse of [`Grid3::world`]).
    pub fn continuous_index(&self, world: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (axis, o) in out.iter_mut().enumerate() {
            let code = self.orientation[axis];
            let w = code.world_axis();
            *o = (world[w] - self.origin[w]) * code.sign() / self.spacing[axis];
        }
        out
    }

    /// Voxel axis that runs along world axis `world_axis`.
    pub fn voxel_axis_for_world(&self, world_axis: usize) -> usize {
        self.orientation
            .iter()
            .position(|c| c.world_axis() == world_axis)
            .expect("orientation validated to cover all world axes")
    }

    /// Per world axis, the world coordinate of every slice along it.
    pub fn world_axis_coordinates(&self) -> [Vec<f64>; 3] {
        let mut out: [Vec<f64>; 3] = Default::default();
        for (w, slot) in out.iter_mut().enumerate() {
            let axis = self.voxel_axis_for_world(w);
            *slot = (0..self.dims[axis]).map(|i| self.axis_world(axis, i)).collect();
        }
        out
    }

    /// Same dims and orientation, spacing and origin equal to within 1e-4 mm.
    pub fn matches(&self, other: &Grid3) -> bool {
        self.dims == other.dims
            && self.orientation == other.orientation
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= GEOMETRY_TOL_MM)
            && self
                .origin
                .iter()
                .zip(other.origin.iter())
                .all(|(a, b)| (a - b).abs() <= GEOMETRY_TOL_MM)
    }

    pub fn ensure_matches(&self, other: &Grid3, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{what}: {self} vs {other}")))
        }
    }

    /// 4x4 voxel-to-world affine (row-major).
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for axis in 0..3 {
            let code = self.orientation[axis];
            m[code.world_axis()][axis] = code.sign() * self.spacing[axis];
        }
        for w in 0..3 {
            m[w][3] = self.origin[w];
        }
        m[3][3] = 1.0;
        m
    }

    /// Builds a grid from a voxel-to-world affine. Only axis-aligned affines
    /// (a signed permutation times a positive diagonal) are representable;
    /// sheared or oblique ones are rejected.
    pub fn from_affine(dims: [usize; 3], affine: &[[f64; 4]; 4]) -> Result<Self> {
        const DIR_TOL: f64 = 1e-4;
        let mut spacing = [0.0; 3];
        let mut orientation = [AxisCode::R; 3];
        for axis in 0..3 {
            let col = [affine[0][axis], affine[1][axis], affine[2][axis]];
            let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Nifti(format!("affine column {axis} is degenerate")));
            }
            let dir = [col[0] / norm, col[1] / norm, col[2] / norm];
            let (w, max) = dir
                .iter()
                .enumerate()
                .map(|(w, v)| (w, v.abs()))
                .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if (1.0 - max) > DIR_TOL {
                return Err(Error::Nifti(format!(
                    "non-orthogonal or oblique affine (column {axis} = {col:?}); \
                     only axis-aligned grids are supported"
                )));
            }
            spacing[axis] = norm;
            orientation[axis] = AxisCode::from_world(w, dir[w] > 0.0);
        }
        let origin = [affine[0][3], affine[1][3], affine[2][3]];
        Grid3::new(dims, spacing, origin, orientation).map_err(|e| match e {
            Error::InvalidGrid(msg) => Error::Nifti(format!("non-orthogonal affine: {msg}")),
            other => other,
        })
    }

    /// Whether the (voxel-center) index lies inside the grid.
    pub fn contains(&self, ijk: [i64; 3]) -> bool {
        ijk.iter()
            .zip(self.dims.iter())
            .all(|(&c, &d)| c >= 0 && (c as usize) < d)
    }
}

impl fmt::Display for Grid3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} @ {:?} mm, origin {:?}, {}",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing,
            self.origin,
            self.orientation_code()
        )
    }
}
