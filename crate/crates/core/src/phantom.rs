//! Synthetic PET/CT/landmark volumes with planted lesions and known truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::InvolvementProfile;
use crate::region::RegionId;
use crate::staging::{Stage, TherapeuticGroup};
use crate::volume::{Grid3, LabelVolume, ScalarKind, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned box in world mm, bounds inclusive.
    Box { min: [f64; 3], max: [f64; 3] },
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Ellipsoid { center, radii } => {
                (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
        }
    }

    /// Reflection through the sagittal midplane (x -> -x).
    pub fn mirrored(&self) -> Shape {
        match *self {
            Shape::Box { min, max } => Shape::Box {
                min: [-max[0], min[1], min[2]],
                max: [-min[0], max[1], max[2]],
            },
            Shape::Ellipsoid { center, radii } => Shape::Ellipsoid {
                center: [-center[0], center[1], center[2]],
                radii,
            },
        }
    }
}

/// A landmark structure; its label id is its position in the anatomy list
/// plus one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    pub shape: Shape,
    pub hu: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionTarget {
    Region(RegionId),
    /// Named anatomy structure; the lesion is extranodal.
    Organ(String),
    /// Outside the patient (contamination); ignored by staging.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLesion {
    pub center: [f64; 3],
    pub radius_mm: f64,
    pub peak_suv: f64,
    pub target: LesionTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid3,
    pub anatomy: Vec<Structure>,
    pub lesions: Vec<PlantedLesion>,
    pub background_suv: f64,
    pub liver_suv_mean: f64,
    pub liver_suv_std: f64,
    pub seed: u64,
}

pub const STANDARD_DIMS: [usize; 3] = [128, 128, 128];
pub const STANDARD_SPACING: [f64; 3] = [4.0, 3.0, 13.0];
pub const STANDARD_ORIGIN: [f64; 3] = [-254.0, -190.5, 6.5];

pub fn standard_grid() -> Grid3 {
    Grid3::ras(STANDARD_DIMS, STANDARD_SPACING, STANDARD_ORIGIN).expect("standard grid is valid")
}

const HU_BONE: f64 = 700.0;
const HU_SOFT: f64 = 40.0;

fn bx(min: [f64; 3], max: [f64; 3]) -> Shape {
    Shape::Box { min, max }
}

fn ell(center: [f64; 3], radii: [f64; 3]) -> Shape {
    Shape::Ellipsoid { center, radii }
}

/// Schematic adult body: spine segments, thoracic and abdominal organs and
/// long bones on the standard grid. Patient left is negative x.
pub fn standard_anatomy() -> Vec<Structure> {
    let mut out = Vec::new();
    let mut add = |name: &str, shape: Shape, hu: f64| {
        out.push(Structure {
            name: name.to_string(),
            shape,
            hu,
        })
    };
    add("skull", ell([0.0, 10.0, 1565.0], [75.0, 90.0, 85.0]), HU_BONE);
    add("vertebrae_C2", bx([-15.0, -45.0, 1440.0], [15.0, -15.0, 1490.0]), HU_BONE);
    add("spine_cervical", bx([-15.0, -45.0, 1330.0], [15.0, -15.0, 1440.0]), HU_BONE);
    add("spine_thoracic", bx([-18.0, -80.0, 1070.0], [18.0, -45.0, 1330.0]), HU_BONE);
    add("spine_lumbar_upper", bx([-20.0, -75.0, 960.0], [20.0, -40.0, 1070.0]), HU_BONE);
    add("spine_lumbar_lower", bx([-22.0, -70.0, 860.0], [22.0, -35.0, 960.0]), HU_BONE);
    add("sacrum", bx([-28.0, -80.0, 790.0], [28.0, -45.0, 860.0]), HU_BONE);
    add("trachea", bx([-10.0, -10.0, 1250.0], [10.0, 10.0, 1330.0]), -1000.0);
    let lung = ell([-90.0, -5.0, 1210.0], [55.0, 75.0, 120.0]);
    add("lung_left", lung, -850.0);
    add("lung_right", lung.mirrored(), -850.0);
    add("heart", ell([0.0, 40.0, 1140.0], [40.0, 40.0, 45.0]), HU_SOFT);
    add("aorta", bx([-15.0, -40.0, 1150.0], [5.0, -20.0, 1260.0]), HU_SOFT);
    add("pulmonary_artery", bx([-30.0, 5.0, 1185.0], [15.0, 30.0, 1215.0]), HU_SOFT);
    let clavicle = bx([-190.0, 10.0, 1340.0], [-25.0, 30.0, 1360.0]);
    add("clavicula_left", clavicle, HU_BONE);
    add("clavicula_right", clavicle.mirrored(), HU_BONE);
    let humerus = bx([-215.0, -10.0, 1080.0], [-195.0, 10.0, 1360.0]);
    add("humerus_left", humerus, HU_BONE);
    add("humerus_right", humerus.mirrored(), HU_BONE);
    add("liver", ell([80.0, 5.0, 1000.0], [90.0, 75.0, 62.0]), 60.0);
    add("spleen", ell([-100.0, -35.0, 1010.0], [30.0, 35.0, 45.0]), 45.0);
    let kidney = ell([-65.0, -55.0, 930.0], [25.0, 20.0, 45.0]);
    add("kidney_left", kidney, 30.0);
    add("kidney_right", kidney.mirrored(), 30.0);
    let hip = bx([-150.0, -40.0, 800.0], [-55.0, 25.0, 900.0]);
    add("hip_left", hip, HU_BONE);
    add("hip_right", hip.mirrored(), HU_BONE);
    let femur = bx([-105.0, -15.0, 480.0], [-75.0, 15.0, 800.0]);
    add("femur_left", femur, HU_BONE);
    add("femur_right", femur.mirrored(), HU_BONE);
    let tibia = bx([-100.0, -12.0, 80.0], [-80.0, 12.0, 470.0]);
    add("tibia_left", tibia, HU_BONE);
    add("tibia_right", tibia.mirrored(), HU_BONE);
    out
}

fn mirror(c: [f64; 3]) -> [f64; 3] {
    [-c[0], c[1], c[2]]
}

/// Center and radius of a lesion that the default rules place unambiguously
/// in `region` on the standard anatomy.
pub fn region_anchor(region: RegionId) -> ([f64; 3], f64) {
    use RegionId::*;
    match region {
        WaldeyersRing => ([0.0, 8.0, 1462.5], 16.0),
        NeckL => ([-50.0, -5.0, 1397.5], 16.0),
        NeckR => (mirror([-50.0, -5.0, 1397.5]), 16.0),
        InfraclavicularL => ([-150.0, 25.0, 1319.5], 16.0),
        InfraclavicularR => (mirror([-150.0, 25.0, 1319.5]), 16.0),
        AxillaL => ([-166.0, -20.0, 1254.5], 16.0),
        AxillaR => (mirror([-166.0, -20.0, 1254.5]), 16.0),
        TrochleaL => ([-180.0, 0.0, 1072.5], 16.0),
        TrochleaR => (mirror([-180.0, 0.0, 1072.5]), 16.0),
        Mediastinum => ([0.0, 55.0, 1228.5], 16.0),
        HilumL => ([-22.0, -5.0, 1202.5], 10.0),
        HilumR => (mirror([-22.0, -5.0, 1202.5]), 10.0),
        Spleen => ([-100.0, -35.0, 1007.5], 12.0),
        UpperAbdomen => ([-30.0, 10.0, 1007.5], 16.0),
        LowerAbdomen => ([0.0, 10.0, 916.5], 16.0),
        ParaIliacL => ([-38.0, -10.0, 825.5], 12.0),
        ParaIliacR => (mirror([-38.0, -10.0, 825.5]), 12.0),
        GroinL => ([-90.0, 35.0, 747.5], 16.0),
        GroinR => (mirror([-90.0, 35.0, 747.5]), 16.0),
        PoplitealL => ([-90.0, -35.0, 474.5], 16.0),
        PoplitealR => (mirror([-90.0, -35.0, 474.5]), 16.0),
    }
}

/// Structures with a standard extranodal lesion anchor.
pub const ORGAN_ANCHORS: [&str; 4] = ["liver", "lung_left", "lung_right", "spine_thoracic"];

pub fn organ_anchor(organ: &str) -> Option<([f64; 3], f64)> {
    match organ {
        "liver" => Some(([90.0, 10.0, 1007.5], 16.0)),
        "lung_left" => Some(([-100.0, -20.0, 1150.5], 16.0)),
        "lung_right" => Some((mirror([-100.0, -20.0, 1150.5]), 16.0)),
        "spine_thoracic" => Some(([0.0, -62.0, 1202.5], 10.0)),
        _ => None,
    }
}

/// Outside the body on the standard grid.
pub const EXTRACORPOREAL_ANCHOR: ([f64; 3], f64) = ([230.0, 100.0, 300.0], 15.0);

impl PlantedLesion {
    /// Lesion at the standard anchor of its target.
    pub fn at_anchor(target: LesionTarget, peak_suv: f64) -> Result<PlantedLesion> {
        let (center, radius_mm) = match &target {
            LesionTarget::Region(r) => region_anchor(*r),
            LesionTarget::Organ(o) => {
                organ_anchor(o).ok_or_else(|| Error::Phantom(format!("no standard anchor for organ {o:?}")))?
            }
            LesionTarget::None => EXTRACORPOREAL_ANCHOR,
        };
        Ok(PlantedLesion {
            center,
            radius_mm,
            peak_suv,
            target,
        })
    }
}

impl PhantomSpec {
    /// Standard grid and anatomy, no lesions.
    pub fn standard(seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid: standard_grid(),
            anatomy: standard_anatomy(),
            lesions: Vec::new(),
            background_suv: 1.0,
            liver_suv_mean: 2.0,
            liver_suv_std: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Phantom(m));
        if !(self.background_suv.is_finite() && self.background_suv >= 0.0) {
            return bad(format!("background SUV must be >= 0, got {}", self.background_suv));
        }
        if !(self.liver_suv_mean.is_finite() && self.liver_suv_std.is_finite() && self.liver_suv_std >= 0.0) {
            return bad("liver SUV mean must be finite and std >= 0".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.anatomy {
            if !names.insert(s.name.as_str()) {
                return bad(format!("duplicate structure {:?}", s.name));
            }
            if let Shape::Ellipsoid { radii, .. } = s.shape {
                if radii.iter().any(|&r| !(r > 0.0)) {
                    return bad(format!("structure {:?} has non-positive radii", s.name));
                }
            }
        }
        let bounds = world_bounds(&self.grid);
        for (n, l) in self.lesions.iter().enumerate() {
            if !(l.radius_mm > 0.0 && l.radius_mm.is_finite()) {
                return bad(format!("lesion {} has radius {}", n + 1, l.radius_mm));
            }
            if !(l.peak_suv.is_finite() && l.peak_suv > 0.0) {
                return bad(format!("lesion {} has peak SUV {}", n + 1, l.peak_suv));
            }
            for a in 0..3 {
                if l.center[a] - l.radius_mm < bounds[a].0 || l.center[a] + l.radius_mm > bounds[a].1 {
                    return bad(format!("lesion {} at {:?} r {} lies outside the grid", n + 1, l.center, l.radius_mm));
                }
            }
            if let LesionTarget::Organ(o) = &l.target {
                if !names.contains(o.as_str()) {
                    return bad(format!("lesion {} targets unknown structure {o:?}", n + 1));
                }
            }
        }
        Ok(())
    }
}

/// World extent of the grid, padded by half a voxel.
fn world_bounds(grid: &Grid3) -> [(f64, f64); 3] {
    let coords = grid.world_axis_coordinates();
    let spacing = grid.spacing();
    let mut out = [(0.0, 0.0); 3];
    for (w, c) in coords.iter().enumerate() {
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let half = spacing[grid.voxel_axis_for_world(w)] / 2.0;
        out[w] = (lo - half, hi + half);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub profile: InvolvementProfile,
    pub stage: Stage,
    pub group: TherapeuticGroup,
    pub extranodal_organs: Vec<String>,
    pub lesions: Vec<PlantedLesion>,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub pet: ScalarVolume,
    pub ct: ScalarVolume,
    pub landmarks: LabelVolume,
    pub truth: PhantomTruth,
}

const SUPRA: [&str; 12] = [
    "WaldeyersRing",
    "NeckL",
    "NeckR",
    "InfraclavicularL",
    "InfraclavicularR",
    "AxillaL",
    "AxillaR",
    "TrochleaL",
    "TrochleaR",
    "Mediastinum",
    "HilumL",
    "HilumR",
];

/// Stage from region names, written without the staging module so it can
/// serve as an oracle for it.
fn oracle_stage(regions: &[&str], extranodal: bool) -> (Stage, TherapeuticGroup) {
    let supra = regions.iter().filter(|r| SUPRA.contains(r)).count();
    let infra = regions.len() - supra;
    let stage = if extranodal {
        Stage::IV
    } else if supra > 0 && infra > 0 {
        Stage::III
    } else if regions.len() > 1 {
        Stage::II
    } else if regions.len() == 1 {
        Stage::I
    } else {
        Stage::NoInvolvement
    };
    let group = match stage {
        Stage::NoInvolvement => TherapeuticGroup::Unstaged,
        Stage::I | Stage::II => TherapeuticGroup::Limited,
        Stage::III | Stage::IV => TherapeuticGroup::Advanced,
    };
    (stage, group)
}

pub fn truth_of(spec: &PhantomSpec) -> PhantomTruth {
    let mut profile = InvolvementProfile::default();
    let mut organs = Vec::new();
    for (n, l) in spec.lesions.iter().enumerate() {
        match &l.target {
            LesionTarget::Region(r) => {
                profile.involved.insert(*r);
                profile.supporting_lesions.entry(*r).or_default().push(n + 1);
            }
            LesionTarget::Organ(o) => {
                profile.extranodal = true;
                profile.extranodal_lesions.push(n + 1);
                if !organs.contains(o) {
                    organs.push(o.clone());
                }
            }
            LesionTarget::None => {}
        }
    }
    organs.sort();
    let mut names: Vec<&str> = profile.involved.iter().map(RegionId::name).collect();
    names.dedup();
    let (stage, group) = oracle_stage(&names, profile.extranodal);
    PhantomTruth {
        profile,
        stage,
        group,
        extranodal_organs: organs,
        lesions: spec.lesions.clone(),
    }
}

/// Renders the phantom. Later structures overwrite earlier ones; lesions
/// overwrite the PET at their peak SUV.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid;
    let n = grid.len();
    let mut labels = vec![0u32; n];
    let mut hu = vec![HU_SOFT; n];
    for idx in 0..n {
        let p = grid.world_of_index(idx);
        for (s, st) in spec.anatomy.iter().enumerate() {
            if st.shape.contains(p) {
                labels[idx] = s as u32 + 1;
                hu[idx] = st.hu;
            }
        }
    }
    let liver = spec.anatomy.iter().position(|s| s.name == "liver").map(|p| p as u32 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(spec.liver_suv_mean, spec.liver_suv_std)
        .map_err(|e| Error::Phantom(format!("liver noise: {e}")))?;
    let mut pet = vec![spec.background_suv; n];
    if let Some(liver) = liver {
        for (v, &l) in pet.iter_mut().zip(&labels) {
            if l == liver {
                *v = noise.sample(&mut rng).max(0.0);
            }
        }
    }
    for idx in 0..n {
        let p = grid.world_of_index(idx);
        for l in &spec.lesions {
            let d2: f64 = (0..3).map(|a| (p[a] - l.center[a]).powi(2)).sum();
            if d2 <= l.radius_mm * l.radius_mm {
                pet[idx] = l.peak_suv;
            }
        }
    }
    let dictionary: BTreeMap<u32, String> = spec
        .anatomy
        .iter()
        .enumerate()
        .map(|(i, s)| (i as u32 + 1, s.name.clone()))
        .collect();
    Ok(Phantom {
        pet: ScalarVolume::new(grid, pet, ScalarKind::Suv)?,
        ct: ScalarVolume::new(grid, hu, ScalarKind::Hu)?,
        landmarks: LabelVolume::new(grid, labels, dictionary)?,
        truth: truth_of(spec),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    NoInvolvement,
    StageI,
    StageII,
    StageIII,
    StageIV,
    ExtranodalOnly,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::NoInvolvement,
        Scenario::StageI,
        Scenario::StageII,
        Scenario::StageIII,
        Scenario::StageIV,
        Scenario::ExtranodalOnly,
    ];
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, pool: &mut Vec<T>, k: usize) -> Vec<T> {
    (0..k.min(pool.len()))
        .map(|_| pool.swap_remove(rng.random_range(0..pool.len())))
        .collect()
}

/// Random standard-anatomy phantom realizing `scenario`. Lesions sit at the
/// standard anchors; an extracorporeal contamination lesion is added at
/// random.
pub fn scenario_spec(scenario: Scenario, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e51_0f00_d000);
    let mut spec = PhantomSpec::standard(seed);
    let mut supra: Vec<RegionId> = RegionId::ALL
        .into_iter()
        .filter(|r| SUPRA.contains(&r.name()))
        .collect();
    let mut infra: Vec<RegionId> = RegionId::ALL
        .into_iter()
        .filter(|r| !SUPRA.contains(&r.name()))
        .collect();
    let mut organs: Vec<&str> = ORGAN_ANCHORS.to_vec();
    let mut regions = Vec::new();
    let mut organ_targets = Vec::new();
    match scenario {
        Scenario::NoInvolvement => {}
        Scenario::StageI => {
            let pool = if rng.random_bool(0.5) { &mut supra } else { &mut infra };
            regions = pick(&mut rng, pool, 1);
        }
        Scenario::StageII => {
            let k = rng.random_range(2..=4);
            let pool = if rng.random_bool(0.5) { &mut supra } else { &mut infra };
            regions = pick(&mut rng, pool, k);
        }
        Scenario::StageIII => {
            let a = rng.random_range(1..=3);
            let b = rng.random_range(1..=3);
            regions = pick(&mut rng, &mut supra, a);
            regions.extend(pick(&mut rng, &mut infra, b));
        }
        Scenario::StageIV => {
            let mut all: Vec<RegionId> = RegionId::ALL.to_vec();
            let k = rng.random_range(0..=3);
            regions = pick(&mut rng, &mut all, k);
            let m = rng.random_range(1..=2);
            organ_targets = pick(&mut rng, &mut organs, m);
        }
        Scenario::ExtranodalOnly => {
            let m = rng.random_range(1..=2);
            organ_targets = pick(&mut rng, &mut organs, m);
        }
    }
    regions.sort();
    organ_targets.sort();
    for r in regions {
        let peak = rng.random_range(5.0..12.0);
        spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::Region(r), peak).expect("region anchor"));
    }
    for o in organ_targets {
        let peak = rng.random_range(5.0..12.0);
        spec.lesions
            .push(PlantedLesion::at_anchor(LesionTarget::Organ(o.to_string()), peak).expect("organ anchor"));
    }
    if rng.random_bool(0.5) {
        let peak = rng.random_range(5.0..12.0);
        spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::None, peak).expect("fixed anchor"));
    }
    spec
}

// Text form:
//
//   dims = 128, 128, 128;           spacing = 4, 3, 13;
//   origin = -254, -190.5, 6.5;     seed = 7;
//   background_suv = 1;             liver_suv = 2, 0.15;
//   anatomy = standard;             # or `none`, then structures
//   structure liver = ellipsoid(80, 5, 1000; 90, 75, 62) hu 60;
//   structure sacrum = box(-28, -80, 790; 28, -45, 860);
//   lesion NeckL { peak = 8; }      # at the standard anchor
//   lesion organ liver { center = 90, 10, 1007.5; radius = 16; peak = 9; }
//   lesion none { peak = 6; }

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Punct(char),
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize, usize)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c == '#' {
                break;
            } else if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((Tok::Ident(chars[start..i].iter().collect()), ln + 1, col));
            } else if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' {
                let start = i;
                i += 1;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '-' || chars[i] == '+') && matches!(chars[i - 1], 'e' | 'E')))
                {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let v = s
                    .parse::<f64>()
                    .map_err(|_| Error::Phantom(format!("{}:{col}: bad number {s:?}", ln + 1)))?;
                out.push((Tok::Num(v), ln + 1, col));
            } else if "=;,{}()".contains(c) {
                out.push((Tok::Punct(c), ln + 1, col));
                i += 1;
            } else {
                return Err(Error::Phantom(format!("{}:{col}: unexpected character {c:?}", ln + 1)));
            }
        }
    }
    Ok(out)
}

struct SpecParser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
}

impl SpecParser {
    fn err<T>(&self, msg: impl std::fmt::Display) -> Result<T> {
        let (line, col) = self
            .toks
            .get(self.pos)
            .or(self.toks.last())
            .map_or((1, 1), |t| (t.1, t.2));
        Err(Error::Phantom(format!("{line}:{col}: {msg}")))
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.0.clone());
        self.pos += 1;
        t
    }

    fn punct(&mut self, c: char) -> Result<()> {
        match self.peek() {
            Some(Tok::Punct(p)) if *p == c => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{c}`")),
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err("expected a name"),
        }
    }

    fn number(&mut self) -> Result<f64> {
        match self.peek() {
            Some(Tok::Num(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => self.err("expected a number"),
        }
    }

    fn numbers(&mut self) -> Result<Vec<f64>> {
        let mut v = vec![self.number()?];
        while self.peek() == Some(&Tok::Punct(',')) {
            self.pos += 1;
            v.push(self.number()?);
        }
        Ok(v)
    }

    fn triple(&mut self) -> Result<[f64; 3]> {
        let v = self.numbers()?;
        match <[f64; 3]>::try_from(v.as_slice()) {
            Ok(t) => Ok(t),
            Err(_) => self.err(format!("expected 3 numbers, got {}", v.len())),
        }
    }
}

fn count(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(Error::Phantom(format!("{what} must be a positive integer, got {v}")))
    }
}

pub fn parse_spec(text: &str) -> Result<PhantomSpec> {
    let mut p = SpecParser {
        toks: tokenize(text)?,
        pos: 0,
    };
    let std = PhantomSpec::standard(0);
    let (mut dims, mut spacing, mut origin) = (STANDARD_DIMS, STANDARD_SPACING, STANDARD_ORIGIN);
    let mut spec = PhantomSpec { anatomy: Vec::new(), ..std };
    let mut standard_anatomy_used = true;
    let mut structures = Vec::new();
    while let Some(tok) = p.next() {
        let Tok::Ident(word) = tok else {
            p.pos -= 1;
            return p.err("expected a statement");
        };
        match word.as_str() {
            "structure" => {
                let name = p.ident()?;
                p.punct('=')?;
                let kind = p.ident()?;
                p.punct('(')?;
                let a = p.triple()?;
                p.punct(';')?;
                let b = p.triple()?;
                p.punct(')')?;
                let shape = match kind.as_str() {
                    "box" => bx(a, b),
                    "ellipsoid" => ell(a, b),
                    other => return p.err(format!("unknown shape {other:?}")),
                };
                let mut hu = HU_SOFT;
                if p.peek() == Some(&Tok::Ident("hu".into())) {
                    p.pos += 1;
                    hu = p.number()?;
                }
                p.punct(';')?;
                structures.push(Structure { name, shape, hu });
            }
            "lesion" => {
                let target = match p.ident()?.as_str() {
                    "organ" => LesionTarget::Organ(p.ident()?),
                    "none" => LesionTarget::None,
                    r => match r.parse::<RegionId>() {
                        Ok(r) => LesionTarget::Region(r),
                        Err(_) => {
                            p.pos -= 1;
                            return p.err(format!("unknown lesion target {r:?}"));
                        }
                    },
                };
                p.punct('{')?;
                let (mut center, mut radius, mut peak) = (None, None, None);
                while p.peek() != Some(&Tok::Punct('}')) {
                    let key = p.ident()?;
                    p.punct('=')?;
                    match key.as_str() {
                        "center" => center = Some(p.triple()?),
                        "radius" => radius = Some(p.number()?),
                        "peak" => peak = Some(p.number()?),
                        other => {
                            p.pos -= 2;
                            return p.err(format!("unknown lesion field {other:?}"));
                        }
                    }
                    p.punct(';')?;
                }
                p.punct('}')?;
                let Some(peak) = peak else {
                    return p.err("lesion needs `peak`");
                };
                let lesion = match (center, radius) {
                    (Some(center), Some(radius_mm)) => PlantedLesion {
                        center,
                        radius_mm,
                        peak_suv: peak,
                        target,
                    },
                    (None, None) => PlantedLesion::at_anchor(target, peak)?,
                    _ => return p.err("lesion needs both `center` and `radius`, or neither"),
                };
                spec.lesions.push(lesion);
            }
            key => {
                p.punct('=')?;
                match key {
                    "dims" => {
                        let v = p.triple()?;
                        dims = [count(v[0], "dims")?, count(v[1], "dims")?, count(v[2], "dims")?];
                    }
                    "spacing" => spacing = p.triple()?,
                    "origin" => origin = p.triple()?,
                    "seed" => {
                        let v = p.number()?;
                        if !(v >= 0.0 && v.fract() == 0.0 && v <= 2f64.powi(53)) {
                            return p.err("seed must be a non-negative integer");
                        }
                        spec.seed = v as u64;
                    }
                    "background_suv" => spec.background_suv = p.number()?,
                    "liver_suv" => {
                        spec.liver_suv_mean = p.number()?;
                        p.punct(',')?;
                        spec.liver_suv_std = p.number()?;
                    }
                    "anatomy" => match p.ident()?.as_str() {
                        "standard" => standard_anatomy_used = true,
                        "none" => standard_anatomy_used = false,
                        other => return p.err(format!("unknown anatomy {other:?}")),
                    },
                    other => {
                        p.pos -= 2;
                        return p.err(format!("unknown setting {other:?}"));
                    }
                }
                p.punct(';')?;
            }
        }
    }
    spec.grid = Grid3::ras(dims, spacing, origin).map_err(|e| Error::Phantom(e.to_string()))?;
    if standard_anatomy_used {
        spec.anatomy = standard_anatomy();
    }
    spec.anatomy.extend(structures);
    spec.validate()?;
    Ok(spec)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Serializes to the text form; `parse_spec(&spec.to_text())` returns an
/// equal spec for RAS grids.
impl PhantomSpec {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dims = self.grid.dims().map(|d| d as f64);
        let _ = writeln!(s, "dims = {};", join(&dims));
        let _ = writeln!(s, "spacing = {};", join(&self.grid.spacing()));
        let _ = writeln!(s, "origin = {};", join(&self.grid.origin()));
        let _ = writeln!(s, "seed = {};", self.seed);
        let _ = writeln!(s, "background_suv = {};", self.background_suv);
        let _ = writeln!(s, "liver_suv = {}, {};", self.liver_suv_mean, self.liver_suv_std);
        let std = standard_anatomy();
        let extra = if self.anatomy.starts_with(&std) {
            let _ = writeln!(s, "anatomy = standard;");
            &self.anatomy[std.len()..]
        } else {
            let _ = writeln!(s, "anatomy = none;");
            &self.anatomy[..]
        };
        for st in extra {
            let (kind, a, b) = match st.shape {
                Shape::Box { min, max } => ("box", min, max),
                Shape::Ellipsoid { center, radii } => ("ellipsoid", center, radii),
            };
            let _ = writeln!(s, "structure {} = {kind}({}; {}) hu {};", st.name, join(&a), join(&b), st.hu);
        }
        for l in &self.lesions {
            let target = match &l.target {
                LesionTarget::Region(r) => r.name().to_string(),
                LesionTarget::Organ(o) => format!("organ {o}"),
                LesionTarget::None => "none".to_string(),
            };
            let _ = writeln!(
                s,
                "lesion {target} {{ center = {}; radius = {}; peak = {}; }}",
                join(&l.center),
                l.radius_mm,
                l.peak_suv
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalization::compute_liver_stats;

    fn small_spec() -> PhantomSpec {
        let mut spec = PhantomSpec::standard(1);
        spec.grid = Grid3::ras([16, 16, 16], [10.0; 3], [0.0; 3]).unwrap();
        spec.anatomy = vec![Structure {
            name: "liver".into(),
            shape: bx([20.0, 20.0, 20.0], [100.0, 100.0, 100.0]),
            hu: 60.0,
        }];
        spec
    }

    #[test]
    fn zero_lesions_is_no_involvement() {
        let ph = generate(&small_spec()).unwrap();
        assert_eq!(ph.truth.stage, Stage::NoInvolvement);
        assert_eq!(ph.truth.group, TherapeuticGroup::Unstaged);
        assert!(ph.truth.profile.involved.is_empty());
    }

    #[test]
    fn one_neck_lesion_is_stage_one() {
        let mut spec = PhantomSpec::standard(2);
        spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::Region(RegionId::NeckL), 8.0).unwrap());
        let t = truth_of(&spec);
        assert_eq!(t.profile.involved.iter().collect::<Vec<_>>(), vec![RegionId::NeckL]);
        assert_eq!(t.stage, Stage::I);
    }

    #[test]
    fn truth_oracle_cases() {
        let mut spec = PhantomSpec::standard(0);
        for r in [RegionId::NeckL, RegionId::Spleen] {
            spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::Region(r), 8.0).unwrap());
        }
        assert_eq!(truth_of(&spec).stage, Stage::III);
        spec.lesions.push(PlantedLesion::at_anchor(LesionTarget::None, 8.0).unwrap());
        assert_eq!(truth_of(&spec).stage, Stage::III);
        spec.lesions = vec![PlantedLesion::at_anchor(LesionTarget::Organ("liver".into()), 8.0).unwrap()];
        let t = truth_of(&spec);
        assert_eq!((t.stage, t.group), (Stage::IV, TherapeuticGroup::Advanced));
        assert_eq!(t.extranodal_organs, vec!["liver".to_string()]);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut spec = small_spec();
        spec.lesions.push(PlantedLesion {
            center: [130.0, 130.0, 130.0],
            radius_mm: 15.0,
            peak_suv: 9.0,
            target: LesionTarget::None,
        });
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.pet, b.pet);
        assert_eq!(a.landmarks, b.landmarks);
        spec.seed = 99;
        assert_ne!(generate(&spec).unwrap().pet, a.pet);
        // hard sphere: 7 voxels at 10 mm spacing within 15 mm of a voxel center
        assert_eq!(a.pet.values().iter().filter(|&&v| v == 9.0).count(), 7 + 12);
    }

    #[test]
    fn lesion_outside_grid_is_rejected() {
        let mut spec = small_spec();
        spec.lesions.push(PlantedLesion {
            center: [150.0, 50.0, 50.0],
            radius_mm: 10.0,
            peak_suv: 9.0,
            target: LesionTarget::None,
        });
        assert!(matches!(generate(&spec), Err(Error::Phantom(m)) if m.contains("outside")));
    }

    #[test]
    fn planted_liver_stats_recovered() {
        let spec = PhantomSpec::standard(5);
        let ph = generate(&spec).unwrap();
        let liver = LabelVolume::binary(
            *ph.landmarks.grid(),
            &ph.landmarks
                .labels()
                .iter()
                .map(|&l| ph.landmarks.label_name(l) == Some("liver"))
                .collect::<Vec<_>>(),
            "liver",
        )
        .unwrap();
        let st = compute_liver_stats(&ph.pet, &liver).unwrap();
        assert!(st.voxel_count >= 10_000, "{}", st.voxel_count);
        assert!((st.mean_suv / spec.liver_suv_mean - 1.0).abs() < 0.02);
        assert!((st.std_suv / spec.liver_suv_std - 1.0).abs() < 0.02);
    }

    #[test]
    fn anchors_lie_inside_their_structures() {
        let anatomy = standard_anatomy();
        let shape = |n: &str| anatomy.iter().find(|s| s.name == n).unwrap().shape;
        for o in ORGAN_ANCHORS {
            let (c, r) = organ_anchor(o).unwrap();
            let s = shape(o);
            for d in [[r, 0.0, 0.0], [-r, 0.0, 0.0], [0.0, r, 0.0], [0.0, -r, 0.0], [0.0, 0.0, r], [0.0, 0.0, -r]] {
                assert!(s.contains([c[0] + d[0], c[1] + d[1], c[2] + d[2]]), "{o}");
            }
        }
        let (c, r) = EXTRACORPOREAL_ANCHOR;
        assert!(anatomy.iter().all(|s| !s.shape.contains(c)));
        assert!(r > 0.0);
    }

    #[test]
    fn text_round_trip() {
        for (i, sc) in Scenario::ALL.into_iter().enumerate() {
            let mut spec = scenario_spec(sc, i as u64 * 31 + 7);
            spec.anatomy.push(Structure {
                name: "extra".into(),
                shape: ell([1.5, -2.25, 300.0], [10.0, 20.0, 30.0]),
                hu: -12.5,
            });
            let back = parse_spec(&spec.to_text()).unwrap();
            assert_eq!(back, spec);
        }
        let mut custom = small_spec();
        custom.lesions.push(PlantedLesion {
            center: [50.0, 50.0, 50.0],
            radius_mm: 10.0,
            peak_suv: 9.0,
            target: LesionTarget::Organ("liver".into()),
        });
        assert_eq!(parse_spec(&custom.to_text()).unwrap(), custom);
    }

    #[test]
    fn parses_anchor_shorthand_and_reports_errors() {
        let s = parse_spec("seed = 3;\nlesion NeckL { peak = 8; }\nlesion organ liver { peak = 7; }\n").unwrap();
        assert_eq!(s.lesions[0].center, region_anchor(RegionId::NeckL).0);
        assert_eq!(s.lesions[1].target, LesionTarget::Organ("liver".into()));
        assert_eq!(s.seed, 3);
        let e = parse_spec("seed = 3;\nlesion Neck { peak = 8; }").unwrap_err().to_string();
        assert!(e.contains("2:8"), "{e}");
        assert!(parse_spec("lesion NeckL { radius = 3; peak = 1; }").is_err());
        assert!(parse_spec("bogus = 1;").is_err());
        assert!(parse_spec("lesion none { center = 9999, 0, 0; radius = 5; peak = 3; }").is_err());
    }

    #[test]
    fn scenarios_realize_their_stage() {
        for seed in 0..40 {
            for sc in Scenario::ALL {
                let t = truth_of(&scenario_spec(sc, seed));
                let want = match sc {
                    Scenario::NoInvolvement => Stage::NoInvolvement,
                    Scenario::StageI => Stage::I,
                    Scenario::StageII => Stage::II,
                    Scenario::StageIII => Stage::III,
                    Scenario::StageIV | Scenario::ExtranodalOnly => Stage::IV,
                };
                assert_eq!(t.stage, want, "{sc:?} seed {seed}");
                if sc == Scenario::ExtranodalOnly {
                    assert!(t.profile.involved.is_empty());
                }
            }
        }
    }
}
