//! Lesion-to-region assignment, extranodal detection and the per-patient
//! involvement profile.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::atlas::RegionAtlas;
use crate::error::{Error, Result};
use crate::region::{RegionId, RegionSet};
use crate::volume::{connected_components, Connectivity, LabelVolume, VoxelSet};

/// Primary region by maximal overlap (ties to the earlier region); a region
/// is secondary when its overlap exceeds 25% of the primary's.
pub fn assign_from_overlaps(overlaps: &[usize; 21]) -> (Option<RegionId>, Vec<RegionId>) {
    let mut best = 0;
    for i in 1..21 {
        if overlaps[i] > overlaps[best] {
            best = i;
        }
    }
    let op = overlaps[best];
    if op == 0 {
        return (None, Vec::new());
    }
    let secondaries = (0..21)
        .filter(|&i| i != best && overlaps[i] > 0 && 4 * overlaps[i] > op)
        .map(|i| RegionId::ALL[i])
        .collect();
    (Some(RegionId::ALL[best]), secondaries)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionAssignment {
    pub primary: Option<RegionId>,
    pub secondaries: Vec<RegionId>,
    pub overlaps: [usize; 21],
}

pub fn assign_regions(lesion: &VoxelSet, atlas: &RegionAtlas) -> Result<RegionAssignment> {
    lesion.grid().ensure_matches(atlas.grid(), "lesion vs atlas")?;
    let mut overlaps = [0usize; 21];
    for &i in lesion.indices() {
        if let Some(r) = atlas.region_at(i) {
            overlaps[r.index()] += 1;
        }
    }
    let (primary, secondaries) = assign_from_overlaps(&overlaps);
    Ok(RegionAssignment {
        primary,
        secondaries,
        overlaps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtranodalConfig {
    /// Organ group name → landmark name patterns (`prefix*` or exact).
    pub organs: BTreeMap<String, Vec<String>>,
    pub min_voxels: usize,
    pub min_fraction: f64,
}

impl Default for ExtranodalConfig {
    fn default() -> Self {
        let group = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        ExtranodalConfig {
            organs: BTreeMap::from([
                ("liver".to_string(), group(&["liver"])),
                ("lung".to_string(), group(&["lung*"])),
                (
                    "bone".to_string(),
                    group(&[
                        "skull",
                        "vertebra*",
                        "spine_*",
                        "sacrum",
                        "rib*",
                        "sternum",
                        "costal_cartilages",
                        "clavicula*",
                        "scapula*",
                        "humerus*",
                        "hip*",
                        "femur*",
                        "tibia*",
                        "fibula*",
                    ]),
                ),
            ]),
            min_voxels: 3,
            min_fraction: 0.5,
        }
    }
}

fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

impl ExtranodalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_fraction) {
            return Err(Error::Config(format!(
                "extranodal min_fraction must be in [0, 1], got {}",
                self.min_fraction
            )));
        }
        Ok(())
    }

    /// Label ids of `organs` belonging to each group.
    fn group_labels(&self, organs: &LabelVolume) -> BTreeMap<String, Vec<u32>> {
        self.organs
            .iter()
            .map(|(group, patterns)| {
                let ids = organs
                    .dictionary()
                    .iter()
                    .filter(|(_, name)| patterns.iter().any(|p| pattern_matches(p, name)))
                    .map(|(&id, _)| id)
                    .collect();
                (group.clone(), ids)
            })
            .collect()
    }
}

/// Voxel overlap of the lesion with each organ group.
pub fn organ_overlaps(lesion: &VoxelSet, organs: &LabelVolume, cfg: &ExtranodalConfig) -> Result<BTreeMap<String, usize>> {
    lesion.grid().ensure_matches(organs.grid(), "lesion vs organ map")?;
    let groups = cfg.group_labels(organs);
    let labels = organs.labels();
    Ok(groups
        .into_iter()
        .map(|(g, ids)| {
            let n = lesion.indices().iter().filter(|&&i| ids.contains(&labels[i])).count();
            (g, n)
        })
        .collect())
}

/// Organ groups the lesion predominantly lies in: overlap at least
/// `min_voxels`, above `min_fraction` of the lesion, and above the lesion's
/// total nodal-region overlap.
pub fn detect_extranodal(
    lesion: &VoxelSet,
    organs: &LabelVolume,
    nodal_overlap_total: usize,
    cfg: &ExtranodalConfig,
) -> Result<Vec<String>> {
    let overlaps = organ_overlaps(lesion, organs, cfg)?;
    Ok(extranodal_from_overlaps(&overlaps, lesion.len(), nodal_overlap_total, cfg))
}

pub fn extranodal_from_overlaps(
    overlaps: &BTreeMap<String, usize>,
    lesion_voxels: usize,
    nodal_overlap_total: usize,
    cfg: &ExtranodalConfig,
) -> Vec<String> {
    overlaps
        .iter()
        .filter(|(_, &n)| {
            n >= cfg.min_voxels.max(1) && n as f64 > cfg.min_fraction * lesion_voxels as f64 && n > nodal_overlap_total
        })
        .map(|(g, _)| g.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionStatus {
    Nodal,
    Extranodal,
    NodalAndExtranodal,
    /// No region and no organ overlap (e.g. extracorporeal contamination);
    /// excluded from staging.
    Unlocalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapTable {
    /// Nonzero region overlaps only.
    pub regions: BTreeMap<RegionId, usize>,
    pub organs: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub id: usize,
    pub voxel_count: usize,
    pub volume_ml: f64,
    pub centroid_mm: [f64; 3],
    pub primary_region: Option<RegionId>,
    pub secondary_regions: Vec<RegionId>,
    pub extranodal_organs: Vec<String>,
    pub status: LesionStatus,
    pub overlap_table: OverlapTable,
    #[serde(skip)]
    pub voxels: Option<VoxelSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub connectivity: Connectivity,
    pub extranodal: ExtranodalConfig,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            connectivity: Connectivity::TwentySix,
            extranodal: ExtranodalConfig::default(),
        }
    }
}

pub fn localize_lesion(
    id: usize,
    voxels: VoxelSet,
    atlas: &RegionAtlas,
    organs: &LabelVolume,
    cfg: &ExtranodalConfig,
) -> Result<Lesion> {
    let a = assign_regions(&voxels, atlas)?;
    let nodal_total: usize = a.overlaps.iter().sum();
    let organ_table = organ_overlaps(&voxels, organs, cfg)?;
    let extranodal = extranodal_from_overlaps(&organ_table, voxels.len(), nodal_total, cfg);
    let status = match (a.primary.is_some(), !extranodal.is_empty()) {
        (true, false) => LesionStatus::Nodal,
        (false, true) => LesionStatus::Extranodal,
        (true, true) => LesionStatus::NodalAndExtranodal,
        (false, false) => LesionStatus::Unlocalized,
    };
    let regions = RegionId::ALL
        .iter()
        .filter(|r| a.overlaps[r.index()] > 0)
        .map(|&r| (r, a.overlaps[r.index()]))
        .collect();
    Ok(Lesion {
        id,
        voxel_count: voxels.len(),
        volume_ml: voxels.volume_ml(),
        centroid_mm: voxels.centroid().unwrap_or([0.0; 3]),
        primary_region: a.primary,
        secondary_regions: a.secondaries,
        extranodal_organs: extranodal,
        status,
        overlap_table: OverlapTable {
            regions,
            organs: organ_table.into_iter().filter(|(_, n)| *n > 0).collect(),
        },
        voxels: Some(voxels),
    })
}

/// Splits the lesion mask into components and localizes each. Lesion ids
/// are 1-based in component order (largest first).
pub fn localize_lesions(
    lesion_mask: &LabelVolume,
    atlas: &RegionAtlas,
    organs: &LabelVolume,
    cfg: &LocalizationConfig,
) -> Result<Vec<Lesion>> {
    cfg.extranodal.validate()?;
    let comps = connected_components(lesion_mask, cfg.connectivity)?;
    comps
        .into_iter()
        .enumerate()
        .map(|(i, c)| localize_lesion(i + 1, c, atlas, organs, &cfg.extranodal))
        .collect()
}

/// Staging input: involved regions plus the extranodal flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvolvementProfile {
    pub involved: RegionSet,
    pub extranodal: bool,
    /// Lesion ids supporting each involved region.
    pub supporting_lesions: BTreeMap<RegionId, Vec<usize>>,
    pub extranodal_lesions: Vec<usize>,
}

impl InvolvementProfile {
    pub fn new(involved: RegionSet, extranodal: bool) -> Self {
        InvolvementProfile {
            involved,
            extranodal,
            ..Default::default()
        }
    }
}

pub fn build_involvement(lesions: &[Lesion]) -> InvolvementProfile {
    let mut p = InvolvementProfile::default();
    for l in lesions {
        for &r in l.primary_region.iter().chain(&l.secondary_regions) {
            p.involved.insert(r);
            p.supporting_lesions.entry(r).or_default().push(l.id);
        }
        if !l.extranodal_organs.is_empty() {
            p.extranodal = true;
            p.extranodal_lesions.push(l.id);
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::volume::{overlap_count, Grid3};

    fn table(pairs: &[(RegionId, usize)]) -> [usize; 21] {
        let mut t = [0; 21];
        for &(r, n) in pairs {
            t[r.index()] = n;
        }
        t
    }

    #[test]
    fn twenty_five_percent_rule() {
        use RegionId::*;
        assert_eq!(
            assign_from_overlaps(&table(&[(NeckL, 1000), (Mediastinum, 300)])),
            (Some(NeckL), vec![Mediastinum])
        );
        assert_eq!(
            assign_from_overlaps(&table(&[(NeckL, 1000), (Mediastinum, 250)])),
            (Some(NeckL), vec![])
        );
        assert_eq!(assign_from_overlaps(&[0; 21]), (None, vec![]));
        // ties go to the earlier region
        assert_eq!(
            assign_from_overlaps(&table(&[(Spleen, 5), (NeckR, 5)])),
            (Some(NeckR), vec![Spleen])
        );
    }

    // Brute-force scorer: sort by (-overlap, index), then test each other
    // region against a quarter of the winner in floating point.
    fn brute(t: &[usize; 21]) -> (Option<RegionId>, Vec<RegionId>) {
        let mut order: Vec<usize> = (0..21).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(t[i]), i));
        let p = order[0];
        if t[p] == 0 {
            return (None, vec![]);
        }
        let sec = (0..21)
            .filter(|&i| i != p && t[i] > 0 && (t[i] as f64) > 0.25 * t[p] as f64)
            .map(|i| RegionId::ALL[i])
            .collect();
        (Some(RegionId::ALL[p]), sec)
    }

    proptest! {
        #[test]
        fn scaling_overlaps_keeps_assignment(
            t in proptest::array::uniform21(0usize..2000),
            k in 1usize..50,
        ) {
            let scaled = t.map(|v| v * k);
            prop_assert_eq!(assign_from_overlaps(&t), assign_from_overlaps(&scaled));
            prop_assert_eq!(assign_from_overlaps(&t), brute(&t));
        }
    }

    fn atlas_and_lesions(rng: &mut ChaCha8Rng) -> (RegionAtlas, Vec<VoxelSet>) {
        let g = Grid3::ras([12, 10, 8], [1.0; 3], [0.0; 3]).unwrap();
        let mut sets: BTreeMap<RegionId, Vec<usize>> = BTreeMap::new();
        for i in 0..g.len() {
            if rng.random_bool(0.7) {
                let r = RegionId::ALL[rng.random_range(0..21)];
                sets.entry(r).or_default().push(i);
            }
        }
        let sets = sets.into_iter().map(|(r, v)| (r, VoxelSet::new(g, v).unwrap())).collect();
        let atlas = RegionAtlas::from_sets(g, sets).unwrap();
        let lesions = (0..5)
            .map(|_| {
                let start = rng.random_range(0..g.len() - 50);
                let len = rng.random_range(1..50);
                VoxelSet::new(g, (start..start + len).collect()).unwrap()
            })
            .collect();
        (atlas, lesions)
    }

    #[test]
    fn assign_regions_matches_per_region_overlap_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let (atlas, lesions) = atlas_and_lesions(&mut rng);
            for l in &lesions {
                let a = assign_regions(l, &atlas).unwrap();
                for r in RegionId::ALL {
                    assert_eq!(a.overlaps[r.index()], overlap_count(l, atlas.region(r)).unwrap());
                }
                assert_eq!((a.primary, a.secondaries.clone()), brute(&a.overlaps));
                assert!(a.primary.is_none_or(|p| !a.secondaries.contains(&p)));
            }
        }
    }

    fn organ_map(g: Grid3, liver: &[usize], lung: &[usize]) -> LabelVolume {
        let mut labels = vec![0; g.len()];
        for &i in liver {
            labels[i] = 1;
        }
        for &i in lung {
            labels[i] = 2;
        }
        LabelVolume::new(
            g,
            labels,
            BTreeMap::from([(1, "liver".into()), (2, "lung_upper_lobe_left".into())]),
        )
        .unwrap()
    }

    #[test]
    fn extranodal_dominance() {
        let g = Grid3::ras([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let cfg = ExtranodalConfig::default();
        let lesion = VoxelSet::new(g, (0..10).collect()).unwrap();
        let organs = organ_map(g, &(0..100).collect::<Vec<_>>(), &[]);
        assert_eq!(detect_extranodal(&lesion, &organs, 0, &cfg).unwrap(), vec!["liver"]);
        // 90% mediastinum, 10% lung
        let organs = organ_map(g, &[], &[9]);
        assert!(detect_extranodal(&lesion, &organs, 9, &cfg).unwrap().is_empty());
        // outside every label
        let organs = organ_map(g, &[500], &[600]);
        assert!(detect_extranodal(&lesion, &organs, 0, &cfg).unwrap().is_empty());
        // lung pattern matches lobe names; half of the lesion is not enough
        let organs = organ_map(g, &[], &(0..5).collect::<Vec<_>>());
        assert!(detect_extranodal(&lesion, &organs, 0, &cfg).unwrap().is_empty());
        let organs = organ_map(g, &[], &(0..6).collect::<Vec<_>>());
        assert_eq!(detect_extranodal(&lesion, &organs, 4, &cfg).unwrap(), vec!["lung"]);
        assert!(detect_extranodal(&lesion, &organs, 6, &cfg).unwrap().is_empty());
    }

    #[test]
    fn extracorporeal_lesion_is_unlocalized() {
        let g = Grid3::ras([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let atlas = RegionAtlas::from_sets(
            g,
            BTreeMap::from([(RegionId::Mediastinum, VoxelSet::new(g, (0..100).collect()).unwrap())]),
        )
        .unwrap();
        let organs = organ_map(g, &(100..200).collect::<Vec<_>>(), &[]);
        let l = localize_lesion(1, VoxelSet::new(g, (900..920).collect()).unwrap(), &atlas, &organs, &Default::default())
            .unwrap();
        assert_eq!(l.status, LesionStatus::Unlocalized);
        assert!(l.extranodal_organs.is_empty() && l.primary_region.is_none());
        let p = build_involvement(&[l]);
        assert!(p.involved.is_empty() && !p.extranodal);
    }

    fn lesion(id: usize, primary: Option<RegionId>, sec: &[RegionId], organs: &[&str]) -> Lesion {
        Lesion {
            id,
            voxel_count: 1,
            volume_ml: 0.001,
            centroid_mm: [0.0; 3],
            primary_region: primary,
            secondary_regions: sec.to_vec(),
            extranodal_organs: organs.iter().map(|s| s.to_string()).collect(),
            status: LesionStatus::Nodal,
            overlap_table: OverlapTable {
                regions: BTreeMap::new(),
                organs: BTreeMap::new(),
            },
            voxels: None,
        }
    }

    #[test]
    fn involvement_is_union() {
        use RegionId::*;
        assert_eq!(build_involvement(&[]), InvolvementProfile::default());
        let p = build_involvement(&[lesion(1, Some(NeckL), &[], &[]), lesion(2, Some(NeckL), &[Mediastinum], &[])]);
        assert_eq!(p.involved, [NeckL, Mediastinum].into_iter().collect());
        assert!(!p.extranodal);
        assert_eq!(p.supporting_lesions[&NeckL], vec![1, 2]);
    }

    #[test]
    fn involvement_matches_brute_union_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(0..8);
            let ls: Vec<Lesion> = (0..n)
                .map(|i| {
                    let p = rng.random_bool(0.8).then(|| RegionId::ALL[rng.random_range(0..21)]);
                    let s: Vec<RegionId> = (0..rng.random_range(0..3)).map(|_| RegionId::ALL[rng.random_range(0..21)]).collect();
                    let o: &[&str] = if rng.random_bool(0.1) { &["bone"] } else { &[] };
                    lesion(i + 1, p, &s, o)
                })
                .collect();
            let p = build_involvement(&ls);
            let mut bits = 0u32;
            for l in &ls {
                if let Some(r) = l.primary_region {
                    bits |= 1 << r.index();
                }
                for r in &l.secondary_regions {
                    bits |= 1 << r.index();
                }
            }
            assert_eq!(p.involved.bits(), bits);
            assert_eq!(p.extranodal, ls.iter().any(|l| !l.extranodal_organs.is_empty()));
            // adding a lesion never removes a region
            let mut more = ls.clone();
            more.push(lesion(99, Some(RegionId::ALL[rng.random_range(0..21)]), &[], &[]));
            assert!(p.involved.is_subset(build_involvement(&more).involved));
        }
    }
}
