//! Declarative spatial rules that carve the 21 nodal regions out of a
//! landmark label map. See `docs/rules.md` for the language reference.

mod ast;
mod eval;
mod parser;

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::RegionId;
use crate::volume::{Grid3, LabelVolume, VoxelSet};

pub use ast::{Direction, Expr, Reference, RegionRule, RuleSet, Side, MAX_DEPTH};
pub use eval::{dilate, evaluate_rule, Evaluator};
pub use parser::parse_rules;

/// The shipped default rule file.
pub const DEFAULT_RULES: &str = include_str!("regions.rules");

pub fn default_rules() -> RuleSet {
    parse_rules(DEFAULT_RULES).expect("shipped rule file parses")
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("rule file {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("rule file is missing regions: {}", .0.join(", "))]
    MissingRegions(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    /// Label id in the atlas label map.
    pub label: u32,
    pub priority: i64,
    /// Voxels produced by the rule before exclusivity.
    pub raw_voxels: usize,
    pub voxels: usize,
    pub volume_ml: f64,
    /// Raw voxels handed to a higher-priority region.
    pub lost_to_exclusivity: usize,
}

/// Manifest of an atlas build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasReport {
    pub rule_hash: String,
    pub regions: BTreeMap<RegionId, RegionSummary>,
    /// Voxels claimed by more than one rule before exclusivity.
    pub contested_voxels: usize,
    pub warnings: Vec<String>,
}

/// 21 mutually exclusive region masks on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAtlas {
    grid: Grid3,
    regions: Vec<VoxelSet>,
    /// 0 for unassigned, else `RegionId::index() + 1`.
    owner: Vec<u8>,
    report: AtlasReport,
}

impl RegionAtlas {
    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn region(&self, id: RegionId) -> &VoxelSet {
        &self.regions[id.index()]
    }

    pub fn region_at(&self, index: usize) -> Option<RegionId> {
        match self.owner[index] {
            0 => None,
            o => RegionId::from_index(o as usize - 1),
        }
    }

    pub fn rule_hash(&self) -> &str {
        &self.report.rule_hash
    }

    pub fn report(&self) -> &AtlasReport {
        &self.report
    }

    /// Multi-label map with label `index + 1` per region.
    pub fn label_volume(&self) -> LabelVolume {
        let dict = RegionId::ALL
            .iter()
            .map(|r| (r.index() as u32 + 1, r.name().to_string()))
            .collect();
        LabelVolume::new(self.grid, self.owner.iter().map(|&o| o as u32).collect(), dict)
            .expect("owner map uses dictionary labels")
    }

    /// Number of voxels found in more than one region set; 0 for a valid atlas.
    pub fn overlapping_voxels(&self) -> usize {
        let mut seen = vec![0u8; self.grid.len()];
        let mut dup = 0;
        for set in &self.regions {
            for &i in set.indices() {
                seen[i] += 1;
                if seen[i] == 2 {
                    dup += 1;
                }
            }
        }
        dup
    }

    /// Reads back a map written by `label_volume`.
    pub fn from_label_volume(labels: &LabelVolume) -> Result<Self> {
        let grid = *labels.grid();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); 21];
        for (i, &l) in labels.labels().iter().enumerate() {
            if l == 0 {
                continue;
            }
            match RegionId::from_index(l as usize - 1) {
                Some(r) => members[r.index()].push(i),
                None => return Err(Error::InvalidVolume(format!("atlas label {l} is not a region (1-21)"))),
            }
        }
        let sets = RegionId::ALL
            .iter()
            .zip(members)
            .map(|(&r, m)| (r, VoxelSet::from_sorted_unchecked(grid, m)))
            .collect();
        Self::from_sets(grid, sets)
    }

    /// Builds an atlas from explicit region sets; later claims on a voxel
    /// are dropped so the result is always exclusive.
    pub fn from_sets(grid: Grid3, sets: BTreeMap<RegionId, VoxelSet>) -> Result<Self> {
        let mut raw = Vec::with_capacity(21);
        for r in RegionId::ALL {
            let set = sets.get(&r).cloned().unwrap_or_else(|| VoxelSet::empty(grid));
            set.grid().ensure_matches(&grid, "region set")?;
            raw.push((r, 0, set.to_mask()));
        }
        Ok(resolve(grid, raw, String::new(), Vec::new()))
    }
}

fn resolve(grid: Grid3, raw: Vec<(RegionId, i64, Vec<bool>)>, rule_hash: String, warnings: Vec<String>) -> RegionAtlas {
    let n = grid.len();
    let mut claims = vec![0u8; n];
    for (_, _, m) in &raw {
        for (c, &b) in claims.iter_mut().zip(m) {
            *c = c.saturating_add(b as u8);
        }
    }
    let contested_voxels = claims.iter().filter(|&&c| c > 1).count();

    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by_key(|&i| (raw[i].1, raw[i].0));
    let mut owner = vec![0u8; n];
    let mut lost = [0usize; 21];
    for &i in &order {
        let (region, _, mask) = &raw[i];
        for (o, &b) in owner.iter_mut().zip(mask) {
            if b {
                if *o == 0 {
                    *o = region.index() as u8 + 1;
                } else {
                    lost[region.index()] += 1;
                }
            }
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); 21];
    for (idx, &o) in owner.iter().enumerate() {
        if o > 0 {
            members[o as usize - 1].push(idx);
        }
    }
    let regions: Vec<VoxelSet> = members.into_iter().map(|m| VoxelSet::from_sorted_unchecked(grid, m)).collect();
    let summaries = raw
        .iter()
        .map(|(r, p, m)| {
            let set = &regions[r.index()];
            (
                *r,
                RegionSummary {
                    label: r.index() as u32 + 1,
                    priority: *p,
                    raw_voxels: m.iter().filter(|&&b| b).count(),
                    voxels: set.len(),
                    volume_ml: set.volume_ml(),
                    lost_to_exclusivity: lost[r.index()],
                },
            )
        })
        .collect();
    RegionAtlas {
        grid,
        regions,
        owner,
        report: AtlasReport {
            rule_hash,
            regions: summaries,
            contested_voxels,
            warnings,
        },
    }
}

/// Evaluates all 21 rules on `landmarks` (already on `grid`) and enforces
/// exclusivity: a voxel claimed by several regions goes to the lowest
/// priority number, ties broken by region order.
pub fn build_atlas(rules: &RuleSet, landmarks: &LabelVolume, grid: &Grid3) -> Result<RegionAtlas> {
    landmarks.grid().ensure_matches(grid, "landmark map")?;
    let mut warnings = Vec::new();
    let mut ev = Evaluator::new(landmarks);
    ev.prime(rules, &mut warnings);
    let ev = &ev;
    let evaluated: Vec<(RegionId, i64, Vec<bool>, Vec<String>)> = RegionId::ALL
        .par_iter()
        .map(|&r| {
            let rule = rules.rule(r);
            let mut w = Vec::new();
            let mask = ev.eval(&rule.expr, &mut w);
            (r, rule.priority, mask, w)
        })
        .collect();
    let mut raw = Vec::with_capacity(21);
    for (r, p, mask, w) in evaluated {
        warnings.extend(w.into_iter().map(|m| format!("{}: {m}", r.name())));
        if !mask.contains(&true) {
            warnings.push(format!("{}: region is empty", r.name()));
        }
        raw.push((r, p, mask));
    }
    warnings.sort();
    warnings.dedup();
    for w in &warnings {
        warn!("atlas: {w}");
    }
    Ok(resolve(*grid, raw, rules.source_hash.clone(), warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rules_parse_to_21_regions() {
        let rs = default_rules();
        assert_eq!(rs.rules.len(), 21);
        assert!(rs.landmarks.is_some());
        // rule bodies reference only declared landmarks
        let inv = rs.landmarks.clone().unwrap();
        for name in rs.referenced_landmarks() {
            assert!(inv.contains(&name), "{name}");
        }
    }

    fn box_landmarks() -> LabelVolume {
        let g = Grid3::ras([10, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let labels = (0..g.len())
            .map(|i| match g.coords(i)[0] {
                0..=3 => 1,
                4..=6 => 2,
                _ => 0,
            })
            .collect();
        LabelVolume::new(g, labels, BTreeMap::from([(1, "a".into()), (2, "b".into())])).unwrap()
    }

    fn rules_with(spleen: &str, spleen_p: i64, liver_side: &str, other_p: i64) -> RuleSet {
        let text: String = RegionId::ALL
            .iter()
            .map(|r| match r {
                RegionId::Spleen => format!("region Spleen {{ priority = {spleen_p}; expr = {spleen}; }}\n"),
                RegionId::UpperAbdomen => {
                    format!("region UpperAbdomen {{ priority = {other_p}; expr = {liver_side}; }}\n")
                }
                _ => format!("region {} {{ priority = 5; expr = empty; }}\n", r.name()),
            })
            .collect();
        parse_rules(&text).unwrap()
    }

    #[test]
    fn non_overlapping_rules_equal_raw_evaluations() {
        let l = box_landmarks();
        let rs = rules_with("a", 1, "b", 2);
        let atlas = build_atlas(&rs, &l, l.grid()).unwrap();
        assert_eq!(atlas.region(RegionId::Spleen), &l.voxels_with_label(1));
        assert_eq!(atlas.region(RegionId::UpperAbdomen), &l.voxels_with_label(2));
        assert_eq!(atlas.report().contested_voxels, 0);
        assert_eq!(atlas.overlapping_voxels(), 0);
    }

    #[test]
    fn priority_decides_contested_voxels() {
        let l = box_landmarks();
        // both claim `a`; UpperAbdomen has priority 1
        let rs = rules_with("a", 2, "a", 1);
        let atlas = build_atlas(&rs, &l, l.grid()).unwrap();
        assert!(atlas.region(RegionId::Spleen).is_empty());
        assert_eq!(atlas.region(RegionId::UpperAbdomen).len(), 64);
        assert_eq!(atlas.report().contested_voxels, 64);
        assert_eq!(atlas.report().regions[&RegionId::Spleen].lost_to_exclusivity, 64);
        // equal priority: enumeration order (Spleen before UpperAbdomen)
        let tie = build_atlas(&rules_with("a", 3, "a", 3), &l, l.grid()).unwrap();
        assert_eq!(tie.region(RegionId::Spleen).len(), 64);
        assert!(tie.region(RegionId::UpperAbdomen).is_empty());
        assert_eq!(tie.label_volume().labels()[0], RegionId::Spleen.index() as u32 + 1);
    }

    #[test]
    fn label_volume_round_trip() {
        let l = box_landmarks();
        let atlas = build_atlas(&rules_with("a", 1, "b", 2), &l, l.grid()).unwrap();
        let back = RegionAtlas::from_label_volume(&atlas.label_volume()).unwrap();
        for r in RegionId::ALL {
            assert_eq!(back.region(r), atlas.region(r));
        }
        assert!(RegionAtlas::from_label_volume(&l).is_ok());
        let bad = LabelVolume::with_default_names(*l.grid(), vec![22; l.grid().len()], BTreeMap::new()).unwrap();
        assert!(RegionAtlas::from_label_volume(&bad).is_err());
    }

    #[test]
    fn empty_regions_are_warned_not_fatal() {
        let l = box_landmarks();
        let atlas = build_atlas(&rules_with("missing", 1, "b", 2), &l, l.grid()).unwrap();
        let w = &atlas.report().warnings;
        assert!(w.iter().any(|m| m == "Spleen: landmark `missing` is not in the label map"), "{w:?}");
        assert!(w.iter().any(|m| m == "Spleen: region is empty"));
    }
}
