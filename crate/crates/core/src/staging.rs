//! Lugano stage and therapeutic group from an involvement profile.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::localization::InvolvementProfile;
use crate::region::{RegionId, RegionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiaphragmSide {
    Supra,
    Infra,
}

impl RegionId {
    pub fn diaphragm_side(self) -> DiaphragmSide {
        use RegionId::*;
        match self {
            WaldeyersRing | NeckL | NeckR | InfraclavicularL | InfraclavicularR | AxillaL | AxillaR | TrochleaL
            | TrochleaR | Mediastinum | HilumL | HilumR => DiaphragmSide::Supra,
            Spleen | UpperAbdomen | LowerAbdomen | ParaIliacL | ParaIliacR | GroinL | GroinR | PoplitealL
            | PoplitealR => DiaphragmSide::Infra,
        }
    }
}

pub fn supra_regions() -> RegionSet {
    RegionId::ALL
        .into_iter()
        .filter(|r| r.diaphragm_side() == DiaphragmSide::Supra)
        .collect()
}

pub fn infra_regions() -> RegionSet {
    RegionId::ALL
        .into_iter()
        .filter(|r| r.diaphragm_side() == DiaphragmSide::Infra)
        .collect()
}

/// Ordered `NoInvolvement < I < II < III < IV`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    NoInvolvement,
    I,
    II,
    III,
    IV,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::NoInvolvement, Stage::I, Stage::II, Stage::III, Stage::IV];

    /// 0 for `NoInvolvement`, else the Lugano number.
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.get(n as usize).copied()
    }

    pub fn group(self) -> TherapeuticGroup {
        therapeutic_group(self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::NoInvolvement => "NoInvolvement",
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
            Stage::IV => "IV",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "0" | "NoInvolvement" | "none" => Ok(Stage::NoInvolvement),
            "1" | "I" => Ok(Stage::I),
            "2" | "II" => Ok(Stage::II),
            "3" | "III" => Ok(Stage::III),
            "4" | "IV" => Ok(Stage::IV),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TherapeuticGroup {
    Limited,
    Advanced,
    #[serde(rename = "None")]
    Unstaged,
}

pub fn therapeutic_group(stage: Stage) -> TherapeuticGroup {
    match stage {
        Stage::I | Stage::II => TherapeuticGroup::Limited,
        Stage::III | Stage::IV => TherapeuticGroup::Advanced,
        Stage::NoInvolvement => TherapeuticGroup::Unstaged,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingRationale {
    pub supra_regions: Vec<RegionId>,
    pub infra_regions: Vec<RegionId>,
    pub extranodal: bool,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingResult {
    pub stage: Stage,
    pub group: TherapeuticGroup,
    pub rationale: StagingRationale,
}

pub fn stage_of(involved: RegionSet, extranodal: bool) -> Stage {
    let supra = !involved.intersection(supra_regions()).is_empty();
    let infra = !involved.intersection(infra_regions()).is_empty();
    if extranodal {
        Stage::IV
    } else if supra && infra {
        Stage::III
    } else if involved.len() >= 2 {
        Stage::II
    } else if involved.len() == 1 {
        Stage::I
    } else {
        Stage::NoInvolvement
    }
}

pub fn stage(profile: &InvolvementProfile) -> StagingResult {
    let s = stage_of(profile.involved, profile.extranodal);
    let supra: Vec<RegionId> = profile.involved.intersection(supra_regions()).iter().collect();
    let infra: Vec<RegionId> = profile.involved.intersection(infra_regions()).iter().collect();
    let rule = match s {
        Stage::IV => "extranodal involvement",
        Stage::III => "nodal regions on both sides of the diaphragm",
        Stage::II => "two or more nodal regions on one side of the diaphragm",
        Stage::I => "single nodal region",
        Stage::NoInvolvement => "no involved region",
    };
    StagingResult {
        stage: s,
        group: therapeutic_group(s),
        rationale: StagingRationale {
            supra_regions: supra,
            infra_regions: infra,
            extranodal: profile.extranodal,
            rule: rule.to_string(),
        },
    }
}
