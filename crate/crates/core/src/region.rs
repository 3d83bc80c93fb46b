//! The 21 nodal regions and a compact set type over them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! regions {
    ($($variant:ident => $label:literal),+ $(,)?) => {
        /// Nodal region, in fixed enumeration order. The order is used for
        /// tie-breaking everywhere (atlas exclusivity, argmax ties) and for the
        /// `region_1..region_21` columns of the reference table.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum RegionId {
            $($variant),+
        }

        impl RegionId {
            pub const ALL: [RegionId; 21] = [$(RegionId::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(RegionId::$variant => stringify!($variant)),+
                }
            }

            /// Human-readable label used in tabular exports.
            pub fn label(self) -> &'static str {
                match self {
                    $(RegionId::$variant => $label),+
                }
            }
        }
    };
}

regions! {
    WaldeyersRing => "Waldeyer's Ring",
    NeckL => "Left Neck",
    NeckR => "Right Neck",
    InfraclavicularL => "Left Infraclavicular",
    InfraclavicularR => "Right Infraclavicular",
    AxillaL => "Left Axilla",
    AxillaR => "Right Axilla",
    TrochleaL => "Left Trochlea",
    TrochleaR => "Right Trochlea",
    Mediastinum => "Mediastinum",
    HilumL => "Left Hilum",
    HilumR => "Right Hilum",
    Spleen => "Spleen",
    UpperAbdomen => "Upper Abdomen",
    LowerAbdomen => "Lower Abdomen",
    ParaIliacL => "Left Para-iliac",
    ParaIliacR => "Right Para-iliac",
    GroinL => "Left Groin",
    GroinR => "Right Groin",
    PoplitealL => "Left Popliteal Fossa",
    PoplitealR => "Right Popliteal Fossa",
}

impl RegionId {
    /// Zero-based position in the enumeration.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<RegionId> {
        RegionId::ALL.get(index).copied()
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownRegion(pub String);

impl fmt::Display for UnknownRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown region name {:?}", self.0)
    }
}

impl std::error::Error for UnknownRegion {}

impl FromStr for RegionId {
    type Err = UnknownRegion;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RegionId::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| UnknownRegion(s.to_string()))
    }
}

impl Serialize for RegionId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RegionId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Set of regions as a 21-bit mask. Iterates in enumeration order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RegionSet(u32);

impl RegionSet {
    pub const FULL_MASK: u32 = (1 << 21) - 1;

    pub fn new() -> Self {
        RegionSet(0)
    }

    /// Builds a set from raw bits; bits above the 21st are dropped.
    pub fn from_bits(bits: u32) -> Self {
        RegionSet(bits & Self::FULL_MASK)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn insert(&mut self, region: RegionId) -> bool {
        let bit = 1 << region.index();
        let fresh = self.0 & bit == 0;
        self.0 |= bit;
        fresh
    }

    pub fn contains(self, region: RegionId) -> bool {
        self.0 & (1 << region.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: RegionSet) -> RegionSet {
        RegionSet(self.0 | other.0)
    }

    pub fn intersection(self, other: RegionSet) -> RegionSet {
        RegionSet(self.0 & other.0)
    }

    pub fn is_subset(self, other: RegionSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = RegionId> {
        RegionId::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

impl FromIterator<RegionId> for RegionSet {
    fn from_iter<I: IntoIterator<Item = RegionId>>(iter: I) -> Self {
        let mut set = RegionSet::new();
        for r in iter {
            set.insert(r);
        }
        set
    }
}

impl Serialize for RegionSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for RegionSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let regions = Vec::<RegionId>::deserialize(deserializer)?;
        Ok(regions.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_has_21_distinct_names() {
        assert_eq!(RegionId::ALL.len(), 21);
        for (i, r) in RegionId::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(r.name().parse::<RegionId>().unwrap(), *r);
        }
        assert!("Neck".parse::<RegionId>().is_err());
    }

    #[test]
    fn set_iterates_in_enumeration_order() {
        let set: RegionSet = [RegionId::Spleen, RegionId::NeckL, RegionId::Spleen]
            .into_iter()
            .collect();
        assert_eq!(set.len(), 2);
        assert_eq!(
            set.iter().collect::<Vec<_>>(),
            vec![RegionId::NeckL, RegionId::Spleen]
        );
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(json, r#"["NeckL","Spleen"]"#);
        assert_eq!(serde_json::from_str::<RegionSet>(&json).unwrap(), set);
    }
}
