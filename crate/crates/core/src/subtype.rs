//! The closed tissue label set.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Background plus the five annotated tumor subtypes.
///
/// Codes are stable and used verbatim in mask PNGs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum SubtypeClass {
    Background = 0,
    Her2Zero = 1,
    Her2One = 2,
    Her2Two = 3,
    Her2Three = 4,
    /// LCIS/DCIS composite; never split into HER2 scores.
    Cis = 5,
}

pub const NUM_CLASSES: usize = 6;

impl SubtypeClass {
    pub const ALL: [SubtypeClass; NUM_CLASSES] = [
        SubtypeClass::Background,
        SubtypeClass::Her2Zero,
        SubtypeClass::Her2One,
        SubtypeClass::Her2Two,
        SubtypeClass::Her2Three,
        SubtypeClass::Cis,
    ];

    pub const TUMOR: [SubtypeClass; 5] = [
        SubtypeClass::Her2Zero,
        SubtypeClass::Her2One,
        SubtypeClass::Her2Two,
        SubtypeClass::Her2Three,
        SubtypeClass::Cis,
    ];

    pub const HER2: [SubtypeClass; 4] = [
        SubtypeClass::Her2Zero,
        SubtypeClass::Her2One,
        SubtypeClass::Her2Two,
        SubtypeClass::Her2Three,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            SubtypeClass::Background => "background",
            SubtypeClass::Her2Zero => "her2_0",
            SubtypeClass::Her2One => "her2_1",
            SubtypeClass::Her2Two => "her2_2",
            SubtypeClass::Her2Three => "her2_3",
            SubtypeClass::Cis => "cis",
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Validation(format!("subtype code {code} outside 0..=5")))
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Validation(format!("unknown subtype name `{name}`")))
    }

    pub fn is_tumor(self) -> bool {
        self != SubtypeClass::Background
    }
}

impl fmt::Display for SubtypeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for SubtypeClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

/// Accepts either the name (`"her2_3"`) or the integer code (`4`).
impl<'de> Deserialize<'de> for SubtypeClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Code(u8),
            Name(String),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Code(c) => SubtypeClass::from_code(c),
            Repr::Name(n) => SubtypeClass::from_name(&n),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_name_mapping_is_a_bijection() {
        for c in SubtypeClass::ALL {
            assert_eq!(SubtypeClass::from_code(c.code()).unwrap(), c);
            assert_eq!(SubtypeClass::from_name(c.name()).unwrap(), c);
        }
        let names: std::collections::HashSet<_> = SubtypeClass::ALL.iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), NUM_CLASSES);
        assert!(SubtypeClass::from_code(6).is_err());
    }

    #[test]
    fn only_background_is_not_tumor() {
        assert!(!SubtypeClass::Background.is_tumor());
        assert!(SubtypeClass::TUMOR.iter().all(|c| c.is_tumor()));
    }

    #[test]
    fn serde_accepts_names_and_codes() {
        let a: SubtypeClass = serde_json::from_str("\"cis\"").unwrap();
        let b: SubtypeClass = serde_json::from_str("5").unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), "\"cis\"");
    }
}
