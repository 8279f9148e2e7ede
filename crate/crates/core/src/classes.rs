use std::fmt;

use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 3;

/// Mass-margin type. The discriminant is the class index used everywhere
/// (logit order, head rows, manifests).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginClass {
    Circumscribed = 0,
    Indistinct = 1,
    Spiculated = 2,
}

impl MarginClass {
    pub const ALL: [MarginClass; NUM_CLASSES] = [
        MarginClass::Circumscribed,
        MarginClass::Indistinct,
        MarginClass::Spiculated,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginClass::Circumscribed => "circumscribed",
            MarginClass::Indistinct => "indistinct",
            MarginClass::Spiculated => "spiculated",
        }
    }
}

impl fmt::Display for MarginClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
