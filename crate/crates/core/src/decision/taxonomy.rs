use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Closed taxonomy of rail indications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DefectClass {
    NoIndication,
    BoltedJoint,
    RailJoint,
    Weld,
    HeadHorizontalCrack,
    HeadDelamination,
    FootDetachment,
    WebCrack,
    WeldVoid,
    VerticalCrack,
    InclinedCrack,
    BoltHoleStarCrack,
    BoltHoleIntact,
}

impl DefectClass {
    pub const ALL: [DefectClass; 13] = [
        DefectClass::NoIndication,
        DefectClass::BoltedJoint,
        DefectClass::RailJoint,
        DefectClass::Weld,
        DefectClass::HeadHorizontalCrack,
        DefectClass::HeadDelamination,
        DefectClass::FootDetachment,
        DefectClass::WebCrack,
        DefectClass::WeldVoid,
        DefectClass::VerticalCrack,
        DefectClass::InclinedCrack,
        DefectClass::BoltHoleStarCrack,
        DefectClass::BoltHoleIntact,
    ];

    /// Every class that can be rendered as an indication.
    pub const INDICATIONS: [DefectClass; 12] = [
        DefectClass::BoltedJoint,
        DefectClass::RailJoint,
        DefectClass::Weld,
        DefectClass::HeadHorizontalCrack,
        DefectClass::HeadDelamination,
        DefectClass::FootDetachment,
        DefectClass::WebCrack,
        DefectClass::WeldVoid,
        DefectClass::VerticalCrack,
        DefectClass::InclinedCrack,
        DefectClass::BoltHoleStarCrack,
        DefectClass::BoltHoleIntact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::NoIndication => "NoIndication",
            DefectClass::BoltedJoint => "BoltedJoint",
            DefectClass::RailJoint => "RailJoint",
            DefectClass::Weld => "Weld",
            DefectClass::HeadHorizontalCrack => "HeadHorizontalCrack",
            DefectClass::HeadDelamination => "HeadDelamination",
            DefectClass::FootDetachment => "FootDetachment",
            DefectClass::WebCrack => "WebCrack",
            DefectClass::WeldVoid => "WeldVoid",
            DefectClass::VerticalCrack => "VerticalCrack",
            DefectClass::InclinedCrack => "InclinedCrack",
            DefectClass::BoltHoleStarCrack => "BoltHoleStarCrack",
            DefectClass::BoltHoleIntact => "BoltHoleIntact",
        }
    }

    /// Expected structural reflectors rather than defects.
    pub fn is_technological(self) -> bool {
        matches!(
            self,
            DefectClass::BoltedJoint
                | DefectClass::RailJoint
                | DefectClass::Weld
                | DefectClass::BoltHoleIntact
        )
    }

    pub fn is_indication(self) -> bool {
        self != DefectClass::NoIndication
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DefectClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown defect class {s:?}")))
    }
}
