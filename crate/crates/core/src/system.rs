use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three compared systems: a baseline with speaker-independent
/// bottleneck features, the accent-dependent variant, and that variant with
/// the adversarial speaker classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SystemId {
    BL,
    P1,
    P2,
}

impl SystemId {
    pub const ALL: [SystemId; 3] = [SystemId::BL, SystemId::P1, SystemId::P2];

    pub fn accent_dependent(self) -> bool {
        self != SystemId::BL
    }

    pub fn adversarial(self) -> bool {
        self == SystemId::P2
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemId::BL => "BL",
            SystemId::P1 => "P1",
            SystemId::P2 => "P2",
        })
    }
}

impl FromStr for SystemId {
    type Err = Error;
    fn from_str(s: &str) -> Result<SystemId> {
        match s {
            "BL" | "bl" => Ok(SystemId::BL),
            "P1" | "p1" => Ok(SystemId::P1),
            "P2" | "p2" => Ok(SystemId::P2),
            _ => Err(Error::Config(format!("unknown system {s:?}; valid: BL, P1, P2"))),
        }
    }
}
