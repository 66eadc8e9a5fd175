use std::fmt;

use serde::{Deserialize, Serialize};

pub const JOINT_COUNT: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
}

impl Finger {
    pub const ALL: [Finger; 5] = [
        Finger::Thumb,
        Finger::Index,
        Finger::Middle,
        Finger::Ring,
        Finger::Little,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Finger::Thumb => "thumb",
            Finger::Index => "index",
            Finger::Middle => "middle",
            Finger::Ring => "ring",
            Finger::Little => "little",
        }
    }
}

/// Anatomical level of a finger joint. The thumb's interphalangeal joint is
/// filed under `Pip`, so the skeleton splits 5 MCP + 5 PIP + 4 DIP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JointLevel {
    #[serde(rename = "MCP")]
    Mcp,
    #[serde(rename = "PIP")]
    Pip,
    #[serde(rename = "DIP")]
    Dip,
}

impl JointLevel {
    pub fn name(self) -> &'static str {
        match self {
            JointLevel::Mcp => "MCP",
            JointLevel::Pip => "PIP",
            JointLevel::Dip => "DIP",
        }
    }
}

/// One of the 14 hand joints.
///
/// Canonical index order:
///
/// | index | joints                                   |
/// |-------|------------------------------------------|
/// | 0–4   | MCP of thumb, index, middle, ring, little |
/// | 5–9   | PIP of thumb (IP), index, middle, ring, little |
/// | 10–13 | DIP of index, middle, ring, little       |
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JointId(u8);

impl JointId {
    pub fn new(index: usize) -> Option<Self> {
        (index < JOINT_COUNT).then_some(JointId(index as u8))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = JointId> {
        (0..JOINT_COUNT as u8).map(JointId)
    }

    pub fn from_parts(finger: Finger, level: JointLevel) -> Option<Self> {
        let f = finger as usize;
        match level {
            JointLevel::Mcp => JointId::new(f),
            JointLevel::Pip => JointId::new(5 + f),
            JointLevel::Dip if finger == Finger::Thumb => None,
            JointLevel::Dip => JointId::new(10 + f - 1),
        }
    }

    pub fn finger(self) -> Finger {
        match self.0 {
            0..=9 => Finger::ALL[usize::from(self.0) % 5],
            _ => Finger::ALL[usize::from(self.0) - 9],
        }
    }

    pub fn level(self) -> JointLevel {
        match self.0 {
            0..=4 => JointLevel::Mcp,
            5..=9 => JointLevel::Pip,
            _ => JointLevel::Dip,
        }
    }
}

impl fmt::Debug for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "JointId({}:{})", self.0, self)
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.finger().name(), self.level().name())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn fourteen_distinct_joints_with_five_five_four_split() {
        let all: Vec<_> = JointId::all().collect();
        assert_eq!(all.len(), 14);
        let pairs: BTreeSet<_> = all.iter().map(|j| (j.finger(), j.level())).collect();
        assert_eq!(pairs.len(), 14);
        let count = |lvl| all.iter().filter(|j| j.level() == lvl).count();
        assert_eq!(count(JointLevel::Mcp), 5);
        assert_eq!(count(JointLevel::Pip), 5);
        assert_eq!(count(JointLevel::Dip), 4);
    }

    #[test]
    fn parts_round_trip() {
        for j in JointId::all() {
            assert_eq!(JointId::from_parts(j.finger(), j.level()), Some(j));
        }
        assert_eq!(JointId::from_parts(Finger::Thumb, JointLevel::Dip), None);
        assert_eq!(JointId::new(14), None);
        assert_eq!(JointId::new(13).unwrap().to_string(), "little-DIP");
        assert_eq!(JointId::new(5).unwrap().to_string(), "thumb-PIP");
    }
}
