//! Line-delimited dataset manifest.
//!
//! The first line is a header object, every following non-empty line one
//! record:
//!
//! ```text
//! {"schema_version":1,"joint_exclusions":["DIP"]}
//! {"image_path":"images/p000_w00.png","patient_id":"p000","hand_side":"left","capture_week":0,"mask_path":"masks/p000_w00.png","image_width":160,"image_height":160,"landmarks":[[0,41,97],...],"labels":[[0,0],[1,1],...]}
//! ```
//!
//! `landmarks` holds exactly 14 `[joint_index, x, y]` triples (integer pixels,
//! origin top-left); `labels` holds up to 14 `[joint_index, label]` pairs.
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::joints::{JointId, JointLevel, JOINT_COUNT};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Landmark {
    pub x: u32,
    pub y: u32,
}

/// All 14 landmarks in canonical joint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Landmarks([Landmark; JOINT_COUNT]);

impl Landmarks {
    pub fn new(points: [Landmark; JOINT_COUNT]) -> Self {
        Landmarks(points)
    }

    pub fn get(&self, joint: JointId) -> Landmark {
        self.0[joint.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (JointId, Landmark)> + '_ {
        JointId::all().zip(self.0.iter().copied())
    }
}

/// Per-joint binary labels; `None` marks an unassessed joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JointLabels([Option<u8>; JOINT_COUNT]);

impl JointLabels {
    pub fn new(labels: [Option<u8>; JOINT_COUNT]) -> Self {
        JointLabels(labels)
    }

    pub fn get(&self, joint: JointId) -> Option<u8> {
        self.0[joint.index()]
    }

    pub fn set(&mut self, joint: JointId, label: Option<u8>) {
        self.0[joint.index()] = label;
    }

    pub fn positives(&self, joints: &[JointId]) -> usize {
        joints.iter().filter(|&&j| self.get(j) == Some(1)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandImageRecord {
    pub image_path: String,
    pub patient_id: String,
    pub hand_side: HandSide,
    pub capture_week: u32,
    pub mask_path: Option<String>,
    pub image_width: u32,
    pub image_height: u32,
    pub landmarks: Landmarks,
    pub labels: JointLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub joint_exclusions: BTreeSet<JointLevel>,
    pub records: Vec<HandImageRecord>,
    /// Directory that relative record paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    #[serde(default = "default_exclusions")]
    joint_exclusions: Vec<JointLevel>,
}

fn default_exclusions() -> Vec<JointLevel> {
    vec![JointLevel::Dip]
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_path: String,
    patient_id: String,
    hand_side: HandSide,
    capture_week: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<String>,
    image_width: u32,
    image_height: u32,
    landmarks: Vec<(i64, i64, i64)>,
    #[serde(default)]
    labels: Vec<(i64, i64)>,
}

impl DatasetManifest {
    pub fn new(records: Vec<HandImageRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let manifest = DatasetManifest {
            schema_version: SCHEMA_VERSION,
            joint_exclusions: default_exclusions().into_iter().collect(),
            records,
            base_dir: base_dir.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Joints that survive `joint_exclusions`, in canonical order.
    pub fn active_joints(&self) -> Vec<JointId> {
        JointId::all()
            .filter(|j| !self.joint_exclusions.contains(&j.level()))
            .collect()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    /// Positive labels over active joints.
    pub fn positive_count(&self) -> usize {
        let active = self.active_joints();
        self.records.iter().map(|r| r.labels.positives(&active)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                line: 1,
                message: format!("unsupported schema_version {}", self.schema_version),
            });
        }
        if self.active_joints().is_empty() {
            return Err(Error::Config("joint_exclusions leave no active joints".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.patient_id.is_empty() {
                return Err(Error::validation(&r.image_path, "empty patient_id"));
            }
            if !seen.insert(r.image_path.as_str()) {
                return Err(Error::validation(&r.image_path, "duplicate image_path"));
            }
            for (joint, p) in r.landmarks.iter() {
                if p.x >= r.image_width || p.y >= r.image_height {
                    return Err(Error::validation(
                        &r.image_path,
                        format!(
                            "landmark {joint} at ({}, {}) outside {}x{} image",
                            p.x, p.y, r.image_width, r.image_height
                        ),
                    ));
                }
            }
            for joint in JointId::all() {
                if let Some(l) = r.labels.get(joint) {
                    if l > 1 {
                        return Err(Error::validation(
                            &r.image_path,
                            format!("label {l} for {joint} is not 0 or 1"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines.next().ok_or(Error::Schema {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Schema {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(raw.into_record()?);
        }
        let manifest = DatasetManifest {
            schema_version: header.schema_version,
            joint_exclusions: header.joint_exclusions.into_iter().collect(),
            records,
            base_dir: base_dir.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Canonical text form; `parse(to_text(m))` reproduces `m` and
    /// `to_text(parse(t)) == t` for canonical `t`.
    pub fn to_text(&self) -> String {
        let header = Header {
            schema_version: self.schema_version,
            joint_exclusions: self.joint_exclusions.iter().copied().collect(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&RawRecord::from(r)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, base)
}

impl RawRecord {
    fn into_record(self) -> Result<HandImageRecord> {
        let name = self.image_path.clone();
        let mut points: [Option<Landmark>; JOINT_COUNT] = [None; JOINT_COUNT];
        for &(j, x, y) in &self.landmarks {
            let joint = joint_from_raw(&name, j)?;
            if x < 0 || y < 0 || x >= i64::from(self.image_width) || y >= i64::from(self.image_height) {
                return Err(Error::validation(
                    &name,
                    format!(
                        "landmark {joint} at ({x}, {y}) outside {}x{} image",
                        self.image_width, self.image_height
                    ),
                ));
            }
            let slot = &mut points[joint.index()];
            if slot.is_some() {
                return Err(Error::validation(&name, format!("duplicate landmark {joint}")));
            }
            *slot = Some(Landmark {
                x: x as u32,
                y: y as u32,
            });
        }
        let mut landmarks = [Landmark { x: 0, y: 0 }; JOINT_COUNT];
        for joint in JointId::all() {
            landmarks[joint.index()] = points[joint.index()]
                .ok_or_else(|| Error::validation(&name, format!("missing landmark {joint}")))?;
        }
        let mut labels = JointLabels::default();
        for &(j, l) in &self.labels {
            let joint = joint_from_raw(&name, j)?;
            if labels.get(joint).is_some() {
                return Err(Error::validation(&name, format!("duplicate label {joint}")));
            }
            if l != 0 && l != 1 {
                return Err(Error::validation(
                    &name,
                    format!("label {l} for {joint} is not 0 or 1"),
                ));
            }
            labels.set(joint, Some(l as u8));
        }
        Ok(HandImageRecord {
            image_path: self.image_path,
            patient_id: self.patient_id,
            hand_side: self.hand_side,
            capture_week: self.capture_week,
            mask_path: self.mask_path,
            image_width: self.image_width,
            image_height: self.image_height,
            landmarks: Landmarks(landmarks),
            labels,
        })
    }
}

fn joint_from_raw(record: &str, index: i64) -> Result<JointId> {
    usize::try_from(index)
        .ok()
        .and_then(JointId::new)
        .ok_or_else(|| Error::validation(record, format!("joint index {index} out of range")))
}

impl From<&HandImageRecord> for RawRecord {
    fn from(r: &HandImageRecord) -> Self {
        RawRecord {
            image_path: r.image_path.clone(),
            patient_id: r.patient_id.clone(),
            hand_side: r.hand_side,
            capture_week: r.capture_week,
            mask_path: r.mask_path.clone(),
            image_width: r.image_width,
            image_height: r.image_height,
            landmarks: r
                .landmarks
                .iter()
                .map(|(j, p)| (j.index() as i64, i64::from(p.x), i64::from(p.y)))
                .collect(),
            labels: JointId::all()
                .filter_map(|j| r.labels.get(j).map(|l| (j.index() as i64, i64::from(l))))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_line(path: &str, patient: &str, skip_joint: Option<usize>, x0: i64) -> String {
        let landmarks: Vec<String> = (0..14)
            .filter(|&j| Some(j) != skip_joint)
            .map(|j| format!("[{j},{},{}]", x0 + j as i64, 10 + j))
            .collect();
        format!(
            r#"{{"image_path":"{path}","patient_id":"{patient}","hand_side":"left","capture_week":0,"image_width":64,"image_height":64,"landmarks":[{}],"labels":[[0,1],[3,0]]}}"#,
            landmarks.join(",")
        )
    }

    fn manifest_text(lines: &[String]) -> String {
        let mut s = String::from("{\"schema_version\":1,\"joint_exclusions\":[\"DIP\"]}\n");
        for l in lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    #[test]
    fn three_records_round_trip_byte_identical() {
        let text = manifest_text(&[
            record_line("a.png", "p1", None, 1),
            record_line("b.png", "p1", None, 2),
            record_line("c.png", "p2", None, 3),
        ]);
        let m = DatasetManifest::parse(&text, ".").unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.to_text(), text);
        assert_eq!(m.active_joints().len(), 10);
        assert_eq!(m.records[0].labels.get(JointId::new(0).unwrap()), Some(1));
        assert_eq!(m.records[0].labels.get(JointId::new(1).unwrap()), None);
    }

    #[test]
    fn missing_little_dip_landmark_names_record() {
        let text = manifest_text(&[
            record_line("a.png", "p1", None, 1),
            record_line("broken.png", "p1", Some(13), 1),
        ]);
        let err = DatasetManifest::parse(&text, ".").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation { .. }), "{msg}");
        assert!(msg.contains("broken.png") && msg.contains("little-DIP"), "{msg}");
    }

    #[test]
    fn out_of_bounds_landmark_rejected() {
        let text = manifest_text(&[record_line("a.png", "p1", None, 60)]);
        let err = DatasetManifest::parse(&text, ".").unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let text = manifest_text(&[record_line("a.png", "p1", None, 1), "{not json".into()]);
        match DatasetManifest::parse(&text, ".").unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_paths_and_empty_patient_rejected() {
        let text = manifest_text(&[
            record_line("a.png", "p1", None, 1),
            record_line("a.png", "p2", None, 1),
        ]);
        assert!(DatasetManifest::parse(&text, ".").is_err());
        let text = manifest_text(&[record_line("a.png", "", None, 1)]);
        assert!(DatasetManifest::parse(&text, ".").is_err());
    }

    #[test]
    fn non_binary_label_rejected() {
        let line = record_line("a.png", "p1", None, 1).replace("[3,0]", "[3,2]");
        assert!(DatasetManifest::parse(&manifest_text(&[line]), ".").is_err());
    }
}
