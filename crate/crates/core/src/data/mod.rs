//! Dataset schema, manifest I/O and patient-disjoint fold planning.

mod folds;
mod joints;
mod manifest;

pub use folds::{make_folds, FoldPlan};
pub use joints::{Finger, JointId, JointLevel, JOINT_COUNT};
pub use manifest::{
    load_manifest, DatasetManifest, HandImageRecord, HandSide, JointLabels, Landmark, Landmarks,
    SCHEMA_VERSION,
};

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn record(path: String, patient: String, positives: &[usize]) -> HandImageRecord {
        let mut labels = JointLabels::default();
        for j in JointId::all() {
            labels.set(j, Some(u8::from(positives.contains(&j.index()))));
        }
        let mut points = [Landmark { x: 0, y: 0 }; JOINT_COUNT];
        for (i, p) in points.iter_mut().enumerate() {
            *p = Landmark {
                x: 8 + 3 * i as u32,
                y: 20 + 2 * i as u32,
            };
        }
        HandImageRecord {
            image_path: path,
            patient_id: patient,
            hand_side: HandSide::Right,
            capture_week: 0,
            mask_path: None,
            image_width: 64,
            image_height: 64,
            landmarks: Landmarks::new(points),
            labels,
        }
    }

    pub fn manifest_with_patients(n_patients: usize, per_patient: usize) -> DatasetManifest {
        let records = (0..n_patients)
            .flat_map(|p| {
                (0..per_patient).map(move |i| {
                    let positives: Vec<usize> = if (p + i) % 3 == 0 { vec![p % 10] } else { vec![] };
                    record(format!("p{p:03}_{i}.png"), format!("p{p:03}"), &positives)
                })
            })
            .collect();
        DatasetManifest::new(records, ".").unwrap()
    }
}
