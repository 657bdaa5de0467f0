use serde::{Deserialize, Serialize};

use crate::linalg::{Rigid, Vec3};
use crate::scalar::Real;

/// One annotated object instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GtObject<T> {
    pub class_id: u32,
    pub pose: Rigid<T>,
    /// Model centroid in the world frame.
    pub centroid: Vec3<T>,
    /// Canonical model points transformed into the world frame.
    pub cloud: Vec<Vec3<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGroundTruth<T> {
    pub objects: Vec<GtObject<T>>,
}

impl<T: Real> SceneGroundTruth<T> {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn centroids(&self) -> Vec<Vec3<T>> {
        self.objects.iter().map(|o| o.centroid).collect()
    }

    /// All world-frame model points with their object index.
    pub fn labeled_points(&self) -> (Vec<Vec3<T>>, Vec<usize>) {
        let mut pts = Vec::new();
        let mut owner = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            pts.extend_from_slice(&o.cloud);
            owner.extend(std::iter::repeat_n(i, o.cloud.len()));
        }
        (pts, owner)
    }
}

/// Serializable pose record used by `gt.json` and the pose outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub class_id: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn new(class_id: u32, pose: &Rigid<f64>) -> Self {
        Self { class_id, rotation: pose.rotation.to_row_major(), translation: pose.translation.to_array() }
    }

    pub fn pose(&self) -> Rigid<f64> {
        Rigid::new(crate::linalg::Mat3::from_row_major(&self.rotation), Vec3::from_array(self.translation))
    }
}
