//! Scan, label and score files in the SemanticKITTI binary layout, plus the
//! synthetic scene generator used for desk-scale experiments.

mod files;
mod synth;

pub use files::{
    read_labeled_scan, read_labels, read_scan, read_scores, write_labels, write_scan, write_scores,
};
pub use synth::{generate_scene, ObjectRecipe, SceneConfig, Shape};

/// Semantic class id: the lower 16 bits of a stored label value.
pub type ClassId = u16;

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// One scan, points kept in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Raw little-endian encoding, 16 bytes per point.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Per-point semantic class ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelArray {
    pub labels: Vec<ClassId>,
}

impl LabelArray {
    pub fn new(labels: Vec<ClassId>) -> Self {
        LabelArray { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stored encoding: one u32 per point with the instance half zeroed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * 4);
        for &l in &self.labels {
            out.extend_from_slice(&u32::from(l).to_le_bytes());
        }
        out
    }

    /// Fails when the label count differs from the scan's point count.
    pub fn check_paired(&self, cloud: &PointCloud) -> crate::Result<()> {
        if self.len() != cloud.len() {
            return Err(crate::Error::Consistency(format!(
                "label file has {} entries but scan has {} points",
                self.len(),
                cloud.len()
            )));
        }
        Ok(())
    }
}
