use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Landmarks tied to template vertices, with 2D (image) or 3D (scan) positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LandmarkSet {
    pub points2d: Option<Vec<Vector2<f64>>>,
    pub points3d: Option<Vec<Vector3<f64>>>,
    pub semantic_ids: Vec<u32>,
    pub template_vertex_ids: Vec<u32>,
    /// Landmarks on the face contour; their vertex ids are re-selected during image fitting.
    pub contour: Vec<bool>,
}

/// One record of the landmark JSON array.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LandmarkRecord {
    pub semantic_id: u32,
    pub template_vertex_id: u32,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub contour: bool,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.template_vertex_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.template_vertex_ids.is_empty()
    }

    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        let n = self.len();
        let bad_len = self.semantic_ids.len() != n
            || self.contour.len() != n
            || self.points2d.as_ref().is_some_and(|p| p.len() != n)
            || self.points3d.as_ref().is_some_and(|p| p.len() != n);
        if bad_len {
            return Err(Error::Invalid("landmark lists differ in length".into()));
        }
        if let Some(&v) = self.template_vertex_ids.iter().find(|&&v| v as usize >= vertex_count) {
            return Err(Error::Invalid(format!(
                "landmark vertex {v} outside template with {vertex_count} vertices"
            )));
        }
        Ok(())
    }

    pub fn from_records(records: &[LandmarkRecord]) -> Result<Self> {
        let with_z = records.iter().filter(|r| r.z.is_some()).count();
        if with_z != 0 && with_z != records.len() {
            return Err(Error::Invalid("landmarks mix 2D and 3D records".into()));
        }
        let three_d = with_z > 0;
        Ok(Self {
            points2d: (!three_d).then(|| records.iter().map(|r| Vector2::new(r.x, r.y)).collect()),
            points3d: three_d.then(|| {
                records
                    .iter()
                    .map(|r| Vector3::new(r.x, r.y, r.z.unwrap_or(0.0)))
                    .collect()
            }),
            semantic_ids: records.iter().map(|r| r.semantic_id).collect(),
            template_vertex_ids: records.iter().map(|r| r.template_vertex_id).collect(),
            contour: records.iter().map(|r| r.contour).collect(),
        })
    }

    /// 3D records when `points3d` is present, otherwise 2D.
    pub fn to_records(&self) -> Vec<LandmarkRecord> {
        (0..self.len())
            .map(|k| {
                let (x, y, z) = match (&self.points3d, &self.points2d) {
                    (Some(p), _) => (p[k].x, p[k].y, Some(p[k].z)),
                    (None, Some(p)) => (p[k].x, p[k].y, None),
                    (None, None) => (0.0, 0.0, None),
                };
                LandmarkRecord {
                    semantic_id: self.semantic_ids[k],
                    template_vertex_id: self.template_vertex_ids[k],
                    x,
                    y,
                    z,
                    contour: self.contour[k],
                }
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let records: Vec<LandmarkRecord> = serde_json::from_str(&text)?;
        Self::from_records(&records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_records())?)?;
        Ok(())
    }

    /// Same landmarks with 3D positions replaced.
    pub fn with_points3d(&self, points: Vec<Vector3<f64>>) -> Self {
        Self {
            points2d: None,
            points3d: Some(points),
            ..self.clone()
        }
    }

    pub fn with_points2d(&self, points: Vec<Vector2<f64>>) -> Self {
        Self {
            points2d: Some(points),
            points3d: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_validation() {
        let json = r#"[
            {"semantic_id": 0, "template_vertex_id": 5, "x": 1.0, "y": 2.0, "z": 3.0},
            {"semantic_id": 1, "template_vertex_id": 7, "x": 4.0, "y": 5.0, "z": 6.0, "contour": true}
        ]"#;
        let recs: Vec<LandmarkRecord> = serde_json::from_str(json).unwrap();
        let set = LandmarkSet::from_records(&recs).unwrap();
        assert_eq!(set.points3d.as_ref().unwrap()[1], Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(set.contour, vec![false, true]);
        assert_eq!(set.to_records(), recs);
        assert!(set.validate(8).is_ok());
        assert!(set.validate(6).is_err());
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let json = r#"[{"semantic_id": 0, "template_vertex_id": 0, "x": 1, "y": 2, "z": 3},
                       {"semantic_id": 1, "template_vertex_id": 1, "x": 1, "y": 2}]"#;
        let recs: Vec<LandmarkRecord> = serde_json::from_str(json).unwrap();
        assert!(LandmarkSet::from_records(&recs).is_err());
    }
}
