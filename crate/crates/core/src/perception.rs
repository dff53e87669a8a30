//! Observation pipeline: simulator state to labeled point cloud, voxel
//! downsampling, and the frozen bottom-half reference.
//!
//! The bottom half of the cloth becomes occluded once the fold starts, so
//! alignment throughout an episode is always measured against the bottom
//! points captured at t = 0 and frozen as a [`BottomReference`].

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::PerceptionError;
use crate::sim::{ClothState, Label};

/// 3D points with a per-point Upper/Bottom tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<Label>,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points carrying the given label, preserving order.
    pub fn points_with(&self, label: Label) -> Vec<Vector3<f64>> {
        self.points
            .iter()
            .zip(self.labels.iter())
            .filter(|(_, l)| **l == label)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Serialize with the cloth-state CSV schema `index,label,x,y,z`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label,x,y,z\n");
        for (i, (p, l)) in self.points.iter().zip(self.labels.iter()).enumerate() {
            out.push_str(&format!("{i},{l},{},{},{}\n", p.x, p.y, p.z));
        }
        out
    }

    /// Parse the `index,label,x,y,z` CSV schema.
    pub fn from_csv(text: &str) -> Result<Self, PerceptionError> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line.trim() != "index,label,x,y,z" {
                    return Err(PerceptionError::Parse {
                        line: 1,
                        message: format!("unexpected header {line:?}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(PerceptionError::Parse {
                    line: lineno + 1,
                    message: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let label = match fields[1].trim() {
                "Upper" => Label::Upper,
                "Bottom" => Label::Bottom,
                other => {
                    return Err(PerceptionError::Parse {
                        line: lineno + 1,
                        message: format!("unknown label {other:?}"),
                    })
                }
            };
            let mut coord = [0.0f64; 3];
            for (k, f) in fields[2..].iter().enumerate() {
                coord[k] = f.trim().parse().map_err(|e| PerceptionError::Parse {
                    line: lineno + 1,
                    message: format!("bad float {f:?}: {e}"),
                })?;
            }
            points.push(Vector3::new(coord[0], coord[1], coord[2]));
            labels.push(label);
        }
        Ok(Self { points, labels })
    }
}

/// One labeled point per cloth particle, in particle-index order.
pub fn extract_point_cloud(state: &ClothState) -> LabeledPointCloud {
    LabeledPointCloud {
        points: state.positions.clone(),
        labels: state.labels.clone(),
    }
}

/// Voxel-downsample per label: at most one output point per (voxel, label),
/// placed at the centroid of that voxel's points of that label. Output order
/// is sorted by (label, voxel key), which makes downsampling deterministic
/// and idempotent.
pub fn voxel_downsample(
    pc: &LabeledPointCloud,
    voxel: f64,
) -> Result<LabeledPointCloud, PerceptionError> {
    if voxel <= 0.0 || !voxel.is_finite() {
        return Err(PerceptionError::InvalidArgument(format!(
            "voxel size must be positive, got {voxel}"
        )));
    }
    let mut cells: BTreeMap<(Label, i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for (p, l) in pc.points.iter().zip(pc.labels.iter()) {
        let key = (
            *l,
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let entry = cells.entry(key).or_insert((Vector3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    let mut points = Vec::with_capacity(cells.len());
    let mut labels = Vec::with_capacity(cells.len());
    for ((label, ..), (sum, count)) in cells {
        points.push(sum / count as f64);
        labels.push(label);
    }
    Ok(LabeledPointCloud { points, labels })
}

/// Immutable snapshot of the Bottom-labeled points at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BottomReference {
    points: Vec<Vector3<f64>>,
}

impl BottomReference {
    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }
}

/// Single-use holder enforcing that the bottom reference is frozen exactly
/// once per episode.
#[derive(Debug, Default)]
pub struct ReferenceSlot {
    frozen: Option<BottomReference>,
}

impl ReferenceSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Freeze the Bottom points of `pc` as the episode's alignment
    /// reference. Fails on a second call or when `pc` has no Bottom points.
    pub fn freeze(&mut self, pc: &LabeledPointCloud) -> Result<&BottomReference, PerceptionError> {
        if self.frozen.is_some() {
            return Err(PerceptionError::AlreadyFrozen);
        }
        let points = pc.points_with(Label::Bottom);
        if points.is_empty() {
            return Err(PerceptionError::EmptyBottom);
        }
        self.frozen = Some(BottomReference { points });
        Ok(self.frozen.as_ref().unwrap())
    }

    pub fn reference(&self) -> Option<&BottomReference> {
        self.frozen.as_ref()
    }
}
