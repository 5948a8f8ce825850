//! Rigid-body primitives shared by the simulator, the policy and the library.
//!
//! Rotations are stored as unit quaternions canonicalized to `w >= 0`, so two
//! poses describing the same transform compare equal. Lengths are meters and
//! angles radians everywhere.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Vec3 = Vector3<f64>;

/// A rigid transform: rotate, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    translation: Vec3,
    rotation: UnitQuaternion<f64>,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = q.into_inner();
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vec3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(translation: Vec3, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation,
            rotation: canonical(rotation),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vec3::new(x, y, z), UnitQuaternion::identity())
    }

    /// Pure rotation about the world z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        Self::new(Vec3::zeros(), UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw))
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, normalizing it.
    /// Returns `None` for non-finite input or a zero quaternion.
    pub fn from_parts(t: [f64; 3], q: [f64; 4]) -> Option<Self> {
        if t.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        if raw.norm() < 1e-12 {
            return None;
        }
        Some(Self::new(Vec3::from(t), UnitQuaternion::new_normalize(raw)))
    }

    /// Pose from translation plus rotation vector (axis times angle).
    pub fn from_rotation_vector(translation: Vec3, rotvec: Vec3) -> Self {
        Self::new(translation, UnitQuaternion::from_scaled_axis(rotvec))
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    /// Quaternion as `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Rotation vector with magnitude in `[0, pi]`.
    pub fn rotation_vector(&self) -> Vec3 {
        self.rotation.scaled_axis()
    }

    pub fn with_translation(&self, translation: Vec3) -> Self {
        Self {
            translation,
            rotation: self.rotation,
        }
    }

    pub fn translated(&self, delta: Vec3) -> Self {
        self.with_translation(self.translation + delta)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.quaternion_wxyz().iter().all(|v| v.is_finite())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// `a ∘ b`: apply `b`, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(a.rotation * b.translation + a.translation, a.rotation * b.rotation)
}

pub fn invert(p: &Pose) -> Pose {
    let inv = p.rotation.inverse();
    Pose::new(-(inv * p.translation), inv)
}

/// Euclidean translation error and geodesic rotation angle in `[0, pi]`.
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    let dt = (a.translation - b.translation).norm();
    // atan2 form stays accurate near zero; |w| handles the double cover.
    let d = (a.rotation.inverse() * b.rotation).into_inner();
    (dt, 2.0 * d.imag().norm().atan2(d.w.abs()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    t: [f64; 3],
    q: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord {
            t: self.translation.into(),
            q: self.quaternion_wxyz(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        let pose = Pose::from_parts(rec.t, rec.q)
            .ok_or_else(|| serde::de::Error::custom("pose must be finite with a non-zero quaternion"))?;
        // Stored quaternions are already canonical; keep the exact bits so that
        // save/load is byte-stable.
        let q = Quaternion::new(rec.q[0], rec.q[1], rec.q[2], rec.q[3]);
        if (q.norm() - 1.0).abs() <= 1e-9 && rec.q[0] >= 0.0 {
            return Ok(Pose {
                translation: Vec3::from(rec.t),
                rotation: UnitQuaternion::new_unchecked(q),
            });
        }
        Ok(pose)
    }
}

/// One labelled surface sample. Label 0 is the table/background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vec3,
    pub label: u32,
}

pub const BACKGROUND_LABEL: u32 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<CloudPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.position.iter().all(|v| v.is_finite()))
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self.points.iter().map(|p| p.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Distinct non-background labels in ascending order.
    pub fn foreground_labels(&self) -> Vec<u32> {
        self.labels().into_iter().filter(|l| *l != BACKGROUND_LABEL).collect()
    }

    pub fn foreground(&self) -> impl Iterator<Item = &CloudPoint> {
        self.points.iter().filter(|p| p.label != BACKGROUND_LABEL)
    }

    /// Keeps every `stride`-th point so that at most `budget` points remain.
    pub fn downsampled(&self, budget: usize) -> PointCloud {
        if self.points.len() <= budget || budget == 0 {
            return self.clone();
        }
        let stride = self.points.len().div_ceil(budget);
        PointCloud::new(self.points.iter().step_by(stride).copied().collect())
    }
}

impl Serialize for PointCloud {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(self.points.len()))?;
        for p in &self.points {
            seq.serialize_element(&(p.position.x, p.position.y, p.position.z, p.label))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for PointCloud {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw: Vec<(f64, f64, f64, u32)> = Vec::deserialize(d)?;
        let cloud = PointCloud::new(
            raw.into_iter()
                .map(|(x, y, z, label)| CloudPoint {
                    position: Vec3::new(x, y, z),
                    label,
                })
                .collect(),
        );
        if !cloud.is_finite() {
            return Err(serde::de::Error::custom("point cloud has non-finite coordinates"));
        }
        Ok(cloud)
    }
}

pub fn transform_points(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| CloudPoint {
                position: pose.transform_point(&p.position),
                label: p.label,
            })
            .collect(),
    )
}
