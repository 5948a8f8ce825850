use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};

use crate::geometry::{PointCloud, Pose, Vec3};

/// Minimum ratio of principal variances for the in-plane axis to count as observable.
pub const ANISOTROPY_RATIO: f64 = 2.0;
/// Minimum normalized third moment along the principal axis to fix its sign.
pub const SKEW_THRESHOLD: f64 = 0.3;

fn wrap(angle: f64) -> f64 {
    let a = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Object frame from the foreground points: centroid plus in-plane principal axis.
/// Yaw is zero when the footprint is too isotropic to define an axis.
pub fn estimate_object_frame(cloud: &PointCloud) -> Option<Pose> {
    let pts: Vec<Vec3> = cloud.foreground().map(|p| p.position).collect();
    frame_of_points(&pts)
}

pub fn frame_of_points(pts: &[Vec3]) -> Option<Pose> {
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / n, syy / n, sxy / n);
    let mean = 0.5 * (sxx + syy);
    let spread = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let (l1, l2) = (mean + spread, mean - spread);
    let yaw = if l2 > 1e-15 && l1 / l2 > ANISOTROPY_RATIO {
        let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        let (ux, uy) = (phi.cos(), phi.sin());
        let third: f64 = pts.iter().map(|p| ((p.x - c.x) * ux + (p.y - c.y) * uy).powi(3)).sum::<f64>() / n;
        let skew = third / l1.powf(1.5);
        if skew.abs() >= SKEW_THRESHOLD {
            if skew < 0.0 {
                wrap(phi + PI)
            } else {
                wrap(phi)
            }
        } else {
            let (a, b) = (wrap(phi), wrap(phi + PI));
            if a.abs() <= b.abs() {
                a
            } else {
                b
            }
        }
    } else {
        0.0
    };
    Some(Pose::new(c, UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)))
}
