use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::{CloudPoint, PointCloud, Vec3, BACKGROUND_LABEL};
use crate::library::ShapeClass;

use super::{Body, SimError, SimObject, WorldState, WORKSPACE_MAX, WORKSPACE_MIN};

pub const POINTS_PER_OBJECT: usize = 256;
pub const TABLE_POINTS: usize = 64;
const LID_POINTS: usize = 56;

/// Seed for an object's surface pattern. Depends only on its geometry so the same
/// object renders identically in any scene.
fn pattern_seed(o: &SimObject) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for b in o.descriptor.shape.as_str().bytes() {
        mix(u64::from(b));
    }
    for e in o.half_extents {
        mix(e.to_bits());
    }
    mix(match o.body {
        Body::Solid => 1,
        Body::Container { .. } => 2,
        Body::Lidded => 3,
    });
    h
}

fn box_surface(rng: &mut ChaCha8Rng, h: [f64; 3], skip_top: bool, n: usize) -> Vec<Vec3> {
    let faces: Vec<(usize, f64, f64)> = (0..3)
        .flat_map(|axis| [(axis, -1.0), (axis, 1.0)])
        .filter(|&(axis, sign)| !(skip_top && axis == 2 && sign > 0.0))
        .map(|(axis, sign)| {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            (axis, sign, 4.0 * h[a] * h[b])
        })
        .collect();
    let total: f64 = faces.iter().map(|f| f.2).sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = faces[faces.len() - 1];
            for f in &faces {
                if pick < f.2 {
                    face = *f;
                    break;
                }
                pick -= f.2;
            }
            let (axis, sign, _) = face;
            let mut p = [0.0; 3];
            p[axis] = sign * h[axis];
            for other in [(axis + 1) % 3, (axis + 2) % 3] {
                p[other] = (2.0 * rng.random::<f64>() - 1.0) * h[other];
            }
            Vec3::new(p[0], p[1], p[2])
        })
        .collect()
}

fn ellipsoid_surface(rng: &mut ChaCha8Rng, h: [f64; 3], n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let v = loop {
                let v = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                if v.norm() > 1e-9 {
                    break v.normalize();
                }
            };
            Vec3::new(v.x * h[0], v.y * h[1], v.z * h[2])
        })
        .collect()
}

fn cylinder_surface(rng: &mut ChaCha8Rng, h: [f64; 3], n: usize) -> Vec<Vec3> {
    let r = 0.5 * (h[0] + h[1]);
    let side = TAU * r * 2.0 * h[2];
    let caps = 2.0 * std::f64::consts::PI * r * r;
    (0..n)
        .map(|_| {
            let a = rng.random::<f64>() * TAU;
            if rng.random::<f64>() * (side + caps) < side {
                let z = (2.0 * rng.random::<f64>() - 1.0) * h[2];
                Vec3::new(h[0] * a.cos(), h[1] * a.sin(), z)
            } else {
                let s = rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { h[2] } else { -h[2] };
                Vec3::new(s * h[0] * a.cos(), s * h[1] * a.sin(), z)
            }
        })
        .collect()
}

fn cone_surface(rng: &mut ChaCha8Rng, h: [f64; 3], n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let a = rng.random::<f64>() * TAU;
            if rng.random::<f64>() < 0.75 {
                // Radius shrinks linearly from base to apex; sqrt keeps the density uniform.
                let s = rng.random::<f64>().sqrt();
                let z = h[2] - 2.0 * h[2] * s;
                Vec3::new(s * h[0] * a.cos(), s * h[1] * a.sin(), z)
            } else {
                let s = rng.random::<f64>().sqrt();
                Vec3::new(s * h[0] * a.cos(), s * h[1] * a.sin(), -h[2])
            }
        })
        .collect()
}

/// Object-frame surface samples for the object's current articulation.
fn local_samples(o: &SimObject) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed(o));
    let h = o.half_extents;
    match o.body {
        Body::Container { .. } => box_surface(&mut rng, h, true, POINTS_PER_OBJECT),
        Body::Lidded => {
            let mut pts = box_surface(&mut rng, h, true, POINTS_PER_OBJECT - LID_POINTS);
            let hinge = Vec3::new(-h[0], 0.0, h[2]);
            let a = o.flags.lid_angle;
            let dir = Vec3::new(a.cos(), 0.0, a.sin());
            let len = 2.0 * h[0];
            for _ in 0..LID_POINTS {
                let u = rng.random::<f64>() * len;
                let v = (2.0 * rng.random::<f64>() - 1.0) * h[1];
                pts.push(hinge + dir * u + Vec3::new(0.0, v, 0.0));
            }
            pts
        }
        Body::Solid => match o.descriptor.shape {
            ShapeClass::Oval => ellipsoid_surface(&mut rng, h, POINTS_PER_OBJECT),
            ShapeClass::Cylindrical => cylinder_surface(&mut rng, h, POINTS_PER_OBJECT),
            ShapeClass::Conical => cone_surface(&mut rng, h, POINTS_PER_OBJECT),
            ShapeClass::Cuboid | ShapeClass::Flat | ShapeClass::Articulated => {
                box_surface(&mut rng, h, false, POINTS_PER_OBJECT)
            }
        },
    }
}

fn table_points() -> impl Iterator<Item = CloudPoint> {
    let side = (TABLE_POINTS as f64).sqrt() as usize;
    (0..TABLE_POINTS).map(move |i| {
        let (ix, iy) = (i % side, i / side);
        let fx = (ix as f64 + 0.5) / side as f64;
        let fy = (iy as f64 + 0.5) / side as f64;
        CloudPoint {
            position: Vec3::new(
                WORKSPACE_MIN[0] + fx * (WORKSPACE_MAX[0] - WORKSPACE_MIN[0]),
                WORKSPACE_MIN[1] + fy * (WORKSPACE_MAX[1] - WORKSPACE_MIN[1]),
                0.0,
            ),
            label: BACKGROUND_LABEL,
        }
    })
}

/// Segmented cloud of the table plane plus every object, or only the masked objects.
pub fn render_point_cloud(
    w: &WorldState,
    mask: Option<&BTreeSet<u32>>,
) -> Result<PointCloud, SimError> {
    if let Some(m) = mask {
        if let Some(bad) = m.iter().find(|id| !w.objects.contains_key(id)) {
            return Err(SimError::UnknownObject(*bad));
        }
    }
    let mut points: Vec<CloudPoint> = table_points().collect();
    for o in w.objects.values() {
        if mask.is_some_and(|m| !m.contains(&o.id)) {
            continue;
        }
        points.extend(local_samples(o).into_iter().map(|p| CloudPoint {
            position: o.pose.transform_point(&p),
            label: o.id,
        }));
    }
    Ok(PointCloud::new(points))
}

#[cfg(test)]
mod tests {
    use super::super::{spawn_scene, TemplateRegistry};
    use super::*;

    #[test]
    fn mask_restricts_labels() {
        let w = spawn_scene(&TemplateRegistry::builtin(), "pick_distractors", 3).unwrap();
        let lemon = w.object_by_name("lemon").unwrap().id;
        let mask = BTreeSet::from([lemon]);
        let cloud = render_point_cloud(&w, Some(&mask)).unwrap();
        assert!(cloud.labels().iter().all(|l| *l == 0 || *l == lemon));
        assert_eq!(cloud.len(), TABLE_POINTS + POINTS_PER_OBJECT);
    }

    #[test]
    fn unmasked_contains_all_ids_and_is_deterministic() {
        let w = spawn_scene(&TemplateRegistry::builtin(), "push_stack_distractors", 5).unwrap();
        let a = render_point_cloud(&w, None).unwrap();
        let labels: BTreeSet<u32> = a.labels().into_iter().collect();
        for id in w.objects.keys() {
            assert!(labels.contains(id));
        }
        assert_eq!(a, render_point_cloud(&w, None).unwrap());
    }

    #[test]
    fn unknown_mask_id_errors() {
        let w = spawn_scene(&TemplateRegistry::builtin(), "push_block", 0).unwrap();
        let mask = BTreeSet::from([42]);
        assert!(matches!(render_point_cloud(&w, Some(&mask)), Err(SimError::UnknownObject(42))));
    }

    #[test]
    fn same_object_renders_identically_across_scenes() {
        let reg = TemplateRegistry::builtin();
        let a = spawn_scene(&reg, "push_block", 1).unwrap();
        let b = spawn_scene(&reg, "push_block_distractors", 1).unwrap();
        let ida = a.object_by_name("yellow_block").unwrap().id;
        let idb = b.object_by_name("yellow_block").unwrap().id;
        let ca = render_point_cloud(&a, Some(&BTreeSet::from([ida]))).unwrap();
        let cb = render_point_cloud(&b, Some(&BTreeSet::from([idb]))).unwrap();
        assert_eq!(ca, cb);
    }
}
