//! Kinematic tabletop world: spawning, waypoint execution, contact rules and
//! failure injection.

mod predicates;
mod render;
mod templates;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, invert, Pose, Vec3};
use crate::library::{Gripper, ObjectDescriptor};

pub use predicates::{
    all_predicates, describe_scene, ground_truth, Predicate, PredicateKind, Relatum,
    SceneDescription, SceneObjectEntry, CLOSED_THRESHOLD_DEG, OPEN_THRESHOLD_DEG,
};
pub use render::{render_point_cloud, POINTS_PER_OBJECT, TABLE_POINTS};
pub use templates::{
    Body, Bounds2, ObjectSpec, PlanRule, PlanningMode, RegionSpec, SceneTemplate, TemplateRegistry,
};

pub const WORKSPACE_MIN: [f64; 3] = [-0.45, -0.35, 0.0];
pub const WORKSPACE_MAX: [f64; 3] = [0.45, 0.35, 0.60];
pub const GRASP_TOLERANCE: f64 = 0.02;
pub const CONTACT_MARGIN: f64 = 0.02;
/// Maximum ee travel per contact-resolution substep.
pub const SUBSTEP: f64 = 0.005;
/// Depth inside a contact shell below which a substep start still counts as outside.
const SHELL_SLACK: f64 = 1e-9;
pub const TABLE_SUPPORT: i64 = 0;
pub const HELD_SUPPORT: i64 = -1;
pub const SPAWN_ATTEMPTS: usize = 100;
const SPAWN_CLEARANCE: f64 = 0.005;

pub fn home_pose() -> Pose {
    Pose::from_translation(0.0, 0.0, 0.35)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown scene template '{0}'")]
    UnknownTemplate(String),
    #[error("could not place objects of '{template}' without overlap after {attempts} attempts")]
    Placement { template: String, attempts: usize },
    #[error("target {0:?} outside workspace bounds")]
    WorkspaceViolation([f64; 3]),
    #[error("unknown object id {0}")]
    UnknownObject(u32),
    #[error("unknown region '{0}'")]
    UnknownRegion(String),
    #[error("invalid predicate: {0}")]
    InvalidPredicate(String),
    #[error("template registry error: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectFlags {
    pub held: bool,
    pub lid_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimObject {
    pub id: u32,
    pub descriptor: ObjectDescriptor,
    pub pose: Pose,
    pub half_extents: [f64; 3],
    pub body: Body,
    pub flags: ObjectFlags,
    /// Supporting object id, 0 for the table, -1 while held.
    pub support_id: i64,
    #[serde(default)]
    pub distractor: bool,
}

impl SimObject {
    pub fn center(&self) -> Vec3 {
        self.pose.translation()
    }

    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let c = self.center();
        (x - c.x).abs() <= self.half_extents[0] && (y - c.y).abs() <= self.half_extents[1]
    }

    /// Height at which objects resting on this one sit.
    pub fn support_height(&self) -> f64 {
        let c = self.center();
        match self.body {
            Body::Container { floor, .. } => c.z - self.half_extents[2] + floor,
            Body::Solid | Body::Lidded => c.z + self.half_extents[2],
        }
    }

    pub fn grasp_point(&self) -> Vec3 {
        self.center() + Vec3::new(0.0, 0.0, self.half_extents[2])
    }

    pub fn hinge(&self) -> Vec3 {
        self.center() + Vec3::new(-self.half_extents[0], 0.0, self.half_extents[2])
    }

    pub fn lid_length(&self) -> f64 {
        2.0 * self.half_extents[0]
    }

    pub fn handle(&self) -> Vec3 {
        let a = self.flags.lid_angle;
        self.hinge() + self.lid_length() * Vec3::new(a.cos(), 0.0, a.sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldState {
    pub template: String,
    pub objects: BTreeMap<u32, SimObject>,
    pub ee_pose: Pose,
    pub gripper: Gripper,
    pub held_object: Option<u32>,
    /// Pose of the held object in the ee frame.
    pub grasp_offset: Option<Pose>,
    pub regions: BTreeMap<String, Bounds2>,
    pub rng_seed: u64,
}

impl WorldState {
    pub fn object(&self, id: u32) -> Result<&SimObject, SimError> {
        self.objects.get(&id).ok_or(SimError::UnknownObject(id))
    }

    pub fn object_by_name(&self, name: &str) -> Option<&SimObject> {
        self.objects.values().find(|o| o.descriptor.name == name)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.objects.keys().copied().collect()
    }

    /// Ids of objects resting (transitively) on `id`.
    pub fn dependents(&self, id: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let mut frontier = vec![id];
        while let Some(cur) = frontier.pop() {
            for o in self.objects.values() {
                if o.support_id == i64::from(cur) && !out.contains(&o.id) {
                    out.push(o.id);
                    frontier.push(o.id);
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn move_with_dependents(&mut self, id: u32, delta: Vec3) {
        let mut ids = self.dependents(id);
        ids.push(id);
        for i in ids {
            if let Some(o) = self.objects.get_mut(&i) {
                o.pose = o.pose.translated(delta);
            }
        }
    }

    /// Drops `id` onto the topmost surface under its center.
    fn settle(&mut self, id: u32) {
        let Some(obj) = self.objects.get(&id) else { return };
        let c = obj.center();
        let hz = obj.half_extents[2];
        let mut excluded: BTreeSet<u32> = self.dependents(id).into_iter().collect();
        excluded.insert(id);
        let support = self
            .objects
            .values()
            .filter(|o| !excluded.contains(&o.id) && !o.flags.held)
            .filter(|o| o.footprint_contains(c.x, c.y))
            .map(|o| (o.support_height(), o.id))
            .fold(None::<(f64, u32)>, |best, cand| match best {
                Some(b) if b.0 >= cand.0 => Some(b),
                _ => Some(cand),
            });
        let (surface, support_id) = match support {
            Some((h, sid)) => (h, i64::from(sid)),
            None => (0.0, TABLE_SUPPORT),
        };
        let dz = surface + hz - c.z;
        if dz != 0.0 {
            self.move_with_dependents(id, Vec3::new(0.0, 0.0, dz));
        }
        if let Some(o) = self.objects.get_mut(&id) {
            o.support_id = support_id;
        }
    }

    fn try_grasp(&mut self) {
        let ee = self.ee_pose.translation();
        let candidate = self
            .objects
            .values()
            .filter(|o| matches!(o.body, Body::Solid) && !o.flags.held)
            .map(|o| ((o.grasp_point() - ee).norm(), o.id))
            .filter(|(d, _)| *d <= GRASP_TOLERANCE)
            .filter(|(_, id)| self.dependents(*id).is_empty())
            .fold(None::<(f64, u32)>, |best, cand| match best {
                Some(b) if b.0 <= cand.0 => Some(b),
                _ => Some(cand),
            });
        if let Some((_, id)) = candidate {
            let offset = compose(&invert(&self.ee_pose), &self.objects[&id].pose);
            let o = self.objects.get_mut(&id).expect("candidate exists");
            o.flags.held = true;
            o.support_id = HELD_SUPPORT;
            self.held_object = Some(id);
            self.grasp_offset = Some(offset);
        }
    }

    fn release(&mut self) {
        let Some(id) = self.held_object.take() else { return };
        self.grasp_offset = None;
        if let Some(o) = self.objects.get_mut(&id) {
            o.flags.held = false;
            o.pose = Pose::new(o.pose.translation(), UnitQuaternion::identity());
        }
        self.settle(id);
    }

    fn substep(&mut self, from: Vec3, ee: Pose, pushed: &mut BTreeSet<u32>) {
        self.ee_pose = ee;
        let p = ee.translation();
        if let (Some(id), Some(offset)) = (self.held_object, self.grasp_offset) {
            if let Some(o) = self.objects.get_mut(&id) {
                o.pose = compose(&ee, &offset);
            }
        }
        for o in self.objects.values_mut() {
            if o.body != Body::Lidded || o.flags.held {
                continue;
            }
            if (p - o.handle()).norm() <= GRASP_TOLERANCE {
                let h = o.hinge();
                let angle = (p.z - h.z).atan2(p.x - h.x);
                o.flags.lid_angle = angle.clamp(0.0, std::f64::consts::FRAC_PI_2);
            }
        }
        let motion = Vector2::new(p.x - from.x, p.y - from.y);
        let len = motion.norm();
        if len < 1e-12 {
            return;
        }
        let u = motion / len;
        let ids: Vec<u32> = self.objects.keys().copied().collect();
        for id in ids {
            let o = &self.objects[&id];
            if o.flags.held || in_shell(o, &from, SHELL_SLACK) {
                continue;
            }
            if let Some(t) = push_overlap(o, &p, &u) {
                self.move_with_dependents(id, Vec3::new(t * u.x, t * u.y, 0.0));
                pushed.insert(id);
            }
        }
    }
}

/// Whether `p` lies over the contact shell footprint, deeper than `slack`. Pushing
/// needs lateral entry, so an ee that came down into the shell from above never pushes.
fn in_shell(o: &SimObject, p: &Vec3, slack: f64) -> bool {
    let c = o.center();
    let [hx, hy, _] = o.half_extents;
    (p.x - c.x).abs() < hx + CONTACT_MARGIN - slack
        && (p.y - c.y).abs() < hy + CONTACT_MARGIN - slack
}

/// Distance the object must travel along `u` so that `p` leaves its contact shell,
/// or `None` when there is no pushing contact.
fn push_overlap(o: &SimObject, p: &Vec3, u: &Vector2<f64>) -> Option<f64> {
    let c = o.center();
    let [hx, hy, hz] = o.half_extents;
    if p.z < c.z - hz || p.z >= c.z + hz {
        return None;
    }
    let e = [hx + CONTACT_MARGIN, hy + CONTACT_MARGIN];
    let rel = [p.x - c.x, p.y - c.y];
    if rel[0].abs() >= e[0] || rel[1].abs() >= e[1] {
        return None;
    }
    if u.x * -rel[0] + u.y * -rel[1] <= 0.0 {
        return None;
    }
    let ud = [u.x, u.y];
    let mut t_exit = f64::INFINITY;
    for i in 0..2 {
        if ud[i] > 1e-12 {
            t_exit = t_exit.min((rel[i] + e[i]) / ud[i]);
        } else if ud[i] < -1e-12 {
            t_exit = t_exit.min((rel[i] - e[i]) / ud[i]);
        }
    }
    (t_exit.is_finite() && t_exit > 0.0).then_some(t_exit)
}

fn in_workspace(p: &Vec3) -> bool {
    (0..3).all(|i| p[i] >= WORKSPACE_MIN[i] - 1e-12 && p[i] <= WORKSPACE_MAX[i] + 1e-12)
}

pub fn spawn_scene(
    registry: &TemplateRegistry,
    template: &str,
    seed: u64,
) -> Result<WorldState, SimError> {
    let t = registry
        .get(template)
        .ok_or_else(|| SimError::UnknownTemplate(template.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SPAWN_ATTEMPTS {
        let mut placed: Vec<(f64, f64, [f64; 3])> = Vec::with_capacity(t.objects.len());
        let mut ok = true;
        for spec in &t.objects {
            let b = &spec.spawn_region;
            let x = sample_range(&mut rng, b.min[0], b.max[0]);
            let y = sample_range(&mut rng, b.min[1], b.max[1]);
            let h = spec.half_extents;
            let overlaps = placed.iter().any(|(px, py, ph)| {
                (x - px).abs() < h[0] + ph[0] + SPAWN_CLEARANCE
                    && (y - py).abs() < h[1] + ph[1] + SPAWN_CLEARANCE
            });
            if overlaps {
                ok = false;
                break;
            }
            placed.push((x, y, h));
        }
        if !ok {
            continue;
        }
        let mut objects = BTreeMap::new();
        for (i, (spec, (x, y, h))) in t.objects.iter().zip(placed).enumerate() {
            let id = i as u32 + 1;
            let lid_angle = spec.initial_lid_angle().map_err(SimError::Registry)?;
            objects.insert(
                id,
                SimObject {
                    id,
                    descriptor: ObjectDescriptor::new(spec.name.clone(), spec.shape),
                    pose: Pose::from_translation(x, y, h[2]),
                    half_extents: h,
                    body: spec.body,
                    flags: ObjectFlags { held: false, lid_angle },
                    support_id: TABLE_SUPPORT,
                    distractor: spec.is_distractor(),
                },
            );
        }
        let regions = t
            .regions
            .iter()
            .map(|r| (r.name.clone(), Bounds2 { min: r.min, max: r.max }))
            .collect();
        return Ok(WorldState {
            template: t.name.clone(),
            objects,
            ee_pose: home_pose(),
            gripper: Gripper::Open,
            held_object: None,
            grasp_offset: None,
            regions,
            rng_seed: seed,
        });
    }
    Err(SimError::Placement { template: template.to_string(), attempts: SPAWN_ATTEMPTS })
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

/// Moves the end effector to `target` in small substeps, resolving pushes and lid
/// contact along the way, then applies the gripper command at the target.
pub fn apply_waypoint(
    w: &WorldState,
    target: &Pose,
    gripper: Gripper,
) -> Result<WorldState, SimError> {
    let goal = target.translation();
    if !target.is_finite() || !in_workspace(&goal) {
        return Err(SimError::WorkspaceViolation([goal.x, goal.y, goal.z]));
    }
    let mut next = w.clone();
    let start = w.ee_pose;
    let start_t = start.translation();
    let steps = ((goal - start_t).norm() / SUBSTEP).ceil().max(1.0) as usize;
    let mut pushed = BTreeSet::new();
    let mut prev = start_t;
    for i in 1..=steps {
        let s = i as f64 / steps as f64;
        let t = start_t + (goal - start_t) * s;
        let r = start
            .rotation()
            .try_slerp(&target.rotation(), s, 1e-9)
            .unwrap_or_else(|| if s < 0.5 { start.rotation() } else { target.rotation() });
        let pose = if i == steps { *target } else { Pose::new(t, r) };
        next.substep(prev, pose, &mut pushed);
        prev = t;
    }
    for id in pushed {
        let Some(o) = next.objects.get(&id) else { continue };
        if o.support_id > 0 {
            let c = o.center();
            let on_support = next
                .objects
                .get(&(o.support_id as u32))
                .is_some_and(|s| s.footprint_contains(c.x, c.y));
            if !on_support {
                next.settle(id);
            }
        }
    }
    match (w.gripper, gripper) {
        (Gripper::Open, Gripper::Closed) => next.try_grasp(),
        (Gripper::Closed, Gripper::Open) => next.release(),
        _ => {}
    }
    next.gripper = gripper;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub p_perturb: f64,
    pub sigma_t: f64,
}

impl PerturbationConfig {
    pub const NONE: PerturbationConfig = PerturbationConfig { p_perturb: 0.0, sigma_t: 0.0 };

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.p_perturb) && self.sigma_t.is_finite() && self.sigma_t >= 0.0
    }
}

/// A displacement applied to one object, recorded for replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationEvent {
    pub object_id: u32,
    pub delta: [f64; 2],
}

pub fn inject_perturbation<R: Rng + ?Sized>(
    w: &WorldState,
    cfg: &PerturbationConfig,
    rng: &mut R,
) -> WorldState {
    perturb(w, cfg, rng).0
}

/// Like [`inject_perturbation`], also returning the applied event.
pub fn perturb<R: Rng + ?Sized>(
    w: &WorldState,
    cfg: &PerturbationConfig,
    rng: &mut R,
) -> (WorldState, Option<PerturbationEvent>) {
    let roll: f64 = rng.random();
    if roll >= cfg.p_perturb {
        return (w.clone(), None);
    }
    let candidates: Vec<u32> =
        w.objects.values().filter(|o| !o.flags.held).map(|o| o.id).collect();
    if candidates.is_empty() {
        return (w.clone(), None);
    }
    let object_id = candidates[rng.random_range(0..candidates.len())];
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let event = PerturbationEvent { object_id, delta: [cfg.sigma_t * nx, cfg.sigma_t * ny] };
    match apply_perturbation_event(w, &event) {
        Ok(next) => (next, Some(event)),
        Err(_) => (w.clone(), None),
    }
}

/// Displaces the object (and whatever rests on it), clamps it onto the table and re-settles.
pub fn apply_perturbation_event(
    w: &WorldState,
    event: &PerturbationEvent,
) -> Result<WorldState, SimError> {
    let o = w.object(event.object_id)?;
    if event.delta == [0.0, 0.0] || o.flags.held {
        return Ok(w.clone());
    }
    let c = o.center();
    let h = o.half_extents;
    let x = (c.x + event.delta[0])
        .clamp(WORKSPACE_MIN[0] + h[0], WORKSPACE_MAX[0] - h[0]);
    let y = (c.y + event.delta[1])
        .clamp(WORKSPACE_MIN[1] + h[1], WORKSPACE_MAX[1] - h[1]);
    let mut next = w.clone();
    next.move_with_dependents(event.object_id, Vec3::new(x - c.x, y - c.y, 0.0));
    next.settle(event.object_id);
    Ok(next)
}
