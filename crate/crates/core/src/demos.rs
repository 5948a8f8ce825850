//! Scripted seed demonstrations recorded by driving the simulator through
//! per-skill waypoint scripts.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::library::{
    AffordanceLibrary, Demonstration, DemonstrationStep, Gripper, LibraryError, Provenance, SkillVerb,
    STORED_CLOUD_BUDGET,
};
use crate::sim::{apply_waypoint, home_pose, render_point_cloud, spawn_scene, SimError, TemplateRegistry, WorldState};

/// Height for free-space moves between objects.
pub const TRANSIT_Z: f64 = 0.15;
/// Transit height around lidded bodies.
pub const BOX_TRANSIT_Z: f64 = 0.30;
/// Spacing of recorded steps along straight segments.
pub const STEP_SPACING: f64 = 0.05;
const ARC_STEP_DEG: f64 = 5.0;
const PUSH_STANDOFF: f64 = 0.055;
const PUSH_TRAVEL: f64 = 0.11;
const LID_CLEARANCE: f64 = 0.005;
const LID_RETREAT: f64 = 0.06;
const RELEASE_CLEARANCE: f64 = 0.005;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("script for {verb} {subject} could not be completed: {reason}")]
    Script { verb: SkillVerb, subject: String, reason: String },
    #[error("no script covers template '{0}'")]
    NoScript(String),
    #[error("per-verb count must be at least 1")]
    ZeroCount,
}

/// Which object the recorded clouds show.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attention {
    Subject,
    Destination,
}

#[derive(Debug, Clone, Copy)]
struct Waypoint {
    target: Vec3,
    gripper: Gripper,
    attention: Attention,
}

/// One scripted skill in one scene template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillScript {
    pub verb: SkillVerb,
    pub template: &'static str,
    pub subject: &'static str,
    pub destination: Option<&'static str>,
}

const fn script(
    verb: SkillVerb,
    template: &'static str,
    subject: &'static str,
    destination: Option<&'static str>,
) -> SkillScript {
    SkillScript { verb, template, subject, destination }
}

/// Scripts recorded by default, in recording order.
pub const SCRIPTS: [SkillScript; 14] = [
    script(SkillVerb::Pick, "pick_ball", "grip_ball", None),
    script(SkillVerb::Place, "pick_ball", "grip_ball", None),
    script(SkillVerb::PushIn, "push_block", "yellow_block", Some("white_area")),
    script(SkillVerb::PushOut, "push_block", "yellow_block", Some("white_area")),
    script(SkillVerb::Stack, "stack_block", "red_block", Some("yellow_block")),
    script(SkillVerb::Stack, "large_container_cup", "cup", Some("tray")),
    script(SkillVerb::Stack, "large_container_laptop", "laptop", Some("tray")),
    script(SkillVerb::Unstack, "stack_block", "red_block", Some("yellow_block")),
    script(SkillVerb::Unstack, "large_container_cup", "cup", Some("tray")),
    script(SkillVerb::Unstack, "large_container_laptop", "laptop", Some("tray")),
    script(SkillVerb::Open, "open_box", "box", None),
    script(SkillVerb::Close, "close_box", "box", None),
    script(SkillVerb::Open, "close_then_open_box", "box", None),
    script(SkillVerb::Close, "close_then_open_box", "box", None),
];

/// Release offset of a subject inside or on its stacking destination, in the
/// destination frame.
fn stack_offset(subject: &str) -> [f64; 2] {
    match subject {
        "cup" => [0.07, 0.0],
        "laptop" => [-0.045, 0.0],
        _ => [0.0, 0.0],
    }
}

/// Displacement from the stacked pose back onto the table.
fn unstack_offset(subject: &str) -> [f64; 2] {
    match subject {
        "cup" => [-0.30, 0.09],
        "laptop" => [-0.325, -0.14],
        _ => [-0.15, 0.0],
    }
}

struct Recorder {
    world: WorldState,
    subject: u32,
    destination: Option<u32>,
    steps: Vec<DemonstrationStep>,
    recording: bool,
}

impl Recorder {
    fn mask(&self, attention: Attention) -> BTreeSet<u32> {
        match (attention, self.destination) {
            (Attention::Destination, Some(d)) => BTreeSet::from([d]),
            _ => BTreeSet::from([self.subject]),
        }
    }

    fn record(&mut self, attention: Attention) -> Result<(), SimError> {
        if self.recording {
            let cloud = render_point_cloud(&self.world, Some(&self.mask(attention)))?.downsampled(STORED_CLOUD_BUDGET);
            self.steps.push(DemonstrationStep { cloud, ee_pose: self.world.ee_pose, gripper: self.world.gripper });
        }
        Ok(())
    }

    fn start(&mut self) -> Result<(), SimError> {
        self.recording = true;
        self.record(Attention::Subject)
    }

    /// Straight move split into steps no longer than [`STEP_SPACING`].
    fn go(&mut self, wp: Waypoint) -> Result<(), SimError> {
        let from = self.world.ee_pose.translation();
        let n = ((wp.target - from).norm() / STEP_SPACING).ceil().max(1.0) as usize;
        let gripper_before = self.world.gripper;
        for i in 1..=n {
            let p = from + (wp.target - from) * (i as f64 / n as f64);
            let g = if i == n { wp.gripper } else { gripper_before };
            self.world = apply_waypoint(&self.world, &Pose::from_translation(p.x, p.y, p.z), g)?;
            self.record(wp.attention)?;
        }
        Ok(())
    }

    fn go_all(&mut self, wps: &[Waypoint]) -> Result<(), SimError> {
        wps.iter().try_for_each(|w| self.go(*w))
    }

    fn object_center(&self, id: u32) -> Vec3 {
        self.world.objects[&id].center()
    }
}

fn wp(target: Vec3, gripper: Gripper, attention: Attention) -> Waypoint {
    Waypoint { target, gripper, attention }
}

fn at(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z)
}

fn pick_waypoints(r: &Recorder) -> Vec<Waypoint> {
    let g = r.world.objects[&r.subject].grasp_point();
    let s = Attention::Subject;
    vec![
        wp(at(g.x, g.y, TRANSIT_Z), Gripper::Open, s),
        wp(g, Gripper::Open, s),
        wp(g, Gripper::Closed, s),
        wp(at(g.x, g.y, TRANSIT_Z), Gripper::Closed, s),
    ]
}

fn release_z(r: &Recorder, surface: f64) -> f64 {
    surface + 2.0 * r.world.objects[&r.subject].half_extents[2] + RELEASE_CLEARANCE
}

fn place_waypoints(r: &Recorder) -> Vec<Waypoint> {
    let p = r.world.ee_pose.translation();
    let s = Attention::Subject;
    let z = release_z(r, 0.0);
    vec![
        wp(at(p.x, p.y, z), Gripper::Closed, s),
        wp(at(p.x, p.y, z), Gripper::Open, s),
        wp(at(p.x, p.y, TRANSIT_Z), Gripper::Open, s),
    ]
}

fn push_waypoints(r: &Recorder, sign: f64) -> Vec<Waypoint> {
    let c = r.object_center(r.subject);
    let s = Attention::Subject;
    let y0 = c.y - sign * PUSH_STANDOFF;
    let y1 = y0 + sign * PUSH_TRAVEL;
    vec![
        wp(at(c.x, y0, TRANSIT_Z), Gripper::Open, s),
        wp(at(c.x, y0, 0.02), Gripper::Open, s),
        wp(at(c.x, y1, 0.02), Gripper::Open, s),
        wp(at(c.x, y1, TRANSIT_Z), Gripper::Open, s),
    ]
}

fn stack_place_waypoints(r: &Recorder, subject: &str) -> Vec<Waypoint> {
    let d = r.destination.expect("stack has a destination");
    let dest = &r.world.objects[&d];
    let off = stack_offset(subject);
    let c = dest.center();
    let (x, y) = (c.x + off[0], c.y + off[1]);
    let z = release_z(r, dest.support_height());
    let a = Attention::Destination;
    vec![
        wp(at(x, y, TRANSIT_Z), Gripper::Closed, a),
        wp(at(x, y, z), Gripper::Closed, a),
        wp(at(x, y, z), Gripper::Open, a),
        wp(at(x, y, TRANSIT_Z), Gripper::Open, a),
    ]
}

fn unstack_waypoints(r: &Recorder, subject: &str) -> Vec<Waypoint> {
    let mut out = pick_waypoints(r);
    let g = r.world.objects[&r.subject].grasp_point();
    let off = unstack_offset(subject);
    let (x, y) = (g.x + off[0], g.y + off[1]);
    let z = release_z(r, 0.0);
    let s = Attention::Subject;
    out.extend([
        wp(at(x, y, TRANSIT_Z), Gripper::Closed, s),
        wp(at(x, y, z), Gripper::Closed, s),
        wp(at(x, y, z), Gripper::Open, s),
        wp(at(x, y, TRANSIT_Z), Gripper::Open, s),
    ]);
    out
}

fn lid_point(r: &Recorder, deg: f64, radius_extra: f64) -> Vec3 {
    let o = &r.world.objects[&r.subject];
    let a = deg.to_radians();
    o.hinge() + (o.lid_length() + radius_extra) * Vec3::new(a.cos(), 0.0, a.sin()) + Vec3::new(0.0, 0.0, LID_CLEARANCE)
}

fn lid_sweep(r: &mut Recorder, from_deg: f64, to_deg: f64) -> Result<(), SimError> {
    let s = Attention::Subject;
    let approach = lid_point(r, from_deg, LID_RETREAT);
    r.go_all(&[
        wp(at(approach.x, approach.y, BOX_TRANSIT_Z), Gripper::Open, s),
        wp(approach, Gripper::Open, s),
    ])?;
    let n = ((to_deg - from_deg).abs() / ARC_STEP_DEG).round() as usize;
    // The hinge is fixed, so the arc is laid out before the lid starts moving.
    let arc: Vec<Vec3> = (0..=n)
        .map(|i| lid_point(r, from_deg + (to_deg - from_deg) * i as f64 / n as f64, 0.0))
        .collect();
    for p in arc {
        r.world = apply_waypoint(&r.world, &Pose::from_translation(p.x, p.y, p.z), Gripper::Open)?;
        r.record(s)?;
    }
    let out = lid_point(r, to_deg, LID_RETREAT);
    r.go_all(&[wp(out, Gripper::Open, s), wp(out + Vec3::new(0.0, 0.0, 0.05), Gripper::Open, s)])
}

fn subject_angle_deg(r: &Recorder) -> f64 {
    r.world.objects[&r.subject].flags.lid_angle.to_degrees()
}

/// Closes or opens the lid without recording, leaving the ee at home.
fn set_lid(r: &mut Recorder, open: bool) -> Result<(), SimError> {
    let cur = subject_angle_deg(r);
    let target = if open { 85.0 } else { 0.0 };
    if (open && cur > 60.0) || (!open && cur < 10.0) {
        return Ok(());
    }
    lid_sweep(r, cur, target)?;
    r.go(wp(home_pose().translation(), Gripper::Open, Attention::Subject))
}

/// Runs `script` in a fresh scene spawned from `seed` and returns the recorded demonstration.
pub fn record_demo(
    registry: &TemplateRegistry,
    script: &SkillScript,
    seed: u64,
    id: String,
) -> Result<Demonstration, DemoError> {
    run_script(registry, script, seed, id).map(|(d, _)| d)
}

fn run_script(
    registry: &TemplateRegistry,
    script: &SkillScript,
    seed: u64,
    id: String,
) -> Result<(Demonstration, WorldState), DemoError> {
    let world = spawn_scene(registry, script.template, seed)?;
    let fail = |reason: &str| DemoError::Script {
        verb: script.verb,
        subject: script.subject.to_string(),
        reason: reason.to_string(),
    };
    let subject = world.object_by_name(script.subject).ok_or_else(|| fail("subject missing"))?;
    let descriptor = subject.descriptor.clone();
    let subject = subject.id;
    let destination = script.destination.and_then(|d| world.object_by_name(d)).map(|o| o.id);
    let mut r = Recorder { world, subject, destination, steps: Vec::new(), recording: false };
    let home = home_pose().translation();
    let s = Attention::Subject;
    match script.verb {
        SkillVerb::Pick => {
            r.start()?;
            let w = pick_waypoints(&r);
            r.go_all(&w)?;
        }
        SkillVerb::Place => {
            let w = pick_waypoints(&r);
            r.go_all(&w)?;
            r.start()?;
            let w = place_waypoints(&r);
            r.go_all(&w)?;
        }
        SkillVerb::PushIn | SkillVerb::PushOut => {
            if script.verb == SkillVerb::PushOut {
                let w = push_waypoints(&r, 1.0);
                r.go_all(&w)?;
                r.go(wp(home, Gripper::Open, s))?;
            }
            r.start()?;
            let sign = if script.verb == SkillVerb::PushIn { 1.0 } else { -1.0 };
            let w = push_waypoints(&r, sign);
            r.go_all(&w)?;
        }
        SkillVerb::Stack | SkillVerb::Unstack => {
            if destination.is_none() {
                return Err(fail("destination missing"));
            }
            if script.verb == SkillVerb::Unstack {
                let mut w = pick_waypoints(&r);
                r.go_all(&w)?;
                w = stack_place_waypoints(&r, script.subject);
                r.go_all(&w)?;
                r.go(wp(home, Gripper::Open, s))?;
                r.start()?;
                let w = unstack_waypoints(&r, script.subject);
                r.go_all(&w)?;
            } else {
                r.start()?;
                let w = pick_waypoints(&r);
                r.go_all(&w)?;
                let w = stack_place_waypoints(&r, script.subject);
                r.go_all(&w)?;
            }
        }
        SkillVerb::Open | SkillVerb::Close => {
            let open = script.verb == SkillVerb::Open;
            set_lid(&mut r, !open)?;
            r.start()?;
            let from = subject_angle_deg(&r).round();
            lid_sweep(&mut r, from, if open { 85.0 } else { 0.0 })?;
        }
        SkillVerb::Fold | SkillVerb::Unfold => return Err(fail("no script for deformable skills")),
    }
    let mut object_ids = vec![subject];
    object_ids.extend(destination);
    let demo = Demonstration {
        id,
        skill_verb: script.verb,
        target: descriptor,
        object_ids,
        steps: r.steps,
        provenance: Provenance::Seed,
    };
    demo.validate()?;
    Ok((demo, r.world))
}

/// Scripts whose template is in `templates` (all scripts when `None`).
pub fn scripts_for(templates: Option<&[String]>) -> Result<Vec<SkillScript>, DemoError> {
    let Some(names) = templates else { return Ok(SCRIPTS.to_vec()) };
    let mut out = Vec::new();
    for name in names {
        let found: Vec<SkillScript> = SCRIPTS.iter().filter(|s| s.template == name).cloned().collect();
        if found.is_empty() {
            return Err(DemoError::NoScript(name.clone()));
        }
        out.extend(found);
    }
    Ok(out)
}

/// Exactly `per_verb` demonstrations for every verb that has a script, cycling
/// through that verb's scripts and spawn seeds.
pub fn record_seed_library(
    registry: &TemplateRegistry,
    scripts: &[SkillScript],
    per_verb: usize,
    seed: u64,
) -> Result<AffordanceLibrary, DemoError> {
    if per_verb == 0 {
        return Err(DemoError::ZeroCount);
    }
    let mut by_verb: BTreeMap<SkillVerb, Vec<&SkillScript>> = BTreeMap::new();
    for s in scripts {
        let list = by_verb.entry(s.verb).or_default();
        if !list.contains(&s) {
            list.push(s);
        }
    }
    let mut lib = AffordanceLibrary::new();
    for (verb, list) in by_verb {
        for k in 0..per_verb {
            let s = list[k % list.len()];
            let round = k / list.len();
            let id = format!("{}-{}-{}-{round}", verb.as_str(), s.subject, s.template);
            let demo_seed = seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            lib.append(record_demo(registry, s, demo_seed, id)?)?;
        }
    }
    Ok(lib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::split_windows;
    use crate::sim::{ground_truth, Predicate, PredicateKind, Relatum};

    fn reg() -> TemplateRegistry {
        TemplateRegistry::builtin()
    }

    #[test]
    fn every_script_records_a_valid_demo() {
        for (i, s) in SCRIPTS.iter().enumerate() {
            let d = record_demo(&reg(), s, i as u64, format!("d{i}")).unwrap();
            assert!(d.steps.len() >= 4, "{s:?}");
            assert_eq!(d.skill_verb, s.verb);
            assert_eq!(d.object_ids.len(), 1 + usize::from(s.destination.is_some() && s.verb != SkillVerb::PushIn && s.verb != SkillVerb::PushOut));
            assert!(split_windows(&d).len() >= 2);
        }
    }

    #[test]
    fn stack_demo_attends_subject_then_destination() {
        let s = &SCRIPTS[4];
        let d = record_demo(&reg(), s, 1, "x".into()).unwrap();
        let first = d.steps.first().unwrap().cloud.foreground_labels();
        let last = d.steps.last().unwrap().cloud.foreground_labels();
        assert_eq!(first, vec![d.object_ids[0]]);
        assert_eq!(last, vec![d.object_ids[1]]);
    }

    #[test]
    fn push_in_demo_reaches_region() {
        let s = &SCRIPTS[2];
        let (_, w) = run_script(&reg(), s, 4, "x".into()).unwrap();
        let id = w.object_by_name("yellow_block").unwrap().id;
        let p = Predicate::new(PredicateKind::InRegion, id, Some(Relatum::Region("white_area".into())));
        assert!(ground_truth(&w, &p).unwrap());
    }

    #[test]
    fn scripted_skills_achieve_their_predicates() {
        for (i, s) in SCRIPTS.iter().enumerate() {
            for seed in [100 + i as u64, 200 + i as u64] {
                let (d, w) = run_script(&reg(), s, seed, "x".into()).unwrap();
                let (p, negated) = expected_predicate(s, &w, d.object_ids[0]);
                assert_eq!(ground_truth(&w, &p).unwrap(), !negated, "{s:?} seed {seed}");
            }
        }
    }

    fn expected_predicate(s: &SkillScript, w: &WorldState, subject: u32) -> (Predicate, bool) {
        let dest = s.destination.and_then(|d| w.object_by_name(d)).map(|o| o.id);
        let p = |k, r| Predicate::new(k, subject, r);
        match s.verb {
            SkillVerb::Pick => (p(PredicateKind::Held, None), false),
            SkillVerb::Place | SkillVerb::Unstack => (p(PredicateKind::On, Some(Relatum::Table)), false),
            SkillVerb::PushIn => (p(PredicateKind::InRegion, Some(Relatum::Region("white_area".into()))), false),
            SkillVerb::PushOut => (p(PredicateKind::InRegion, Some(Relatum::Region("white_area".into()))), true),
            SkillVerb::Stack if s.subject == "red_block" => {
                (p(PredicateKind::StackedOn, Some(Relatum::Object(dest.unwrap()))), false)
            }
            SkillVerb::Stack => (p(PredicateKind::In, Some(Relatum::Object(dest.unwrap()))), false),
            SkillVerb::Open => (p(PredicateKind::Open, None), false),
            SkillVerb::Close => (p(PredicateKind::Closed, None), false),
            _ => unreachable!(),
        }
    }

    #[test]
    fn seed_library_has_exact_per_verb_counts() {
        for n in [1usize, 2, 3] {
            let lib = record_seed_library(&reg(), &SCRIPTS, n, 7).unwrap();
            let mut counts: BTreeMap<SkillVerb, usize> = BTreeMap::new();
            for d in lib.iter() {
                *counts.entry(d.skill_verb).or_default() += 1;
                d.validate().unwrap();
            }
            for v in [
                SkillVerb::Pick,
                SkillVerb::Place,
                SkillVerb::PushIn,
                SkillVerb::PushOut,
                SkillVerb::Stack,
                SkillVerb::Unstack,
                SkillVerb::Open,
                SkillVerb::Close,
            ] {
                assert_eq!(counts.get(&v), Some(&n), "{v:?} with n={n}");
            }
        }
    }

    #[test]
    fn seed_library_is_deterministic() {
        let a = record_seed_library(&reg(), &SCRIPTS[..4], 2, 3).unwrap();
        let b = record_seed_library(&reg(), &SCRIPTS[..4], 2, 3).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn unknown_template_filter_is_rejected() {
        assert!(matches!(scripts_for(Some(&["nowhere".to_string()])), Err(DemoError::NoScript(_))));
        assert_eq!(scripts_for(Some(&["push_block".to_string()])).unwrap().len(), 2);
    }
}
