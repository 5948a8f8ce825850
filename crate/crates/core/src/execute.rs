//! Windowed closed-loop execution of one subtask: every demonstration window is
//! re-grounded in a fresh observation, denoised into actions and replayed in the
//! simulator.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::library::{Demonstration, Gripper};
use crate::planner::{attention_map, Subtask};
use crate::policy::{
    generate_actions, reference_predictor, split_windows, ActionSequence, DiffusionSchedule, GradientPredictor,
    GripperMode, Observation, PolicyError, DEFAULT_HORIZON,
};
use crate::sim::{apply_waypoint, render_point_cloud, SimError, WorldState};

/// Largest ee displacement sent to the simulator in one command.
pub const MAX_WAYPOINT_SPACING: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("demonstration label {0} has no counterpart in the subtask")]
    UnmappedLabel(u32),
    #[error("window {0} attends to no visible object")]
    EmptyAttention(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecConfig {
    pub schedule: DiffusionSchedule,
    pub horizon: usize,
    pub gripper_mode: GripperMode,
    /// Restrict observations to the subtask's attention set.
    pub masking: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            schedule: DiffusionSchedule::linear(16, 1.0, 0.5, 0.01).expect("valid default schedule"),
            horizon: DEFAULT_HORIZON,
            gripper_mode: GripperMode::Diffuse,
            masking: true,
        }
    }
}

/// A command actually applied to the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutedWaypoint {
    pub ee_pose: Pose,
    pub gripper: Gripper,
    /// Live object ids the policy attended to while producing this command.
    pub attention: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SubtaskExecution {
    pub world: WorldState,
    pub waypoints: Vec<ExecutedWaypoint>,
    pub error: Option<String>,
}

/// Live ids observed by a window whose first demonstration frame shows `labels`.
fn window_attention(labels: &[u32], demo: &Demonstration, subtask: &Subtask) -> Result<BTreeSet<u32>, ExecError> {
    let slots = attention_map(&subtask.action);
    labels
        .iter()
        .map(|l| {
            demo.object_ids
                .iter()
                .position(|id| id == l)
                .and_then(|slot| slots.get(&slot).copied())
                .ok_or(ExecError::UnmappedLabel(*l))
        })
        .collect()
}

fn apply_interpolated(
    world: &mut WorldState,
    target: &Pose,
    gripper: Gripper,
    attention: &[u32],
    out: &mut Vec<ExecutedWaypoint>,
) -> Result<(), SimError> {
    let from = world.ee_pose;
    let dist = (target.translation() - from.translation()).norm();
    let n = (dist / MAX_WAYPOINT_SPACING).ceil().max(1.0) as usize;
    for i in 1..=n {
        let pose = if i == n {
            *target
        } else {
            let s = i as f64 / n as f64;
            let t = from.translation() + (target.translation() - from.translation()) * s;
            let r = from.rotation().try_slerp(&target.rotation(), s, 1e-9).unwrap_or_else(|| target.rotation());
            Pose::new(t, r)
        };
        let g = if i == n { gripper } else { world.gripper };
        *world = apply_waypoint(world, &pose, g)?;
        out.push(ExecutedWaypoint { ee_pose: pose, gripper: g, attention: attention.to_vec() });
    }
    Ok(())
}

fn run_windows<R: Rng + ?Sized>(
    world: &mut WorldState,
    subtask: &Subtask,
    demo: &Demonstration,
    cfg: &ExecConfig,
    rng: &mut R,
    out: &mut Vec<ExecutedWaypoint>,
) -> Result<(), ExecError> {
    let factory = |a: &ActionSequence| -> Box<dyn GradientPredictor> { Box::new(reference_predictor(a)) };
    for (w, (s, e)) in split_windows(demo).into_iter().enumerate() {
        let window = demo.slice(s, e + 1);
        let labels = window.steps[0].cloud.foreground_labels();
        let attended = window_attention(&labels, demo, subtask)?;
        let mask: Option<BTreeSet<u32>> = if cfg.masking {
            let m: BTreeSet<u32> = attended.intersection(&subtask.mask).copied().collect();
            if m.is_empty() {
                return Err(ExecError::EmptyAttention(w));
            }
            Some(m)
        } else {
            None
        };
        let obs = Observation {
            cloud: render_point_cloud(world, mask.as_ref())?,
            ee_pose: world.ee_pose,
            gripper: world.gripper,
        };
        let generation = generate_actions(&window, &obs, &cfg.schedule, &factory, rng, cfg.horizon, cfg.gripper_mode)?;
        let attention: Vec<u32> = mask.unwrap_or(attended).into_iter().collect();
        for step in &generation.actions.steps {
            apply_interpolated(world, &step.ee_pose, step.gripper(), &attention, out)?;
        }
    }
    Ok(())
}

/// Executes `subtask` using `demo` as in-context reference. Errors end the
/// subtask early; everything applied up to that point is kept.
pub fn execute_subtask<R: Rng + ?Sized>(
    world: &WorldState,
    subtask: &Subtask,
    demo: &Demonstration,
    cfg: &ExecConfig,
    rng: &mut R,
) -> SubtaskExecution {
    let mut current = world.clone();
    let mut waypoints = Vec::new();
    let error = run_windows(&mut current, subtask, demo, cfg, rng, &mut waypoints).err().map(|e| e.to_string());
    SubtaskExecution { world: current, waypoints, error }
}

/// Re-applies recorded commands, stopping at the first simulator error.
pub fn replay_waypoints(world: &WorldState, waypoints: &[ExecutedWaypoint]) -> Result<WorldState, SimError> {
    waypoints.iter().try_fold(world.clone(), |w, p| apply_waypoint(&w, &p.ee_pose, p.gripper))
}
