use std::collections::BTreeSet;

use crate::dataset::{StorageKind, StoredEpisode, Trajectory};
use crate::library::{Demonstration, DemonstrationStep, Provenance, STORED_CLOUD_BUDGET};
use crate::sim::{apply_perturbation_event, apply_waypoint, render_point_cloud, SimError, WorldState};

fn observe(world: &WorldState, attention: &[u32]) -> Result<DemonstrationStep, SimError> {
    let mask: BTreeSet<u32> = attention.iter().copied().collect();
    Ok(DemonstrationStep {
        cloud: render_point_cloud(world, Some(&mask))?.downsampled(STORED_CLOUD_BUDGET),
        ee_pose: world.ee_pose,
        gripper: world.gripper,
    })
}

fn harvest_phase(
    world: WorldState,
    traj: &Trajectory,
    phase: &str,
    episode_id: u64,
    out: &mut Vec<Demonstration>,
) -> Result<WorldState, SimError> {
    let mut w = world;
    for (k, st) in traj.subtasks.iter().enumerate() {
        let mut steps = Vec::with_capacity(st.waypoints.len() + 1);
        if let Some(first) = st.waypoints.first() {
            steps.push(observe(&w, &first.attention)?);
        }
        for wp in &st.waypoints {
            w = apply_waypoint(&w, &wp.ee_pose, wp.gripper)?;
            steps.push(observe(&w, &wp.attention)?);
        }
        let subject = w.object(st.action.subject.id)?.descriptor.clone();
        if let Some(ev) = &st.perturbation {
            w = apply_perturbation_event(&w, ev)?;
        }
        if !st.signal.value || st.execution_error.is_some() {
            continue;
        }
        let mut object_ids = vec![st.action.subject.id];
        object_ids.extend(st.action.destination.as_ref().and_then(|d| d.object_id()));
        let demo = Demonstration {
            id: format!("harvested-{}-{episode_id}-{phase}{k}", st.action.verb),
            skill_verb: st.action.verb,
            target: subject,
            object_ids,
            steps,
            provenance: Provenance::Harvested,
        };
        match demo.validate() {
            Ok(()) => out.push(demo),
            Err(e) => log::warn!("skipping harvested demonstration: {e}"),
        }
    }
    Ok(w)
}

/// Turns every successful subtask of a stored episode into a demonstration by
/// replaying it from the recorded initial world.
pub fn harvest_episode(episode: &StoredEpisode, include_reverse: bool) -> Result<Vec<Demonstration>, SimError> {
    let mut out = Vec::new();
    let w = harvest_phase(episode.meta.initial_world.clone(), &episode.forward, "f", episode.id, &mut out)?;
    if include_reverse && episode.kind == StorageKind::Dual {
        if let Some(rev) = &episode.reverse {
            harvest_phase(w, rev, "r", episode.id, &mut out)?;
        }
    }
    Ok(out)
}
