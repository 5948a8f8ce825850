//! Append-only JSON-lines episode store with Dual/Single routing semantics,
//! corruption-tolerant reads and oracle replay.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{evaluate, EvaluatorBackends, SuccessSignal};
use crate::execute::{replay_waypoints, ExecutedWaypoint};
use crate::planner::{PlanningMode, SkillAction, TaskPlan};
use crate::sim::{
    all_predicates, apply_perturbation_event, describe_scene, spawn_scene, PerturbationEvent, SceneDescription,
    SimError, TemplateRegistry, WorldState,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Precondition(String),
    #[error("episode serialization failed: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("template '{0}' is not registered")]
    MissingTemplate(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// One executed subtask: the commands sent, any perturbation applied before the
/// check, the success signal and the scene observed at its end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskRecord {
    pub action: SkillAction,
    pub demo_id: String,
    pub description: String,
    pub waypoints: Vec<ExecutedWaypoint>,
    pub perturbation: Option<PerturbationEvent>,
    pub execution_error: Option<String>,
    pub signal: SuccessSignal,
    pub end_scene: SceneDescription,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub subtasks: Vec<SubtaskRecord>,
}

impl Trajectory {
    pub fn is_empty(&self) -> bool {
        self.subtasks.iter().all(|s| s.waypoints.is_empty())
    }

    pub fn succeeded(&self) -> bool {
        !self.subtasks.is_empty() && self.subtasks.iter().all(|s| s.signal.value)
    }

    pub fn signals(&self) -> Vec<bool> {
        self.subtasks.iter().map(|s| s.signal.value).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    Dual,
    Single,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescriptor {
    pub template: String,
    pub mode: PlanningMode,
    pub commands: Vec<String>,
}

impl TaskDescriptor {
    pub fn of_plan(plan: &TaskPlan) -> Self {
        Self {
            template: plan.template.clone(),
            mode: plan.mode,
            commands: plan.forward.iter().map(|s| s.description.clone()).collect(),
        }
    }
}

/// Where the episode's initial world came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnInfo {
    pub template: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSeeds {
    pub master: u64,
    pub episode: u64,
}

/// Everything stored alongside the trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub task: TaskDescriptor,
    pub plan: TaskPlan,
    pub seeds: EpisodeSeeds,
    pub library_hash: String,
    pub initial_world: WorldState,
    /// Set when the initial world was freshly spawned rather than inherited.
    pub spawn: Option<SpawnInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredEpisode {
    pub schema_version: u32,
    pub id: u64,
    pub kind: StorageKind,
    pub forward: Trajectory,
    pub reverse: Option<Trajectory>,
    pub meta: EpisodeMeta,
}

impl StoredEpisode {
    /// Kind/payload consistency: dual iff a non-empty reverse trajectory is present.
    pub fn check(&self) -> Result<(), DatasetError> {
        let fail = |m: &str| Err(DatasetError::Precondition(format!("episode {}: {m}", self.id)));
        if self.schema_version != SCHEMA_VERSION {
            return fail(&format!("unsupported schema version {}", self.schema_version));
        }
        if self.forward.is_empty() {
            return fail("forward trajectory is empty");
        }
        match (self.kind, &self.reverse) {
            (StorageKind::Dual, None) => fail("dual episode lacks a reverse trajectory"),
            (StorageKind::Dual, Some(r)) if r.is_empty() => fail("dual episode has an empty reverse trajectory"),
            (StorageKind::Single, Some(_)) => fail("single episode must not carry reverse data"),
            _ => Ok(()),
        }
    }

    pub fn stage_logs(&self) -> Vec<&crate::evaluator::StageLog> {
        self.forward
            .subtasks
            .iter()
            .chain(self.reverse.iter().flat_map(|r| &r.subtasks))
            .map(|s| &s.signal.stage_log)
            .collect()
    }
}

/// Single-writer append handle. Ids continue from the largest id already on disk.
#[derive(Debug)]
pub struct DatasetStore {
    path: PathBuf,
    file: File,
    next_id: u64,
}

impl DatasetStore {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io_err(path))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io_err(path))?;
        let next_id = parse_lines(&text).0.iter().map(|e| e.id + 1).max().unwrap_or(0);
        if !text.is_empty() && !text.ends_with('\n') {
            // Keep a torn tail on its own line so it stays isolated.
            file.write_all(b"\n").map_err(io_err(path))?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), file, next_id })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn store_dual(&mut self, forward: Trajectory, reverse: Trajectory, meta: EpisodeMeta) -> Result<u64, DatasetError> {
        if reverse.is_empty() {
            return Err(DatasetError::Precondition("dual storage needs a non-empty reverse trajectory".into()));
        }
        self.append(StorageKind::Dual, forward, Some(reverse), meta)
    }

    pub fn store_single(&mut self, forward: Trajectory, meta: EpisodeMeta) -> Result<u64, DatasetError> {
        self.append(StorageKind::Single, forward, None, meta)
    }

    /// Validates and durably appends one episode, returning its id.
    pub fn append(
        &mut self,
        kind: StorageKind,
        forward: Trajectory,
        reverse: Option<Trajectory>,
        meta: EpisodeMeta,
    ) -> Result<u64, DatasetError> {
        let episode = StoredEpisode { schema_version: SCHEMA_VERSION, id: self.next_id, kind, forward, reverse, meta };
        episode.check()?;
        let mut line = serde_json::to_string(&episode)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.next_id += 1;
        Ok(episode.id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeFilter {
    pub task: Option<String>,
    pub kind: Option<StorageKind>,
    pub ids: Option<RangeInclusive<u64>>,
}

impl EpisodeFilter {
    pub fn all() -> Self {
        Self::default()
    }

    fn accepts(&self, e: &StoredEpisode) -> bool {
        self.task.as_ref().is_none_or(|t| &e.meta.task.template == t)
            && self.kind.is_none_or(|k| e.kind == k)
            && self.ids.as_ref().is_none_or(|r| r.contains(&e.id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorruptRecord {
    /// 1-based line number.
    pub line: usize,
    /// Byte offset of the line start.
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReadOutcome {
    pub episodes: Vec<StoredEpisode>,
    pub corrupt: Vec<CorruptRecord>,
}

fn parse_lines(text: &str) -> (Vec<StoredEpisode>, Vec<CorruptRecord>) {
    let mut episodes = Vec::new();
    let mut corrupt = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let body = line.trim_end_matches('\n');
        if body.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<StoredEpisode>(body)
            .map_err(|e| e.to_string())
            .and_then(|e| e.check().map(|_| e).map_err(|e| e.to_string()));
        match parsed {
            Ok(e) => episodes.push(e),
            Err(reason) => corrupt.push(CorruptRecord { line: i + 1, offset: start, reason }),
        }
    }
    (episodes, corrupt)
}

pub fn read_episodes(path: &Path, filter: &EpisodeFilter) -> Result<ReadOutcome, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let (episodes, corrupt) = parse_lines(&text);
    Ok(ReadOutcome { episodes: episodes.into_iter().filter(|e| filter.accepts(e)).collect(), corrupt })
}

/// Hex SHA-256 of the dataset file bytes.
pub fn content_hash(path: &Path) -> Result<String, DatasetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseDelta {
    pub phase: &'static str,
    pub subtask: usize,
    pub object: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub episode_id: u64,
    pub recorded: Vec<bool>,
    pub replayed: Vec<bool>,
    /// Replayed success signals equal the recorded ones.
    pub agreement: bool,
    /// Object positions that differ from the recorded boundary observations.
    pub pose_deltas: Vec<PoseDelta>,
    /// For dual episodes: every ground-truth predicate is back at its initial value.
    pub reset_restored: Option<bool>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.agreement && self.pose_deltas.is_empty() && self.reset_restored != Some(false)
    }
}

const POSE_EPS: f64 = 1e-9;

fn replay_phase(
    world: WorldState,
    traj: &Trajectory,
    phase: &'static str,
    evaluators: &mut EvaluatorBackends,
    replayed: &mut Vec<bool>,
    deltas: &mut Vec<PoseDelta>,
) -> Result<WorldState, DatasetError> {
    let mut w = world;
    for (k, st) in traj.subtasks.iter().enumerate() {
        w = match replay_waypoints(&w, &st.waypoints) {
            Ok(next) => next,
            Err(_) if st.execution_error.is_some() => w,
            Err(e) => return Err(e.into()),
        };
        if let Some(ev) = &st.perturbation {
            w = apply_perturbation_event(&w, ev)?;
        }
        let scene = describe_scene(&w);
        let value = if st.execution_error.is_some() {
            false
        } else {
            evaluate(evaluators, &st.description, &st.action, &scene).value
        };
        replayed.push(value);
        for rec in &st.end_scene.objects {
            let delta = scene.object_by_id(rec.id).map_or(f64::INFINITY, |o| {
                let d: f64 = (0..3).map(|i| (o.position[i] - rec.position[i]).powi(2)).sum();
                d.sqrt()
            });
            if delta > POSE_EPS {
                deltas.push(PoseDelta { phase, subtask: k, object: rec.name.clone(), delta });
            }
        }
    }
    Ok(w)
}

/// Re-spawns (or restores) the episode's initial world, re-applies its commands and
/// perturbations and re-checks every subtask with the oracle evaluator.
pub fn replay(
    episode: &StoredEpisode,
    registry: &TemplateRegistry,
    seed_override: Option<u64>,
) -> Result<ReplayReport, DatasetError> {
    let template = &episode.meta.initial_world.template;
    if registry.get(template).is_none() {
        return Err(DatasetError::MissingTemplate(template.clone()));
    }
    let initial = match (&episode.meta.spawn, seed_override) {
        (_, Some(seed)) => spawn_scene(registry, template, seed)?,
        (Some(s), None) => spawn_scene(registry, &s.template, s.seed)?,
        (None, None) => episode.meta.initial_world.clone(),
    };
    let mut evaluators = EvaluatorBackends::oracle();
    let mut replayed = Vec::new();
    let mut deltas = Vec::new();
    let mut w = replay_phase(initial.clone(), &episode.forward, "forward", &mut evaluators, &mut replayed, &mut deltas)?;
    let mut recorded = episode.forward.signals();
    if let Some(rev) = &episode.reverse {
        w = replay_phase(w, rev, "reverse", &mut evaluators, &mut replayed, &mut deltas)?;
        recorded.extend(rev.signals());
    }
    let reset_restored = (episode.kind == StorageKind::Dual).then(|| all_predicates(&initial) == all_predicates(&w));
    Ok(ReplayReport {
        episode_id: episode.id,
        agreement: recorded == replayed,
        recorded,
        replayed,
        pose_deltas: deltas,
        reset_restored,
    })
}

#[cfg(test)]
mod tests;
