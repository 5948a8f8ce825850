//! Campaign driver. Each lane owns one world and one FSM and loops through
//! planning, forward and reverse execution; stored episodes go through a single
//! writer after the lanes join.

mod config;
mod harvest;
mod stats;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::*;
pub use harvest::harvest_episode;
pub use stats::*;

use crate::backend::BackendError;
use crate::dataset::{
    DatasetError, DatasetStore, EpisodeMeta, EpisodeSeeds, SpawnInfo, StorageKind, StoredEpisode, SubtaskRecord,
    TaskDescriptor, Trajectory, SCHEMA_VERSION,
};
use crate::evaluator::{evaluate, EvaluatorBackends, StageLog, SuccessSignal, STYLE_COUNT};
use crate::execute::{execute_subtask, ExecConfig};
use crate::external::{external_evaluators, ExternalClient, ExternalReasoner};
use crate::fsm::{step_fsm, FsmEvent, FsmState, StorageAction};
use crate::library::{load_library, save_library, AffordanceLibrary, LibraryError};
use crate::planner::{ground_objects, plan_task, validate_lifo, LifoViolation, OracleReasoner, PlanError, PlannerConfig, ReasonerBackend, Subtask, TaskPlan};
use crate::prompts::PromptSet;
use crate::sim::{describe_scene, perturb, spawn_scene, PerturbationConfig, SimError, TemplateRegistry, WorldState};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("scene templates: {0}")]
    Templates(#[from] SimError),
    #[error("backend unavailable: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("worker pool: {0}")]
    Pool(String),
}

const PURPOSE_SPAWN: u64 = 0;
const PURPOSE_EPISODE: u64 = 1;
const PURPOSE_STYLE: u64 = 2;
const PURPOSE_PLANNER: u64 = 3;

/// Counter-based seed split: the `index`-th draw of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

fn lane_stream(task: usize, lane: usize, purpose: u64) -> u64 {
    ((task as u64) << 36) | ((lane as u64) << 4) | purpose
}

/// Independent rngs for policy noise and perturbations of one episode.
fn episode_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut exec = ChaCha8Rng::seed_from_u64(seed);
    exec.set_stream(0);
    let mut pert = ChaCha8Rng::seed_from_u64(seed);
    pert.set_stream(1);
    (exec, pert)
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub task: String,
    pub lane: usize,
    pub plan: TaskPlan,
    pub forward: Trajectory,
    /// Present iff reverse execution was entered.
    pub reverse: Option<Trajectory>,
    pub storage: StorageAction,
    pub next_state: FsmState,
    pub seeds: EpisodeSeeds,
    pub initial_world: WorldState,
    pub spawn: Option<SpawnInfo>,
    /// Planner backend invocations since the lane's previous episode.
    pub planner_calls: usize,
    /// 1-based position among consecutive episodes sharing this plan.
    pub chain_position: usize,
    pub wall_time: Duration,
}

impl EpisodeRecord {
    pub fn b_succ(&self) -> Vec<bool> {
        let mut v = self.forward.signals();
        v.extend(self.reverse.iter().flat_map(Trajectory::signals));
        v
    }

    /// Storage action agrees with the recorded signals and the transition table.
    pub fn is_consistent(&self) -> bool {
        let fwd = self.forward.succeeded() && self.forward.subtasks.len() == self.plan.forward.len();
        let rev = self
            .reverse
            .as_ref()
            .map(|r| r.succeeded() && r.subtasks.len() == self.plan.reverse.len());
        match (self.storage, rev) {
            (StorageAction::Discard, None) => !fwd && self.next_state == FsmState::TaskPlanning,
            (StorageAction::Dual, Some(true)) => fwd && self.next_state == FsmState::ForwardExecution,
            (StorageAction::Single, Some(false)) => fwd && self.next_state == FsmState::TaskPlanning,
            _ => false,
        }
    }
}

impl EpisodeOutcome for EpisodeRecord {
    fn task(&self) -> &str {
        &self.task
    }

    fn storage(&self) -> StorageAction {
        self.storage
    }
}

/// Result of one pass through forward (and possibly reverse) execution.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub forward: Trajectory,
    pub reverse: Option<Trajectory>,
    pub storage: StorageAction,
    pub next_state: FsmState,
    pub world: WorldState,
}

pub struct EpisodeModules<'a> {
    pub library: &'a AffordanceLibrary,
    pub evaluators: &'a mut EvaluatorBackends,
    pub exec: &'a ExecConfig,
    pub perturbation: &'a PerturbationPhases,
}

fn flagged(command: &str, error: String) -> SuccessSignal {
    SuccessSignal {
        value: false,
        stage_log: StageLog { command: command.to_string(), error: Some(error), ..StageLog::default() },
        flagged: true,
    }
}

/// Executes subtasks in order, perturbing after each one and checking it; stops
/// at the first failure.
fn run_phase(
    world: &WorldState,
    subtasks: &[Subtask],
    m: &mut EpisodeModules<'_>,
    pert: &PerturbationConfig,
    exec_rng: &mut ChaCha8Rng,
    pert_rng: &mut ChaCha8Rng,
) -> (Trajectory, WorldState) {
    let mut w = world.clone();
    let mut traj = Trajectory::default();
    for st in subtasks {
        let (waypoints, execution_error, perturbation, signal) = match m.library.get(&st.demo_id) {
            None => {
                let e = format!("demonstration '{}' is not in the library", st.demo_id);
                (Vec::new(), Some(e.clone()), None, flagged(&st.description, e))
            }
            Some(demo) => {
                let ex = execute_subtask(&w, st, demo, m.exec, exec_rng);
                match ex.error {
                    Some(e) => {
                        w = ex.world;
                        (ex.waypoints, Some(e.clone()), None, flagged(&st.description, e))
                    }
                    None => {
                        let (next, event) = perturb(&ex.world, pert, pert_rng);
                        w = next;
                        let signal = evaluate(m.evaluators, &st.description, &st.action, &describe_scene(&w));
                        (ex.waypoints, None, event, signal)
                    }
                }
            }
        };
        let ok = signal.value;
        traj.subtasks.push(SubtaskRecord {
            action: st.action.clone(),
            demo_id: st.demo_id.clone(),
            description: st.description.clone(),
            waypoints,
            perturbation,
            execution_error,
            signal,
            end_scene: describe_scene(&w),
        });
        if !ok {
            break;
        }
    }
    (traj, w)
}

fn transition(state: FsmState, event: FsmEvent) -> (FsmState, StorageAction) {
    step_fsm(state, event).unwrap_or_else(|e| panic!("orchestrator protocol bug: {e}"))
}

/// One episode starting in forward execution. The success signals alone drive the FSM.
pub fn run_episode(world: &WorldState, plan: &TaskPlan, modules: &mut EpisodeModules<'_>, seed: u64) -> EpisodeRun {
    let (mut exec_rng, mut pert_rng) = episode_rngs(seed);
    let phases = *modules.perturbation;
    let (forward, w) = run_phase(world, &plan.forward, modules, &phases.forward, &mut exec_rng, &mut pert_rng);
    let fwd_ok = forward.succeeded() && forward.subtasks.len() == plan.forward.len();
    let (state, storage) = transition(FsmState::ForwardExecution, FsmEvent::ForwardResult(fwd_ok));
    if state != FsmState::ReverseExecution {
        return EpisodeRun { forward, reverse: None, storage, next_state: state, world: w };
    }
    let (reverse, w) = run_phase(&w, &plan.reverse, modules, &phases.reverse, &mut exec_rng, &mut pert_rng);
    let rev_ok = reverse.succeeded() && reverse.subtasks.len() == plan.reverse.len();
    let (next_state, storage) = transition(state, FsmEvent::ReverseResult(rev_ok));
    EpisodeRun { forward, reverse: Some(reverse), storage, next_state, world: w }
}

/// Grounds the scene and asks the backend for a forward/reverse plan.
pub fn plan_world(
    backend: &mut dyn ReasonerBackend,
    world: &WorldState,
    registry: &TemplateRegistry,
    library: &AffordanceLibrary,
    cfg: &PlannerConfig,
) -> Result<TaskPlan, PlanError> {
    let prompts = PromptSet::default();
    let obs = describe_scene(world);
    let mode = registry
        .get(&world.template)
        .map(|t| t.mode)
        .ok_or_else(|| PlanError::PlanningFailure { attempts: 0, reason: format!("unknown template {}", world.template) })?;
    let scene = ground_objects(backend, &prompts, &obs)?;
    plan_task(backend, &prompts, &obs, &scene, library, mode, cfg)
}

struct Shared<'a> {
    cfg: &'a CampaignConfig,
    registry: Arc<TemplateRegistry>,
    library: &'a AffordanceLibrary,
    exec: ExecConfig,
    planner: PlannerConfig,
}

impl Shared<'_> {
    fn backends(&self, task: usize, lane: usize) -> (Box<dyn ReasonerBackend>, EvaluatorBackends) {
        let master = self.cfg.master_seed;
        match self.cfg.backend.kind {
            BackendKind::Oracle => {
                let planner_seed = derive_seed(master, lane_stream(task, lane, PURPOSE_PLANNER), 0);
                let style = derive_seed(master, lane_stream(task, lane, PURPOSE_STYLE), 0) % STYLE_COUNT as u64;
                (
                    Box::new(OracleReasoner::new(self.registry.clone(), self.planner.weights, planner_seed)),
                    EvaluatorBackends::oracle_with_style(style as usize),
                )
            }
            BackendKind::External => {
                let client = self.client();
                (Box::new(ExternalReasoner::new(client.clone())), external_evaluators(&client))
            }
        }
    }

    fn client(&self) -> ExternalClient {
        ExternalClient::new(
            self.cfg.backend.endpoint.clone().unwrap_or_default(),
            Duration::from_millis(self.cfg.backend.timeout_ms),
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct LaneSpec {
    task: usize,
    lane: usize,
    episodes: usize,
}

#[derive(Debug, Default)]
struct LaneResult {
    records: Vec<EpisodeRecord>,
    planner_calls: usize,
    planning_failures: usize,
    repetition_caps: usize,
    abandoned: bool,
}

fn lanes_of(cfg: &CampaignConfig) -> Vec<LaneSpec> {
    let mut out = Vec::new();
    for (task, t) in cfg.tasks.iter().enumerate() {
        let (base, extra) = (t.episodes / t.lanes, t.episodes % t.lanes);
        for lane in 0..t.lanes {
            let episodes = base + usize::from(lane < extra);
            if episodes > 0 {
                out.push(LaneSpec { task, lane, episodes });
            }
        }
    }
    out
}

fn run_lane(spec: LaneSpec, sh: &Shared<'_>) -> LaneResult {
    let cfg = sh.cfg;
    let template = cfg.tasks[spec.task].template.clone();
    let master = cfg.master_seed;
    let (mut reasoner, mut evaluators) = sh.backends(spec.task, spec.lane);
    let mut out = LaneResult::default();
    let mut spawns = 0u64;
    let respawn = |spawns: &mut u64| -> Result<(WorldState, SpawnInfo), SimError> {
        let seed = derive_seed(master, lane_stream(spec.task, spec.lane, PURPOSE_SPAWN), *spawns);
        *spawns += 1;
        Ok((spawn_scene(&sh.registry, &template, seed)?, SpawnInfo { template: template.clone(), seed }))
    };

    let mut world: Option<WorldState> = None;
    let mut spawn: Option<SpawnInfo> = None;
    let mut plan: Option<TaskPlan> = None;
    let mut state = FsmState::TaskPlanning;
    let mut chain = 0usize;
    let mut failures = 0usize;
    let mut calls_since = 0usize;

    while out.records.len() < spec.episodes {
        let w = match world.as_ref() {
            Some(w) => w,
            None => match respawn(&mut spawns) {
                Ok((w, info)) => {
                    spawn = Some(info);
                    world.insert(w)
                }
                Err(e) => {
                    log::warn!("{template} lane {}: spawn failed: {e}", spec.lane);
                    out.planning_failures += 1;
                    failures += 1;
                    if failures >= cfg.max_plan_failures {
                        out.abandoned = true;
                        break;
                    }
                    continue;
                }
            },
        };
        match state {
            FsmState::TaskPlanning => {
                out.planner_calls += 1;
                calls_since += 1;
                match plan_world(reasoner.as_mut(), w, &sh.registry, sh.library, &sh.planner) {
                    Ok(p) => {
                        plan = Some(p);
                        chain = 0;
                        failures = 0;
                        state = transition(state, FsmEvent::PlanReady).0;
                    }
                    Err(e) => {
                        log::debug!("{template} lane {}: planning failed: {e}", spec.lane);
                        out.planning_failures += 1;
                        failures += 1;
                        state = transition(state, FsmEvent::PlanFailed).0;
                        if failures >= cfg.max_plan_failures {
                            out.abandoned = true;
                            break;
                        }
                        world = None;
                    }
                }
            }
            FsmState::ForwardExecution => {
                if chain >= cfg.repetition_cap {
                    out.repetition_caps += 1;
                    state = transition(state, FsmEvent::RepetitionCapReached).0;
                    continue;
                }
                let p = plan.as_ref().expect("forward execution always follows a plan");
                let index = out.records.len() as u64;
                let seed = derive_seed(master, lane_stream(spec.task, spec.lane, PURPOSE_EPISODE), index);
                let started = Instant::now();
                let mut modules = EpisodeModules {
                    library: sh.library,
                    evaluators: &mut evaluators,
                    exec: &sh.exec,
                    perturbation: &cfg.perturbation,
                };
                let run = run_episode(w, p, &mut modules, seed);
                chain += 1;
                out.records.push(EpisodeRecord {
                    task: template.clone(),
                    lane: spec.lane,
                    plan: p.clone(),
                    forward: run.forward,
                    reverse: run.reverse,
                    storage: run.storage,
                    next_state: run.next_state,
                    seeds: EpisodeSeeds { master, episode: seed },
                    initial_world: w.clone(),
                    spawn: spawn.take(),
                    planner_calls: std::mem::take(&mut calls_since),
                    chain_position: chain,
                    wall_time: started.elapsed(),
                });
                state = run.next_state;
                // A forward abort leaves an arbitrary half-done scene; start over from a fresh one.
                world = (run.storage != StorageAction::Discard).then_some(run.world);
            }
            FsmState::ReverseExecution => unreachable!("reverse execution is entered only inside run_episode"),
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub stats: CampaignStats,
    pub records: Vec<EpisodeRecord>,
    /// Dataset id per record; `None` for discarded episodes.
    pub stored_ids: Vec<Option<u64>>,
    pub harvested: usize,
    pub abandoned_lanes: usize,
    pub report: String,
}

/// Loads templates and library named by the config, then runs the campaign.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutcome, CampaignError> {
    let registry = load_registry(cfg)?;
    cfg.validate(&registry)?;
    let library = load_library(&cfg.library_path)?;
    run_campaign_with(cfg, Arc::new(registry), &library)
}

pub fn load_registry(cfg: &CampaignConfig) -> Result<TemplateRegistry, CampaignError> {
    Ok(match &cfg.templates_path {
        Some(p) => TemplateRegistry::load(p)?,
        None => TemplateRegistry::builtin(),
    })
}

fn stored_episode(r: &EpisodeRecord, library_hash: &str) -> Option<(StorageKind, EpisodeMeta)> {
    let kind = match r.storage {
        StorageAction::Dual => StorageKind::Dual,
        StorageAction::Single => StorageKind::Single,
        _ => return None,
    };
    let meta = EpisodeMeta {
        task: TaskDescriptor::of_plan(&r.plan),
        plan: r.plan.clone(),
        seeds: r.seeds,
        library_hash: library_hash.to_string(),
        initial_world: r.initial_world.clone(),
        spawn: r.spawn.clone(),
    };
    Some((kind, meta))
}

/// Runs every lane of the campaign against an already loaded library.
pub fn run_campaign_with(
    cfg: &CampaignConfig,
    registry: Arc<TemplateRegistry>,
    library: &AffordanceLibrary,
) -> Result<CampaignOutcome, CampaignError> {
    cfg.validate(&registry)?;
    let sh = Shared { cfg, registry, library, exec: cfg.exec_config()?, planner: cfg.planner_config() };
    if cfg.backend.kind == BackendKind::External {
        sh.client().connect()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CampaignError::Pool(e.to_string()))?;
    let lanes = lanes_of(cfg);
    let results: Vec<LaneResult> = pool.install(|| lanes.par_iter().map(|l| run_lane(*l, &sh)).collect());

    let mut records = Vec::new();
    let (mut planner_calls, mut planning_failures, mut repetition_caps, mut abandoned_lanes) = (0, 0, 0, 0);
    for r in results {
        planner_calls += r.planner_calls;
        planning_failures += r.planning_failures;
        repetition_caps += r.repetition_caps;
        abandoned_lanes += usize::from(r.abandoned);
        records.extend(r.records);
    }

    let library_hash = library.snapshot_hash();
    let mut store = DatasetStore::open(&cfg.dataset_path)?;
    let mut stored_ids = Vec::with_capacity(records.len());
    let mut harvested_demos = Vec::new();
    for r in &records {
        let id = match stored_episode(r, &library_hash) {
            None => None,
            Some((kind, meta)) => {
                let reverse = (kind == StorageKind::Dual).then(|| r.reverse.clone()).flatten();
                let id = store.append(kind, r.forward.clone(), reverse.clone(), meta.clone())?;
                if cfg.harvest_to_library {
                    let ep = StoredEpisode {
                        schema_version: SCHEMA_VERSION,
                        id,
                        kind,
                        forward: r.forward.clone(),
                        reverse,
                        meta,
                    };
                    harvested_demos.extend(harvest_episode(&ep, cfg.harvest_reverse)?);
                }
                Some(id)
            }
        };
        stored_ids.push(id);
    }

    let mut harvested = 0;
    if cfg.harvest_to_library && !harvested_demos.is_empty() {
        let mut grown = library.clone();
        for d in harvested_demos {
            match grown.append(d) {
                Ok(()) => harvested += 1,
                Err(e) => log::warn!("harvest: {e}"),
            }
        }
        save_library(&grown, &cfg.library_path)?;
    }

    let mut stats = compute_stats(&records)?;
    stats.planner_calls = planner_calls;
    stats.planning_failures = planning_failures;
    stats.repetition_caps = repetition_caps;
    let report = render_report(&stats);
    if let Some(path) = &cfg.summary_path {
        let text = serde_json::to_string_pretty(&stats).map_err(DatasetError::from)?;
        std::fs::write(path, text + "\n").map_err(|source| CampaignError::Io { path: path.clone(), source })?;
    }
    Ok(CampaignOutcome { stats, records, stored_ids, harvested, abandoned_lanes, report })
}

#[derive(Debug, Clone, Serialize)]
pub struct DryRunEntry {
    pub task: String,
    pub lane: usize,
    pub spawn_seed: u64,
    pub plan: Result<TaskPlan, String>,
    pub violations: Vec<LifoViolation>,
}

/// Plans the first scene of every lane and validates it, executing nothing.
pub fn dry_run(
    cfg: &CampaignConfig,
    registry: Arc<TemplateRegistry>,
    library: &AffordanceLibrary,
) -> Result<Vec<DryRunEntry>, CampaignError> {
    cfg.validate(&registry)?;
    let sh = Shared { cfg, registry, library, exec: cfg.exec_config()?, planner: cfg.planner_config() };
    if cfg.backend.kind == BackendKind::External {
        sh.client().connect()?;
    }
    let mut out = Vec::new();
    for spec in lanes_of(cfg) {
        let template = &cfg.tasks[spec.task].template;
        let seed = derive_seed(cfg.master_seed, lane_stream(spec.task, spec.lane, PURPOSE_SPAWN), 0);
        let world = spawn_scene(&sh.registry, template, seed)?;
        let (mut reasoner, _) = sh.backends(spec.task, spec.lane);
        let plan = plan_world(reasoner.as_mut(), &world, &sh.registry, library, &sh.planner).map_err(|e| e.to_string());
        let violations = plan.as_ref().map(validate_lifo).unwrap_or_default();
        out.push(DryRunEntry { task: template.clone(), lane: spec.lane, spawn_seed: seed, plan, violations });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
