use std::collections::BTreeSet;
use std::sync::LazyLock;

use super::*;
use crate::dataset::{read_episodes, replay, EpisodeFilter};
use crate::demos::{record_seed_library, SCRIPTS};
use crate::library::{Provenance, SimilarityWeights};

static LIB: LazyLock<AffordanceLibrary> =
    LazyLock::new(|| record_seed_library(&TemplateRegistry::builtin(), &SCRIPTS, 3, 11).unwrap());

fn registry() -> Arc<TemplateRegistry> {
    Arc::new(TemplateRegistry::builtin())
}

fn config(dir: &std::path::Path, tasks: &[(&str, usize, usize)]) -> CampaignConfig {
    CampaignConfig {
        dataset_path: dir.join("data.jsonl"),
        library_path: dir.join("lib.jsonl"),
        master_seed: 9,
        workers: 3,
        tasks: tasks
            .iter()
            .map(|(t, episodes, lanes)| TaskSpec { template: t.to_string(), episodes: *episodes, lanes: *lanes })
            .collect(),
        ..CampaignConfig::default()
    }
}

fn plan_for(world: &WorldState) -> TaskPlan {
    let reg = registry();
    let mut backend = OracleReasoner::new(reg.clone(), SimilarityWeights::default(), 0);
    plan_world(&mut backend, world, &reg, &LIB, &PlannerConfig::default()).unwrap()
}

fn episode(template: &str, spawn_seed: u64, phases: PerturbationPhases, seed: u64) -> EpisodeRun {
    let world = spawn_scene(&registry(), template, spawn_seed).unwrap();
    let plan = plan_for(&world);
    let mut evaluators = EvaluatorBackends::oracle();
    let exec = ExecConfig::default();
    let mut m = EpisodeModules { library: &LIB, evaluators: &mut evaluators, exec: &exec, perturbation: &phases };
    run_episode(&world, &plan, &mut m, seed)
}

#[test]
fn seed_split_is_stable_and_distinct() {
    assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
    let seeds: BTreeSet<u64> =
        (0..4).flat_map(|s| (0..50).map(move |i| derive_seed(7, lane_stream(s, 1, PURPOSE_EPISODE), i))).collect();
    assert_eq!(seeds.len(), 200);
    assert_ne!(derive_seed(7, lane_stream(0, 0, PURPOSE_SPAWN), 0), derive_seed(7, lane_stream(0, 0, PURPOSE_EPISODE), 0));
}

#[test]
fn lanes_split_the_budget() {
    let cfg = config(std::path::Path::new("/tmp"), &[("push_block", 7, 3), ("pick_ball", 1, 2)]);
    let lanes = lanes_of(&cfg);
    assert_eq!(lanes.iter().map(|l| l.episodes).collect::<Vec<_>>(), vec![3, 2, 2, 1]);
}

#[test]
fn unperturbed_push_block_is_dual() {
    let run = episode("push_block", 1, PerturbationPhases::default(), 1);
    assert_eq!(run.storage, StorageAction::Dual);
    assert_eq!(run.next_state, FsmState::ForwardExecution);
    assert!(run.forward.succeeded());
    assert!(run.reverse.unwrap().succeeded());
}

#[test]
fn reverse_perturbation_routes_to_single() {
    let phases = PerturbationPhases {
        forward: PerturbationConfig::NONE,
        reverse: PerturbationConfig { p_perturb: 1.0, sigma_t: 0.15 },
    };
    let runs: Vec<EpisodeRun> = (0..8).map(|s| episode("push_block", s, phases, s)).collect();
    let singles: Vec<&EpisodeRun> = runs.iter().filter(|r| r.storage == StorageAction::Single).collect();
    assert!(!singles.is_empty());
    for r in singles {
        assert!(r.forward.succeeded());
        assert!(!r.reverse.as_ref().unwrap().succeeded());
        assert_eq!(r.next_state, FsmState::TaskPlanning);
    }
}

#[test]
fn forward_perturbation_discards_without_reverse() {
    let phases = PerturbationPhases {
        forward: PerturbationConfig { p_perturb: 1.0, sigma_t: 0.15 },
        reverse: PerturbationConfig::NONE,
    };
    let runs: Vec<EpisodeRun> = (0..8).map(|s| episode("push_block", s, phases, s)).collect();
    let discards: Vec<&EpisodeRun> = runs.iter().filter(|r| r.storage == StorageAction::Discard).collect();
    assert!(!discards.is_empty());
    for r in discards {
        assert!(r.reverse.is_none());
        assert_eq!(r.next_state, FsmState::TaskPlanning);
    }
}

#[test]
fn missing_demo_is_a_flagged_forward_failure() {
    let world = spawn_scene(&registry(), "pick_ball", 0).unwrap();
    let plan = plan_for(&world);
    let empty = AffordanceLibrary::new();
    let mut evaluators = EvaluatorBackends::oracle();
    let exec = ExecConfig::default();
    let phases = PerturbationPhases::default();
    let mut m = EpisodeModules { library: &empty, evaluators: &mut evaluators, exec: &exec, perturbation: &phases };
    let run = run_episode(&world, &plan, &mut m, 0);
    assert_eq!(run.storage, StorageAction::Discard);
    let sig = &run.forward.subtasks[0].signal;
    assert!(sig.flagged && !sig.value);
    assert!(sig.stage_log.error.as_ref().unwrap().contains("not in the library"));
}

#[test]
fn campaign_reconciles_caps_chains_and_skips_replanning() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[("push_block", 14, 1), ("pick_ball", 6, 2)]);
    cfg.repetition_cap = 3;
    cfg.summary_path = Some(dir.path().join("summary.json"));
    let out = run_campaign_with(&cfg, registry(), &LIB).unwrap();
    assert_eq!(out.records.len(), 20);
    assert!(out.stats.total.reconciles());
    assert_eq!(out.stats.total.episodes, 20);
    assert!(out.records.iter().all(EpisodeRecord::is_consistent));
    for r in &out.records {
        assert!(r.chain_position <= 3);
        if r.chain_position > 1 {
            assert_eq!(r.planner_calls, 0, "re-planned inside a success chain");
        } else {
            assert!(r.planner_calls >= 1);
        }
    }
    assert!(out.stats.repetition_caps >= 1);
    let stored = read_episodes(&cfg.dataset_path, &EpisodeFilter::all()).unwrap();
    assert_eq!(stored.episodes.len(), out.stored_ids.iter().flatten().count());
    assert_eq!(stored.episodes.len(), out.stats.total.dual + out.stats.total.single);
    let summary: CampaignStats =
        serde_json::from_str(&std::fs::read_to_string(cfg.summary_path.unwrap()).unwrap()).unwrap();
    assert_eq!(summary, out.stats);
    assert!(out.report.contains("push_block"));
}

#[test]
fn campaign_is_deterministic_across_worker_counts() {
    let run = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), &[("push_block", 6, 2), ("stack_block", 4, 2)]);
        cfg.workers = workers;
        cfg.perturbation.reverse = PerturbationConfig { p_perturb: 0.5, sigma_t: 0.05 };
        let out = run_campaign_with(&cfg, registry(), &LIB).unwrap();
        (out.stats, crate::dataset::content_hash(&cfg.dataset_path).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
}

#[test]
fn unperturbed_dual_episodes_restore_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("stack_block", 4, 1), ("close_box", 3, 1)]);
    run_campaign_with(&cfg, registry(), &LIB).unwrap();
    let reg = TemplateRegistry::builtin();
    let eps = read_episodes(&cfg.dataset_path, &EpisodeFilter::all()).unwrap().episodes;
    assert!(!eps.is_empty());
    for e in eps {
        let rep = replay(&e, &reg, None).unwrap();
        assert!(rep.is_exact(), "{rep:?}");
    }
}

#[test]
fn harvest_grows_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[("pick_ball", 2, 1)]);
    cfg.harvest_to_library = true;
    cfg.harvest_reverse = true;
    let out = run_campaign_with(&cfg, registry(), &LIB).unwrap();
    assert!(out.harvested >= 2);
    let grown = crate::library::load_library(&cfg.library_path).unwrap();
    assert_eq!(grown.len(), LIB.len() + out.harvested);
    let harvested: Vec<_> = grown.iter().filter(|d| d.provenance == Provenance::Harvested).collect();
    assert_eq!(harvested.len(), out.harvested);
    for d in harvested {
        d.validate().unwrap();
        assert!(d.id.starts_with("harvested-"));
    }
}

#[test]
fn harvested_demo_drives_execution() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[("push_block", 1, 1)]);
    cfg.harvest_to_library = true;
    let out = run_campaign_with(&cfg, registry(), &LIB).unwrap();
    assert_eq!(out.harvested, 1);
    let grown = crate::library::load_library(&cfg.library_path).unwrap();
    let demo = grown.iter().find(|d| d.provenance == Provenance::Harvested).unwrap();
    let world = spawn_scene(&registry(), "push_block", 77).unwrap();
    let mut plan = plan_for(&world);
    plan.forward[0].demo_id = demo.id.clone();
    let mut evaluators = EvaluatorBackends::oracle();
    let exec = ExecConfig::default();
    let phases = PerturbationPhases::default();
    let mut m = EpisodeModules { library: &grown, evaluators: &mut evaluators, exec: &exec, perturbation: &phases };
    assert!(run_episode(&world, &plan, &mut m, 3).forward.succeeded());
}

#[test]
fn dry_run_plans_without_executing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CampaignConfig { dataset_path: dir.path().join("d.jsonl"), ..CampaignConfig::with_default_tasks(1) };
    let entries = dry_run(&cfg, registry(), &LIB).unwrap();
    assert_eq!(entries.len(), DEFAULT_TASKS.len());
    for e in &entries {
        assert!(e.plan.is_ok(), "{}: {:?}", e.task, e.plan);
        assert!(e.violations.is_empty());
    }
    assert!(!cfg.dataset_path.exists());
}

#[test]
fn unreachable_external_backend_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[("push_block", 1, 1)]);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    cfg.backend = BackendConfig { kind: BackendKind::External, endpoint: Some(format!("127.0.0.1:{port}")), timeout_ms: 500 };
    let err = run_campaign_with(&cfg, registry(), &LIB).unwrap_err();
    assert!(matches!(err, CampaignError::Backend(BackendError::Transport(_))), "{err}");
}

#[test]
fn hopeless_planning_abandons_the_lane() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[("push_block", 3, 1)]);
    cfg.max_plan_failures = 2;
    let err = run_campaign_with(&cfg, registry(), &AffordanceLibrary::new()).unwrap_err();
    assert!(matches!(err, CampaignError::Stats(StatsError::Empty)), "{err}");
}
