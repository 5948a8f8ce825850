use std::io::Write as _;
use std::sync::{Arc, LazyLock};

use proptest::prelude::*;

use super::*;
use crate::demos::{record_seed_library, SCRIPTS};
use crate::library::AffordanceLibrary;
use crate::orchestrator::{run_campaign_with, CampaignConfig, CampaignOutcome, TaskSpec};
use crate::sim::PerturbationConfig;

static LIB: LazyLock<AffordanceLibrary> =
    LazyLock::new(|| record_seed_library(&TemplateRegistry::builtin(), &SCRIPTS, 3, 11).unwrap());

/// One small push_block campaign with reverse perturbations so both kinds occur.
static CAMPAIGN: LazyLock<(tempfile::TempDir, CampaignOutcome)> = LazyLock::new(|| {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = CampaignConfig {
        dataset_path: dir.path().join("data.jsonl"),
        library_path: dir.path().join("lib.jsonl"),
        master_seed: 5,
        workers: 2,
        tasks: vec![TaskSpec { template: "push_block".into(), episodes: 12, lanes: 2 }],
        ..CampaignConfig::default()
    };
    cfg.perturbation.reverse = PerturbationConfig { p_perturb: 0.5, sigma_t: 0.08 };
    let out = run_campaign_with(&cfg, Arc::new(TemplateRegistry::builtin()), &LIB).unwrap();
    (dir, out)
});

fn campaign_path() -> PathBuf {
    CAMPAIGN.0.path().join("data.jsonl")
}

fn sample_meta() -> (Trajectory, Trajectory, EpisodeMeta) {
    let all = read_episodes(&campaign_path(), &EpisodeFilter { kind: Some(StorageKind::Dual), ..EpisodeFilter::all() })
        .unwrap();
    let ep = all.episodes.into_iter().next().expect("campaign stored a dual episode");
    (ep.forward, ep.reverse.unwrap(), ep.meta)
}

#[test]
fn campaign_stores_both_kinds() {
    let out = read_episodes(&campaign_path(), &EpisodeFilter::all()).unwrap();
    assert!(out.corrupt.is_empty());
    let kinds: BTreeSet<StorageKind> = out.episodes.iter().map(|e| e.kind).collect();
    assert_eq!(kinds.len(), 2, "expected dual and single episodes");
    for e in &out.episodes {
        e.check().unwrap();
        assert_eq!(e.kind == StorageKind::Dual, e.reverse.is_some());
        assert_eq!(e.meta.library_hash, LIB.snapshot_hash());
        assert!(e.meta.plan.forward.iter().chain(&e.meta.plan.reverse).all(|s| LIB.contains(&s.demo_id)));
    }
}

use std::collections::BTreeSet;

#[test]
fn dual_store_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let (f, r, meta) = sample_meta();
    let mut store = DatasetStore::open(&path).unwrap();
    let id = store.store_dual(f.clone(), r.clone(), meta.clone()).unwrap();
    let back = read_episodes(&path, &EpisodeFilter::all()).unwrap().episodes;
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].id, id);
    assert_eq!(back[0].forward, f);
    assert_eq!(back[0].reverse.as_ref(), Some(&r));
    assert_eq!(back[0].meta, meta);
    let line = std::fs::read_to_string(&path).unwrap();
    assert_eq!(serde_json::to_string(&back[0]).unwrap() + "\n", line);
}

#[test]
fn empty_reverse_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (f, _, meta) = sample_meta();
    let mut store = DatasetStore::open(&dir.path().join("d.jsonl")).unwrap();
    let err = store.store_dual(f, Trajectory::default(), meta).unwrap_err();
    assert!(matches!(err, DatasetError::Precondition(_)));
    assert_eq!(store.next_id(), 0);
}

#[test]
fn single_storage_carries_no_reverse() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let (f, r, meta) = sample_meta();
    let mut store = DatasetStore::open(&path).unwrap();
    store.store_single(f.clone(), meta.clone()).unwrap();
    let err = store.append(StorageKind::Single, f, Some(r), meta).unwrap_err();
    assert!(matches!(err, DatasetError::Precondition(_)));
    let eps = read_episodes(&path, &EpisodeFilter::all()).unwrap().episodes;
    assert_eq!(eps.len(), 1);
    assert!(eps[0].reverse.is_none());
    assert!(!std::fs::read_to_string(&path).unwrap().contains("\"reverse\":{"));
}

#[test]
fn empty_forward_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, meta) = sample_meta();
    let mut store = DatasetStore::open(&dir.path().join("d.jsonl")).unwrap();
    assert!(store.store_single(Trajectory::default(), meta).is_err());
}

#[test]
fn hundred_dual_stores_get_increasing_ids_across_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let (f, r, meta) = sample_meta();
    let mut ids = Vec::new();
    for chunk in 0..2 {
        let mut store = DatasetStore::open(&path).unwrap();
        assert_eq!(store.next_id(), chunk * 50);
        for _ in 0..50 {
            ids.push(store.store_dual(f.clone(), r.clone(), meta.clone()).unwrap());
        }
    }
    assert_eq!(ids, (0..100).collect::<Vec<u64>>());
}

#[test]
fn filters_select_by_kind_task_and_id() {
    let all = read_episodes(&campaign_path(), &EpisodeFilter::all()).unwrap().episodes;
    let dual = read_episodes(&campaign_path(), &EpisodeFilter { kind: Some(StorageKind::Dual), ..EpisodeFilter::all() })
        .unwrap()
        .episodes;
    assert!(dual.iter().all(|e| e.kind == StorageKind::Dual));
    assert_eq!(dual.len(), all.iter().filter(|e| e.kind == StorageKind::Dual).count());
    let none = read_episodes(&campaign_path(), &EpisodeFilter { task: Some("pick_ball".into()), ..EpisodeFilter::all() })
        .unwrap()
        .episodes;
    assert!(none.is_empty());
    let first_two =
        read_episodes(&campaign_path(), &EpisodeFilter { ids: Some(0..=1), ..EpisodeFilter::all() }).unwrap().episodes;
    assert_eq!(first_two.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn truncated_tail_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let text = std::fs::read_to_string(campaign_path()).unwrap();
    let k = text.lines().count();
    let cut = text.len() - 40;
    std::fs::write(&path, &text[..cut]).unwrap();
    let out = read_episodes(&path, &EpisodeFilter::all()).unwrap();
    assert_eq!(out.episodes.len(), k - 1);
    assert_eq!(out.corrupt.len(), 1);
    assert_eq!(out.corrupt[0].line, k);
    assert_eq!(out.corrupt[0].offset, text.lines().take(k - 1).map(|l| l.len() + 1).sum::<usize>());

    // Appending after a torn tail keeps the new record readable.
    let (f, r, meta) = sample_meta();
    let mut store = DatasetStore::open(&path).unwrap();
    let id = store.store_dual(f, r, meta).unwrap();
    let out = read_episodes(&path, &EpisodeFilter::all()).unwrap();
    assert_eq!(out.episodes.len(), k);
    assert_eq!(out.episodes.last().unwrap().id, id);
    assert_eq!(out.corrupt.len(), 1);
}

#[test]
fn garbage_lines_do_not_hide_neighbours() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let text = std::fs::read_to_string(campaign_path()).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.insert(1, "{\"schema_version\": 1}");
    let mut file = std::fs::File::create(&path).unwrap();
    for l in &lines {
        writeln!(file, "{l}").unwrap();
    }
    let out = read_episodes(&path, &EpisodeFilter::all()).unwrap();
    assert_eq!(out.episodes.len(), lines.len() - 1);
    assert_eq!(out.corrupt[0].line, 2);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_episodes(Path::new("/nonexistent/none.jsonl"), &EpisodeFilter::all()).unwrap_err();
    assert!(matches!(err, DatasetError::Io { .. }));
}

#[test]
fn every_campaign_episode_replays_in_agreement() {
    let reg = TemplateRegistry::builtin();
    for e in read_episodes(&campaign_path(), &EpisodeFilter::all()).unwrap().episodes {
        let report = replay(&e, &reg, None).unwrap();
        assert!(report.is_exact(), "{report:?}");
        if e.kind == StorageKind::Dual {
            assert_eq!(report.reset_restored, Some(true));
        }
    }
}

#[test]
fn wrong_seed_replay_reports_deltas() {
    let reg = TemplateRegistry::builtin();
    let e = read_episodes(&campaign_path(), &EpisodeFilter::all())
        .unwrap()
        .episodes
        .into_iter()
        .find(|e| e.meta.spawn.is_some())
        .expect("a freshly spawned episode");
    let seed = e.meta.spawn.as_ref().unwrap().seed;
    let report = replay(&e, &reg, Some(seed.wrapping_add(1))).unwrap();
    assert!(!report.pose_deltas.is_empty());
    assert!(report.pose_deltas.iter().all(|d| d.delta > 0.0));
    assert!(!report.is_exact());
}

#[test]
fn unknown_template_cannot_replay() {
    let mut e = read_episodes(&campaign_path(), &EpisodeFilter::all()).unwrap().episodes.remove(0);
    e.meta.initial_world.template = "vanished".into();
    let err = replay(&e, &TemplateRegistry::builtin(), None).unwrap_err();
    assert!(matches!(err, DatasetError::MissingTemplate(t) if t == "vanished"));
}

#[test]
fn content_hash_tracks_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    std::fs::write(&a, b"x").unwrap();
    assert_eq!(content_hash(&a).unwrap(), "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever mix of kinds is appended, reading returns the same kinds with strictly increasing ids.
    #[test]
    fn append_read_preserves_kinds(kinds in proptest::collection::vec(any::<bool>(), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let (f, r, meta) = sample_meta();
        let mut store = DatasetStore::open(&path).unwrap();
        for dual in &kinds {
            if *dual {
                store.store_dual(f.clone(), r.clone(), meta.clone()).unwrap();
            } else {
                store.store_single(f.clone(), meta.clone()).unwrap();
            }
        }
        let eps = read_episodes(&path, &EpisodeFilter::all()).unwrap().episodes;
        prop_assert_eq!(eps.iter().map(|e| e.kind == StorageKind::Dual).collect::<Vec<_>>(), kinds);
        prop_assert!(eps.windows(2).all(|w| w[0].id < w[1].id));
    }
}
