use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{pose_distance, transform_points, CloudPoint};
use crate::library::{DemonstrationStep, ObjectDescriptor, Provenance, ShapeClass, SkillVerb};
use crate::sim::{render_point_cloud, spawn_scene, TemplateRegistry};

fn bar_cloud() -> PointCloud {
    let mut pts = Vec::new();
    for i in 0..30 {
        let reps = if i < 8 { 3 } else { 1 };
        for r in 0..reps {
            pts.push(CloudPoint { position: Vec3::new(0.1 + 0.002 * i as f64, 0.001 * r as f64, 0.02), label: 1 });
        }
    }
    pts.push(CloudPoint { position: Vec3::new(0.0, 0.0, 0.0), label: 0 });
    PointCloud::new(pts)
}

fn scripted_demo(n: usize) -> Demonstration {
    let cloud = bar_cloud();
    let steps = (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            DemonstrationStep {
                cloud: cloud.clone(),
                ee_pose: compose(
                    &Pose::from_translation(0.05 + 0.1 * s, 0.02 * s, 0.3 - 0.25 * s),
                    &Pose::from_yaw(0.3 * s),
                ),
                gripper: if i + 2 >= n { Gripper::Closed } else { Gripper::Open },
            }
        })
        .collect();
    Demonstration {
        id: "bar".into(),
        skill_verb: SkillVerb::Pick,
        target: ObjectDescriptor::new("bar", ShapeClass::Cuboid),
        object_ids: vec![1],
        steps,
        provenance: Provenance::Seed,
    }
}

fn obs_from(cloud: PointCloud) -> Observation {
    Observation { cloud, ee_pose: Pose::from_translation(0.0, 0.0, 0.35), gripper: Gripper::Open }
}

fn reference_factory(a: &ActionSequence) -> Box<dyn GradientPredictor> {
    Box::new(reference_predictor(a))
}

fn seq(v: &[f64]) -> ActionSequence {
    ActionSequence::from_vector(v).unwrap()
}

fn graph_with(actions: ActionSequence) -> PolicyGraph {
    let demo = scripted_demo(10);
    build_graph(&demo, &obs_from(bar_cloud()), actions).unwrap()
}

fn offset_sequence(h: usize, d: f64) -> (ActionSequence, ActionSequence) {
    let a_star = ActionSequence {
        steps: (0..h)
            .map(|i| ActionStep { ee_pose: Pose::from_translation(0.01 * i as f64, 0.0, 0.2), gripper_logit: -1.0 })
            .collect(),
    };
    let mut v = a_star.to_vector();
    v[0] += d;
    (a_star, seq(&v))
}

#[test]
fn graph_node_count_is_context_plus_one_plus_horizon() {
    let (_, a) = offset_sequence(8, 0.0);
    let g = graph_with(a);
    assert_eq!(g.node_count(), 19);
    assert_eq!(g.edges.iter().filter(|e| e.kind == EdgeKind::Temporal).count(), 9);
    assert_eq!(g.edges.iter().filter(|e| e.kind == EdgeKind::Cross).count(), 10);
    assert_eq!(g.edges.iter().filter(|e| e.kind == EdgeKind::Conditioning).count(), 8);
}

#[test]
fn graph_is_deterministic() {
    let (_, a) = offset_sequence(8, 0.0);
    assert_eq!(graph_with(a.clone()), graph_with(a));
}

#[test]
fn graph_rejects_empty_inputs() {
    let (_, a) = offset_sequence(8, 0.0);
    let mut demo = scripted_demo(4);
    assert_eq!(build_graph(&demo, &obs_from(PointCloud::new(vec![])), a.clone()), Err(PolicyError::EmptyCloud));
    demo.steps.clear();
    assert_eq!(build_graph(&demo, &obs_from(bar_cloud()), a), Err(PolicyError::EmptyDemo));
}

#[test]
fn masked_observation_ignores_distractor_poses() {
    let reg = TemplateRegistry::builtin();
    let w = spawn_scene(&reg, "push_block_distractors", 3).unwrap();
    let block = w.object_by_name("yellow_block").unwrap().id;
    let can = w.object_by_name("soda_can").unwrap().id;
    let mask: BTreeSet<u32> = [block].into();
    let mut moved = w.clone();
    moved.objects.get_mut(&can).unwrap().pose = moved.objects[&can].pose.translated(Vec3::new(-0.05, 0.03, 0.0));
    let obs_a = obs_from(render_point_cloud(&w, Some(&mask)).unwrap());
    let obs_b = obs_from(render_point_cloud(&moved, Some(&mask)).unwrap());
    let (_, a) = offset_sequence(8, 0.0);
    let demo = scripted_demo(6);
    let ga = build_graph(&demo, &obs_a, a.clone()).unwrap();
    let gb = build_graph(&demo, &obs_b, a).unwrap();
    assert_eq!(ga.observation, gb.observation);

    // Unmasked renders differ, so the equality above is not vacuous.
    let full_a = obs_from(render_point_cloud(&w, None).unwrap());
    let full_b = obs_from(render_point_cloud(&moved, None).unwrap());
    assert_ne!(full_a.cloud, full_b.cloud);

    let sched = DiffusionSchedule::default();
    let run = |o: &Observation| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        generate_actions(&demo, o, &sched, &reference_factory, &mut rng, 8, GripperMode::Diffuse).unwrap().actions
    };
    assert_eq!(run(&obs_a), run(&obs_b));
}

#[test]
fn warp_is_identity_for_unmoved_object() {
    let demo = scripted_demo(10);
    let a = warp_reference(&demo, &obs_from(bar_cloud()), 8).unwrap();
    assert_eq!(a.steps[0].ee_pose, demo.steps[0].ee_pose);
    assert_eq!(a.steps[7].ee_pose, demo.steps[9].ee_pose);
    assert_eq!(a.steps[7].gripper_logit, 1.0);
    assert_eq!(a.steps[0].gripper_logit, -1.0);
}

#[test]
fn warp_follows_translation() {
    let demo = scripted_demo(10);
    let base = warp_reference(&demo, &obs_from(bar_cloud()), 8).unwrap();
    let shifted = transform_points(&bar_cloud(), &Pose::from_translation(0.1, 0.0, 0.0));
    let a = warp_reference(&demo, &obs_from(shifted), 8).unwrap();
    for (x, y) in a.steps.iter().zip(&base.steps) {
        let d = x.ee_pose.translation() - y.ee_pose.translation();
        assert!((d - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-9);
        assert!(pose_distance(&x.ee_pose, &y.ee_pose).1 < 1e-9);
    }
}

#[test]
fn warp_follows_yaw_about_object() {
    let demo = scripted_demo(10);
    let base = warp_reference(&demo, &obs_from(bar_cloud()), 8).unwrap();
    let c = estimate_object_frame(&bar_cloud()).unwrap().translation();
    // Rotate the cloud by 90 degrees about the object centroid.
    let motion = compose(
        &Pose::from_translation(c.x, c.y, c.z),
        &compose(&Pose::from_yaw(FRAC_PI_2), &Pose::from_translation(-c.x, -c.y, -c.z)),
    );
    let a = warp_reference(&demo, &obs_from(transform_points(&bar_cloud(), &motion)), 8).unwrap();
    for (x, y) in a.steps.iter().zip(&base.steps) {
        // Independent oracle: rotate the waypoint offset from the centroid by hand.
        let off = y.ee_pose.translation() - c;
        let expected_t = c + Vec3::new(-off.y, off.x, off.z);
        let expected = Pose::new(expected_t, Pose::from_yaw(FRAC_PI_2).rotation() * y.ee_pose.rotation());
        let (dt, dr) = pose_distance(&x.ee_pose, &expected);
        assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
    }
}

#[test]
fn warp_requires_target_in_cloud() {
    let demo = scripted_demo(5);
    let bg = PointCloud::new(vec![CloudPoint { position: Vec3::zeros(), label: 0 }]);
    assert_eq!(warp_reference(&demo, &obs_from(bg), 8), Err(PolicyError::TargetAbsent("observation")));
}

#[test]
fn resampling_is_uniform_in_arc_length() {
    let demo = scripted_demo(10);
    let a = warp_reference(&demo, &obs_from(bar_cloud()), 8).unwrap();
    let gaps: Vec<f64> =
        a.steps.windows(2).map(|w| (w[1].ee_pose.translation() - w[0].ee_pose.translation()).norm()).collect();
    for g in &gaps {
        assert!((g - gaps[0]).abs() < 1e-9);
    }
}

#[test]
fn reference_predictor_examples() {
    let (a_star, a) = offset_sequence(8, 0.3);
    let p = reference_predictor(&a_star);
    assert!(p.predict(&graph_with(a_star.clone()), 5).iter().all(|e| *e == 0.0));
    let g = graph_with(a.clone());
    assert_eq!(p.predict(&g, 1), p.predict(&g, 16));
    let norm = p.predict(&g, 3).iter().map(|e| e * e).sum::<f64>().sqrt();
    assert!((norm - a.distance(&a_star)).abs() < 1e-12);
}

struct Zero;
impl GradientPredictor for Zero {
    fn predict(&self, graph: &PolicyGraph, _k: usize) -> Vec<f64> {
        vec![0.0; graph.actions.horizon() * ACTION_DIM]
    }
}

struct Bad;
impl GradientPredictor for Bad {
    fn predict(&self, graph: &PolicyGraph, _k: usize) -> Vec<f64> {
        vec![f64::NAN; graph.actions.horizon() * ACTION_DIM]
    }
}

#[test]
fn zero_gradient_without_noise_is_identity() {
    let (_, a) = offset_sequence(8, 0.1);
    let g = graph_with(a.clone());
    let s = DiffusionSchedule::linear(4, 1.0, 0.5, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let next = denoise_step(&g, 3, &s, &Zero, &mut rng).unwrap();
    assert_eq!(next.actions.to_vector(), a.to_vector());
    assert_eq!(next.context, g.context);
    assert_eq!(next.observation, g.observation);
}

#[test]
fn zero_gradient_scales_by_alpha() {
    let (_, a) = offset_sequence(8, 0.1);
    let g = graph_with(a.clone());
    let s = DiffusionSchedule::linear(2, 0.5, 0.5, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let next = denoise_step(&g, 1, &s, &Zero, &mut rng).unwrap();
    for (x, y) in next.actions.to_vector().iter().zip(a.to_vector()) {
        assert!((x - 0.5 * y).abs() < 1e-12);
    }
}

#[test]
fn reference_step_halves_distance() {
    let (a_star, a) = offset_sequence(8, 0.2);
    let s = DiffusionSchedule::linear(4, 1.0, 0.5, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let next = denoise_step(&graph_with(a.clone()), 2, &s, &reference_predictor(&a_star), &mut rng).unwrap();
    let d0 = a.distance(&a_star);
    assert!((next.actions.distance(&a_star) - d0 / 2.0).abs() < 1e-12);
}

#[test]
fn denoise_step_errors() {
    let (_, a) = offset_sequence(8, 0.0);
    let g = graph_with(a);
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(denoise_step(&g, 0, &s, &Zero, &mut rng).unwrap_err(), PolicyError::StepOutOfRange { k: 0, max: 16 });
    assert_eq!(denoise_step(&g, 17, &s, &Zero, &mut rng).unwrap_err(), PolicyError::StepOutOfRange { k: 17, max: 16 });
    assert_eq!(denoise_step(&g, 2, &s, &Bad, &mut rng).unwrap_err(), PolicyError::NonFinite("prediction"));
}

#[test]
fn denoise_step_is_reproducible() {
    let (a_star, a) = offset_sequence(8, 0.2);
    let s = DiffusionSchedule::default();
    let p = reference_predictor(&a_star);
    let g = graph_with(a);
    let run = |seed| denoise_step(&g, 16, &s, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().actions.to_vector();
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn schedule_validation() {
    assert!(DiffusionSchedule::default().validate().is_ok());
    let d = DiffusionSchedule::default();
    assert_eq!(d.steps(), 16);
    assert_eq!(d.sigma[0], 0.0);
    assert!((d.sigma[15] - 0.01 * 15.0 / 16.0).abs() < 1e-15);
    assert!(DiffusionSchedule::new(vec![], vec![], vec![]).is_err());
    assert!(DiffusionSchedule::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
    assert!(DiffusionSchedule::new(vec![1.0], vec![1.5], vec![0.0]).is_err());
    assert!(DiffusionSchedule::new(vec![1.0], vec![1.0], vec![0.1]).is_err());
    assert!(DiffusionSchedule::new(vec![f64::NAN], vec![1.0], vec![0.0]).is_err());
    assert!(DiffusionSchedule::new(vec![1.0, 1.0], vec![1.0], vec![0.0]).is_err());
}

#[test]
fn sixteen_steps_converge_within_tolerance() {
    let demo = scripted_demo(10);
    let obs = obs_from(bar_cloud());
    let s = DiffusionSchedule::linear(16, 1.0, 0.5, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let gen = generate_actions(&demo, &obs, &s, &reference_factory, &mut rng, 8, GripperMode::Diffuse).unwrap();
    // Contraction bound: initial distance times 0.5^16.
    let bound = gen.trace[0].distance * 0.5f64.powi(16);
    assert!(gen.trace.last().unwrap().distance <= bound * (1.0 + 1e-9) + 1e-12);
    for (x, y) in gen.actions.steps.iter().zip(&gen.reference.steps) {
        let (dt, dr) = pose_distance(&x.ee_pose, &y.ee_pose);
        assert!(dt <= 1e-3 && dr <= 1e-3, "{dt} {dr}");
        assert_eq!(x.gripper(), y.gripper());
    }
    assert_eq!(gen.trace.len(), 17);
}

#[test]
fn single_full_step_jumps_to_reference() {
    let demo = scripted_demo(10);
    let obs = obs_from(bar_cloud());
    let s = DiffusionSchedule::linear(1, 1.0, 1.0, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = generate_actions(&demo, &obs, &s, &reference_factory, &mut rng, 8, GripperMode::Diffuse).unwrap();
    // Exact up to one rounding of a - (a - a*).
    for (x, y) in gen.actions.to_vector().iter().zip(gen.reference.to_vector()) {
        assert!((x - y).abs() <= 1e-12, "{x} {y}");
    }
}

#[test]
fn small_noise_seeds_differ_but_converge() {
    let demo = scripted_demo(10);
    let obs = obs_from(bar_cloud());
    let s = DiffusionSchedule::linear(16, 1.0, 0.5, 1e-4 * 16.0 / 15.0).unwrap();
    assert!(s.sigma.iter().all(|v| *v <= 1e-4 + 1e-18));
    let mut outputs = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = generate_actions(&demo, &obs, &s, &reference_factory, &mut rng, 8, GripperMode::Diffuse).unwrap();
        for (x, y) in gen.actions.steps.iter().zip(&gen.reference.steps) {
            let (dt, dr) = pose_distance(&x.ee_pose, &y.ee_pose);
            assert!(dt <= 1e-3 && dr <= 1e-3);
        }
        outputs.push(gen.actions.to_vector());
    }
    assert_ne!(outputs[0], outputs[1]);
}

#[test]
fn copy_mode_takes_reference_gripper() {
    let demo = scripted_demo(10);
    let obs = obs_from(bar_cloud());
    let s = DiffusionSchedule::linear(2, 1.0, 0.5, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gen = generate_actions(&demo, &obs, &s, &reference_factory, &mut rng, 8, GripperMode::Copy).unwrap();
    for (x, y) in gen.actions.steps.iter().zip(&gen.reference.steps) {
        assert_eq!(x.gripper_logit, y.gripper_logit);
    }
}

#[test]
fn trace_table_has_header_and_rows() {
    let rows = vec![TraceRow { k: 2, distance: 1.0 }, TraceRow { k: 1, distance: 0.5 }];
    let t = trace_table(&rows);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "k\tdistance");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1\t5.0"));
}

#[test]
fn bad_vectors_are_rejected() {
    assert_eq!(ActionSequence::from_vector(&[0.0; 6]), Err(PolicyError::BadVectorLength(6)));
    assert_eq!(ActionSequence::from_vector(&[]), Err(PolicyError::BadVectorLength(0)));
    let mut v = [0.0; 7];
    v[2] = f64::INFINITY;
    assert_eq!(ActionSequence::from_vector(&v), Err(PolicyError::NonFinite("action vector")));
}

fn window_demo(points: &[(f64, f64, f64, bool, u32)]) -> Demonstration {
    let mut d = scripted_demo(2);
    d.steps = points
        .iter()
        .map(|&(x, y, z, closed, label)| DemonstrationStep {
            cloud: PointCloud::new(vec![CloudPoint { position: Vec3::new(0.1, 0.0, 0.02), label }]),
            ee_pose: Pose::from_translation(x, y, z),
            gripper: if closed { Gripper::Closed } else { Gripper::Open },
        })
        .collect();
    d
}

#[test]
fn windows_split_at_turns_gripper_and_attention() {
    let d = window_demo(&[
        (0.0, 0.0, 0.3, false, 1),
        (0.0, 0.0, 0.2, false, 1),
        (0.0, 0.0, 0.1, false, 1),
        (0.0, 0.0, 0.1, true, 1),
        (0.0, 0.0, 0.2, true, 1),
        (0.1, 0.0, 0.2, true, 1),
        (0.2, 0.0, 0.2, true, 2),
        (0.2, 0.0, 0.1, false, 2),
    ]);
    assert_eq!(split_windows(&d), vec![(0, 3), (3, 4), (4, 5), (6, 7)]);
}

#[test]
fn straight_demo_is_one_window() {
    let d = window_demo(&[(0.0, 0.0, 0.3, false, 1), (0.0, 0.0, 0.2, false, 1), (0.0, 0.0, 0.1, false, 1)]);
    assert_eq!(split_windows(&d), vec![(0, 2)]);
}

proptest! {
    #[test]
    fn vector_round_trip(vals in prop::collection::vec(-3.0f64..3.0, 7 * 3)) {
        let mut v = vals.clone();
        // Keep rotation vectors inside the open ball of radius pi.
        for c in v.chunks_mut(7) {
            let n = (c[3] * c[3] + c[4] * c[4] + c[5] * c[5]).sqrt();
            if n >= PI - 1e-3 {
                let s = (PI - 1e-3) / n * 0.99;
                c[3] *= s; c[4] *= s; c[5] *= s;
            }
        }
        let a = seq(&v);
        let back = a.to_vector();
        for (x, y) in back.iter().zip(&v) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in seq(&back).to_vector().iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_contraction_is_monotone(gamma in 0.05f64..=1.0, seed in 0u64..1000) {
        let demo = scripted_demo(6);
        let obs = obs_from(bar_cloud());
        let s = DiffusionSchedule::linear(8, 1.0, gamma, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = generate_actions(&demo, &obs, &s, &reference_factory, &mut rng, 8, GripperMode::Diffuse).unwrap();
        for w in gen.trace.windows(2) {
            prop_assert!(w[1].distance <= w[0].distance + 1e-12);
        }
    }
}
