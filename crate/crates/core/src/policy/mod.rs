//! In-context action generation: graph assembly over demonstration context, the
//! current observation and future actions, plus the iterative denoising loop.

mod frame;

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, invert, PointCloud, Pose, Vec3};
use crate::library::{Demonstration, Gripper};

pub use frame::{estimate_object_frame, frame_of_points, ANISOTROPY_RATIO, SKEW_THRESHOLD};

pub const DEFAULT_HORIZON: usize = 8;
pub const ACTION_DIM: usize = 7;
/// Heading change (degrees) that splits a demonstration into separate windows.
pub const WINDOW_TURN_DEG: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("demonstration has no steps")]
    EmptyDemo,
    #[error("observation cloud is empty")]
    EmptyCloud,
    #[error("no foreground object in the {0} cloud")]
    TargetAbsent(&'static str),
    #[error("action vector length {0} is not a positive multiple of 7")]
    BadVectorLength(usize),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step index {k} outside 1..={max}")]
    StepOutOfRange { k: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionStep {
    pub ee_pose: Pose,
    pub gripper_logit: f64,
}

impl ActionStep {
    pub fn gripper(&self) -> Gripper {
        if self.gripper_logit > 0.0 {
            Gripper::Closed
        } else {
            Gripper::Open
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSequence {
    pub steps: Vec<ActionStep>,
}

fn logit(g: Gripper) -> f64 {
    if g.is_closed() {
        1.0
    } else {
        -1.0
    }
}

impl ActionSequence {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Per step: translation, rotation vector, gripper logit.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ACTION_DIM * self.steps.len());
        for s in &self.steps {
            let t = s.ee_pose.translation();
            let r = s.ee_pose.rotation_vector();
            v.extend_from_slice(&[t.x, t.y, t.z, r.x, r.y, r.z, s.gripper_logit]);
        }
        v
    }

    pub fn from_vector(v: &[f64]) -> Result<Self, PolicyError> {
        if v.is_empty() || !v.len().is_multiple_of(ACTION_DIM) {
            return Err(PolicyError::BadVectorLength(v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite("action vector"));
        }
        let steps = v
            .chunks_exact(ACTION_DIM)
            .map(|c| ActionStep {
                ee_pose: Pose::from_rotation_vector(Vec3::new(c[0], c[1], c[2]), Vec3::new(c[3], c[4], c[5])),
                gripper_logit: c[6],
            })
            .collect();
        Ok(Self { steps })
    }

    pub fn distance(&self, other: &ActionSequence) -> f64 {
        let a = self.to_vector();
        let b = other.to_vector();
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }
}

/// Current policy input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cloud: PointCloud,
    pub ee_pose: Pose,
    pub gripper: Gripper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub centroid: [f64; 3],
    pub point_count: usize,
    pub ee_pose: Pose,
    pub gripper: f64,
}

impl NodeFeatures {
    fn from_cloud(cloud: &PointCloud, ee_pose: Pose, gripper: Gripper) -> Self {
        let fg: Vec<Vec3> = cloud.foreground().map(|p| p.position).collect();
        let pts: Vec<Vec3> = if fg.is_empty() { cloud.points.iter().map(|p| p.position).collect() } else { fg };
        let c = if pts.is_empty() {
            Vec3::zeros()
        } else {
            pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64
        };
        Self { centroid: [c.x, c.y, c.z], point_count: pts.len(), ee_pose, gripper: logit(gripper) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Temporal,
    Cross,
    Conditioning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: usize,
    pub to: usize,
}

/// Node order: context steps, then the observation, then the action nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGraph {
    pub context: Vec<NodeFeatures>,
    pub observation: NodeFeatures,
    pub actions: ActionSequence,
    pub edges: Vec<Edge>,
}

impl PolicyGraph {
    pub fn node_count(&self) -> usize {
        self.context.len() + 1 + self.actions.horizon()
    }

    fn topology(t: usize, h: usize) -> Vec<Edge> {
        let obs = t;
        let mut edges = Vec::with_capacity(t.saturating_sub(1) + t + h);
        edges.extend((1..t).map(|i| Edge { kind: EdgeKind::Temporal, from: i - 1, to: i }));
        edges.extend((0..t).map(|i| Edge { kind: EdgeKind::Cross, from: i, to: obs }));
        edges.extend((0..h).map(|j| Edge { kind: EdgeKind::Conditioning, from: obs, to: obs + 1 + j }));
        edges
    }

    fn with_actions(&self, actions: ActionSequence) -> Self {
        let mut g = self.clone();
        if actions.horizon() != self.actions.horizon() {
            g.edges = Self::topology(self.context.len(), actions.horizon());
        }
        g.actions = actions;
        g
    }
}

pub fn build_graph(
    demo: &Demonstration,
    obs: &Observation,
    actions: ActionSequence,
) -> Result<PolicyGraph, PolicyError> {
    if demo.steps.is_empty() {
        return Err(PolicyError::EmptyDemo);
    }
    if obs.cloud.is_empty() {
        return Err(PolicyError::EmptyCloud);
    }
    let context = demo
        .steps
        .iter()
        .map(|s| NodeFeatures::from_cloud(&s.cloud, s.ee_pose, s.gripper))
        .collect::<Vec<_>>();
    let observation = NodeFeatures::from_cloud(&obs.cloud, obs.ee_pose, obs.gripper);
    let edges = PolicyGraph::topology(context.len(), actions.horizon());
    Ok(PolicyGraph { context, observation, actions, edges })
}

fn resample(demo: &Demonstration, horizon: usize) -> Vec<ActionStep> {
    let steps = &demo.steps;
    let last = steps.len() - 1;
    let at = |i: usize| ActionStep { ee_pose: steps[i].ee_pose, gripper_logit: logit(steps[i].gripper) };
    if last == 0 || horizon == 1 {
        return vec![at(last); horizon];
    }
    let mut cum = vec![0.0; steps.len()];
    for i in 1..steps.len() {
        cum[i] = cum[i - 1] + (steps[i].ee_pose.translation() - steps[i - 1].ee_pose.translation()).norm();
    }
    let total = cum[last];
    (0..horizon)
        .map(|j| {
            if j == horizon - 1 {
                return at(last);
            }
            if total <= 1e-12 {
                return at((j * last) / (horizon - 1));
            }
            let s = total * j as f64 / (horizon - 1) as f64;
            let i = (1..=last).find(|&i| cum[i] > s).unwrap_or(last);
            let seg = cum[i] - cum[i - 1];
            let u = if seg > 0.0 { (s - cum[i - 1]) / seg } else { 0.0 };
            let (a, b) = (&steps[i - 1].ee_pose, &steps[i].ee_pose);
            let t = a.translation() + (b.translation() - a.translation()) * u;
            let r = a.rotation().try_slerp(&b.rotation(), u, 1e-9).unwrap_or(a.rotation());
            ActionStep { ee_pose: Pose::new(t, r), gripper_logit: logit(steps[i - 1].gripper) }
        })
        .collect()
}

/// Demonstration trajectory resampled to `horizon` steps and carried rigidly from the
/// demonstrated object frame to the observed one.
pub fn warp_reference(demo: &Demonstration, obs: &Observation, horizon: usize) -> Result<ActionSequence, PolicyError> {
    let first = demo.steps.first().ok_or(PolicyError::EmptyDemo)?;
    if horizon == 0 {
        return Err(PolicyError::BadVectorLength(0));
    }
    let demo_frame = estimate_object_frame(&first.cloud).ok_or(PolicyError::TargetAbsent("demonstration"))?;
    let cur_frame = estimate_object_frame(&obs.cloud).ok_or(PolicyError::TargetAbsent("observation"))?;
    let rel = if demo_frame == cur_frame { Pose::identity() } else { compose(&cur_frame, &invert(&demo_frame)) };
    let steps = resample(demo, horizon)
        .into_iter()
        .map(|s| ActionStep { ee_pose: compose(&rel, &s.ee_pose), gripper_logit: s.gripper_logit })
        .collect();
    Ok(ActionSequence { steps })
}

pub trait GradientPredictor {
    fn predict(&self, graph: &PolicyGraph, k: usize) -> Vec<f64>;
}

/// Gradient field pulling the action nodes toward a fixed reference sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePredictor {
    target: Vec<f64>,
}

impl GradientPredictor for ReferencePredictor {
    fn predict(&self, graph: &PolicyGraph, _k: usize) -> Vec<f64> {
        graph.actions.to_vector().iter().zip(&self.target).map(|(a, t)| a - t).collect()
    }
}

pub fn reference_predictor(a_star: &ActionSequence) -> ReferencePredictor {
    ReferencePredictor { target: a_star.to_vector() }
}

/// Step size, gradient scale and noise level per iteration `k = 1..=K` (index `k - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(alpha: Vec<f64>, gamma: Vec<f64>, sigma: Vec<f64>) -> Result<Self, PolicyError> {
        let s = Self { alpha, gamma, sigma };
        s.validate()?;
        Ok(s)
    }

    /// Constant `alpha`/`gamma` with `sigma_k = sigma0 (k - 1) / K`.
    pub fn linear(k: usize, alpha: f64, gamma: f64, sigma0: f64) -> Result<Self, PolicyError> {
        let sigma = (1..=k).map(|i| sigma0 * (i - 1) as f64 / k as f64).collect();
        Self::new(vec![alpha; k], vec![gamma; k], sigma)
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let k = self.alpha.len();
        let bad = |m: &str| Err(PolicyError::InvalidSchedule(m.to_string()));
        if k == 0 {
            return bad("K must be positive");
        }
        if self.gamma.len() != k || self.sigma.len() != k {
            return bad("coefficient lists differ in length");
        }
        if self.alpha.iter().chain(&self.gamma).chain(&self.sigma).any(|v| !v.is_finite()) {
            return bad("coefficients must be finite");
        }
        if self.gamma.iter().any(|g| !(*g > 0.0 && *g <= 1.0)) {
            return bad("gamma_k must lie in (0, 1]");
        }
        if self.sigma.iter().any(|s| *s < 0.0) {
            return bad("sigma_k must be non-negative");
        }
        if self.sigma[0] != 0.0 {
            return bad("sigma_1 must be 0");
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(16, 1.0, 0.5, 0.01).expect("default schedule is valid")
    }
}

/// One reverse step: `a^{k-1} = alpha_k (a^k - gamma_k eps) + sigma_k z`.
pub fn denoise_step<R: Rng + ?Sized>(
    graph: &PolicyGraph,
    k: usize,
    schedule: &DiffusionSchedule,
    predictor: &dyn GradientPredictor,
    rng: &mut R,
) -> Result<PolicyGraph, PolicyError> {
    let max = schedule.steps();
    if k == 0 || k > max {
        return Err(PolicyError::StepOutOfRange { k, max });
    }
    let eps = predictor.predict(graph, k);
    let v = graph.actions.to_vector();
    if eps.len() != v.len() {
        return Err(PolicyError::BadVectorLength(eps.len()));
    }
    if eps.iter().any(|e| !e.is_finite()) {
        return Err(PolicyError::NonFinite("prediction"));
    }
    let (alpha, gamma, sigma) = (schedule.alpha[k - 1], schedule.gamma[k - 1], schedule.sigma[k - 1]);
    let next: Vec<f64> = v
        .iter()
        .zip(&eps)
        .map(|(a, e)| {
            let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            alpha * (a - gamma * e) + noise
        })
        .collect();
    Ok(graph.with_actions(ActionSequence::from_vector(&next)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GripperMode {
    /// Gripper logit is denoised like the pose coordinates.
    #[default]
    Diffuse,
    /// Gripper logits are taken from the warped reference.
    Copy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub actions: ActionSequence,
    pub reference: ActionSequence,
    /// Distance to the reference after reaching each `k`, from `K` down to 0.
    pub trace: Vec<TraceRow>,
}

pub fn trace_table(trace: &[TraceRow]) -> String {
    let mut out = String::from("k\tdistance\n");
    for row in trace {
        let _ = writeln!(out, "{}\t{:.12e}", row.k, row.distance);
    }
    out
}

pub fn generate_actions<R: Rng + ?Sized>(
    demo: &Demonstration,
    obs: &Observation,
    schedule: &DiffusionSchedule,
    predictor_factory: &dyn Fn(&ActionSequence) -> Box<dyn GradientPredictor>,
    rng: &mut R,
    horizon: usize,
    gripper_mode: GripperMode,
) -> Result<Generation, PolicyError> {
    schedule.validate()?;
    let reference = warp_reference(demo, obs, horizon)?;
    let predictor = predictor_factory(&reference);
    let noise: Vec<f64> = (0..ACTION_DIM * horizon).map(|_| rng.sample(StandardNormal)).collect();
    let mut graph = build_graph(demo, obs, ActionSequence::from_vector(&noise)?)?;
    let k_max = schedule.steps();
    let mut trace = vec![TraceRow { k: k_max, distance: graph.actions.distance(&reference) }];
    for k in (1..=k_max).rev() {
        graph = denoise_step(&graph, k, schedule, predictor.as_ref(), rng)?;
        trace.push(TraceRow { k: k - 1, distance: graph.actions.distance(&reference) });
    }
    let mut actions = graph.actions;
    if gripper_mode == GripperMode::Copy {
        for (a, r) in actions.steps.iter_mut().zip(&reference.steps) {
            a.gripper_logit = r.gripper_logit;
        }
    }
    Ok(Generation { actions, reference, trace })
}

/// Splits a demonstration into straight, single-gripper-state windows. Windows
/// share their boundary step, except at attention changes where the next window
/// starts at the first step observed under the new attention set.
pub fn split_windows(demo: &Demonstration) -> Vec<(usize, usize)> {
    let steps = &demo.steps;
    let n = steps.len();
    if n <= 1 {
        return vec![(0, n.saturating_sub(1))];
    }
    let labels: Vec<Vec<u32>> = steps.iter().map(|s| s.cloud.foreground_labels()).collect();
    let pos: Vec<Vec3> = steps.iter().map(|s| s.ee_pose.translation()).collect();
    let turn_cos = WINDOW_TURN_DEG.to_radians().cos();
    let mut windows = Vec::new();
    let mut start = 0;
    let mut heading: Option<Vec3> = None;
    for i in 1..n {
        if labels[i] != labels[i - 1] {
            windows.push((start, i - 1));
            start = i;
            heading = None;
            continue;
        }
        let d = pos[i] - pos[i - 1];
        let gripper_change = steps[i].gripper != steps[i - 1].gripper;
        let turned = d.norm() > 1e-9
            && heading.is_some_and(|h: Vec3| h.dot(&d.normalize()) < turn_cos)
            && i - 1 > start;
        if turned {
            windows.push((start, i - 1));
            start = i - 1;
        }
        if d.norm() > 1e-9 {
            heading = Some(d.normalize());
        }
        if gripper_change && i < n - 1 {
            windows.push((start, i));
            start = i;
            heading = None;
        }
    }
    windows.push((start, n - 1));
    windows
}

#[cfg(test)]
mod tests;
