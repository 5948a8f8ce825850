//! Scene grounding, forward planning with attention masks, simultaneous reverse
//! planning and last-in/first-out validation.

mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::library::{
    retrieve_ranked, AffordanceLibrary, ObjectDescriptor, ShapeClass, SimilarityWeights,
    SkillQuery, SkillVerb,
};
use crate::prompts::PromptSet;
use crate::sim::{Predicate, PredicateKind, Relatum, SceneDescription};

pub use crate::sim::PlanningMode;
pub use oracle::OracleReasoner;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundedItem {
    pub descriptor: ObjectDescriptor,
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GroundedScene {
    pub items: Vec<GroundedItem>,
}

impl GroundedScene {
    pub fn by_name(&self, name: &str) -> Option<&GroundedItem> {
        self.items.iter().find(|i| i.descriptor.name == name)
    }

    pub fn by_id(&self, id: u32) -> Option<&GroundedItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRef {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Table,
    Object(ObjectRef),
    Container(ObjectRef),
    Region(String),
}

impl Destination {
    pub fn object_id(&self) -> Option<u32> {
        match self {
            Destination::Object(o) | Destination::Container(o) => Some(o.id),
            _ => None,
        }
    }
}

/// An atomic action `(verb, subject, destination)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillAction {
    pub verb: SkillVerb,
    pub subject: ObjectRef,
    pub destination: Option<Destination>,
}

/// Natural-language form of an object name.
pub fn spoken(name: &str) -> String {
    name.replace('_', " ")
}

impl SkillAction {
    pub fn new(verb: SkillVerb, subject: ObjectRef, destination: Option<Destination>) -> Self {
        Self { verb, subject, destination }
    }

    /// Canonical command text for this action.
    pub fn describe(&self) -> String {
        let s = spoken(&self.subject.name);
        let place_phrase = |d: &Option<Destination>| match d {
            Some(Destination::Object(o)) => format!("on the {}", spoken(&o.name)),
            Some(Destination::Container(o)) => format!("into the {}", spoken(&o.name)),
            _ => "on the table".to_string(),
        };
        match self.verb {
            SkillVerb::Pick => format!("pick up the {s}"),
            SkillVerb::Place => format!("place the {s} {}", place_phrase(&self.destination)),
            SkillVerb::PushIn => match &self.destination {
                Some(Destination::Region(r)) => format!("push the {s} into the {}", spoken(r)),
                _ => format!("push the {s} in"),
            },
            SkillVerb::PushOut => format!("push the {s} out"),
            SkillVerb::Stack => match &self.destination {
                Some(Destination::Container(c)) => format!("put the {s} into the {}", spoken(&c.name)),
                _ => format!("stack the {s}"),
            },
            SkillVerb::Unstack => format!("put the {s} {}", place_phrase(&self.destination)),
            SkillVerb::Open => format!("open the {s}"),
            SkillVerb::Close => format!("close the {s}"),
            SkillVerb::Fold => format!("fold the {s}"),
            SkillVerb::Unfold => format!("unfold the {s}"),
        }
    }

    /// World predicate that holds after a successful execution, and whether it is negated.
    pub fn success_predicate(&self) -> (Predicate, bool) {
        let s = self.subject.id;
        let dest_relatum = |d: &Option<Destination>| match d {
            Some(Destination::Object(o)) | Some(Destination::Container(o)) => Relatum::Object(o.id),
            Some(Destination::Region(r)) => Relatum::Region(r.clone()),
            _ => Relatum::Table,
        };
        let p = |kind, rel| Predicate::new(kind, s, rel);
        match self.verb {
            SkillVerb::Pick => (p(PredicateKind::Held, None), false),
            SkillVerb::Place | SkillVerb::Unstack | SkillVerb::Stack => {
                let rel = dest_relatum(&self.destination);
                let kind = match (&self.destination, self.verb) {
                    (Some(Destination::Container(_)), _) => PredicateKind::In,
                    (Some(Destination::Object(_)), SkillVerb::Stack) => PredicateKind::StackedOn,
                    _ => PredicateKind::On,
                };
                (p(kind, Some(rel)), false)
            }
            SkillVerb::PushIn | SkillVerb::PushOut => (
                p(PredicateKind::InRegion, Some(dest_relatum(&self.destination))),
                self.verb == SkillVerb::PushOut,
            ),
            SkillVerb::Open | SkillVerb::Unfold => (p(PredicateKind::Open, None), false),
            SkillVerb::Close | SkillVerb::Fold => (p(PredicateKind::Closed, None), false),
        }
    }
}

impl fmt::Display for SkillAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}", self.verb, self.subject.name)?;
        match &self.destination {
            None => {}
            Some(Destination::Table) => write!(f, ", table")?,
            Some(Destination::Object(o)) | Some(Destination::Container(o)) => write!(f, ", {}", o.name)?,
            Some(Destination::Region(r)) => write!(f, ", {r}")?,
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subtask {
    pub action: SkillAction,
    pub demo_id: String,
    pub description: String,
    pub mask: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPlan {
    pub template: String,
    pub mode: PlanningMode,
    pub forward: Vec<Subtask>,
    pub reverse: Vec<Subtask>,
    pub scene: GroundedScene,
}

/// Backend-facing library listing entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub id: String,
    pub verb: SkillVerb,
    pub target: ObjectDescriptor,
}

pub fn library_entries(lib: &AffordanceLibrary) -> Vec<LibraryEntry> {
    lib.summary()
        .into_iter()
        .map(|(id, verb, target)| LibraryEntry { id, verb, target })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawGroundedItem {
    pub name: String,
    pub shape: String,
    #[serde(default)]
    pub id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawStep {
    pub verb: String,
    pub subject: String,
    #[serde(default)]
    pub destination: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
}

impl RawStep {
    /// Parses `"verb subject [destination]"`.
    pub fn parse(text: &str) -> Option<Self> {
        let mut parts = text.split_whitespace();
        let verb = parts.next()?.to_string();
        let subject = parts.next()?.to_string();
        let destination = parts.next().map(str::to_string);
        if parts.next().is_some() {
            return None;
        }
        Some(Self { verb, subject, destination, description: None })
    }
}

/// Untrusted plan as returned by a reasoner backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPlan {
    pub forward: Vec<RawStep>,
    #[serde(default)]
    pub reverse: Option<Vec<RawStep>>,
    #[serde(default)]
    pub mask: Vec<String>,
}

pub trait ReasonerBackend: Send {
    fn backend_id(&self) -> &str;
    fn ground(&mut self, prompt: &str, obs: &SceneDescription) -> Result<Vec<RawGroundedItem>, BackendError>;
    fn plan(
        &mut self,
        prompt: &str,
        obs: &SceneDescription,
        library: &[LibraryEntry],
    ) -> Result<RawPlan, BackendError>;
    /// Orders candidate demonstration ids, best first.
    fn rank(&mut self, query: &SkillQuery, candidates: &[LibraryEntry]) -> Result<Vec<String>, BackendError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("grounding violation: {0}")]
    Grounding(String),
    #[error("scene is empty")]
    EmptyScene,
    #[error("library is empty")]
    EmptyLibrary,
    #[error("no demonstration retrieved for {0}")]
    RetrievalEmpty(String),
    #[error("planning failed after {attempts} attempt(s): {reason}")]
    PlanningFailure { attempts: usize, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn inverse_skill(verb: SkillVerb) -> SkillVerb {
    verb.inverse()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifoViolation {
    /// 1-based reverse step index; 0 for a plan-level violation.
    pub step: usize,
    pub reason: String,
}

/// Checks that reverse step `j` undoes forward step `N - j + 1` (verb and subject).
pub fn validate_lifo(plan: &TaskPlan) -> Vec<LifoViolation> {
    lifo_violations(
        &plan.forward.iter().map(|s| &s.action).collect::<Vec<_>>(),
        &plan.reverse.iter().map(|s| &s.action).collect::<Vec<_>>(),
    )
}

pub fn lifo_violations(forward: &[&SkillAction], reverse: &[&SkillAction]) -> Vec<LifoViolation> {
    let n = forward.len();
    if n != reverse.len() {
        return vec![LifoViolation {
            step: 0,
            reason: format!("forward has {n} steps but reverse has {}", reverse.len()),
        }];
    }
    let mut out = Vec::new();
    for (j, r) in reverse.iter().enumerate() {
        let f = forward[n - 1 - j];
        let mut reasons = Vec::new();
        if r.verb != f.verb.inverse() {
            reasons.push(format!("{} does not invert forward step {} ({})", r.verb, n - j, f.verb));
        }
        if r.subject.id != f.subject.id {
            reasons.push(format!(
                "subject {} differs from forward step {} subject {}",
                r.subject.name,
                n - j,
                f.subject.name
            ));
        }
        if !reasons.is_empty() {
            out.push(LifoViolation { step: j + 1, reason: reasons.join("; ") });
        }
    }
    out
}

/// Where `subject` currently rests, as read from the scene tags.
fn origin_of(subject: &ObjectRef, obs: &SceneDescription) -> Option<Destination> {
    let entry = obs.object_by_id(subject.id)?;
    let support = entry.tags.iter().find_map(|t| t.strip_prefix("on:"))?;
    if support == "table" {
        return Some(Destination::Table);
    }
    let base = obs.object(support)?;
    let r = ObjectRef { id: base.id, name: base.name.clone() };
    Some(if base.has_tag("container") { Destination::Container(r) } else { Destination::Object(r) })
}

/// The action undoing `action`, given the scene observed before it runs.
pub fn inverse_action(action: &SkillAction, obs: &SceneDescription) -> Result<SkillAction, String> {
    let verb = action.verb.inverse();
    let destination = match action.verb {
        SkillVerb::PushIn | SkillVerb::PushOut => action.destination.clone(),
        SkillVerb::Pick | SkillVerb::Stack | SkillVerb::Unstack => Some(
            origin_of(&action.subject, obs)
                .ok_or_else(|| format!("no resting support known for {}", action.subject.name))?,
        ),
        _ => None,
    };
    Ok(SkillAction::new(verb, action.subject.clone(), destination))
}

pub fn ground_objects(
    backend: &mut dyn ReasonerBackend,
    prompts: &PromptSet,
    obs: &SceneDescription,
) -> Result<GroundedScene, PlanError> {
    let raw = backend.ground(&prompts.ground, obs)?;
    let mut items = Vec::with_capacity(raw.len());
    let mut seen = BTreeSet::new();
    for r in raw {
        let entry = obs
            .object(&r.name)
            .ok_or_else(|| PlanError::Grounding(format!("'{}' is not in the scene", r.name)))?;
        if r.id.is_some_and(|id| id != entry.id) {
            return Err(PlanError::Grounding(format!("'{}' has id {}, not {:?}", r.name, entry.id, r.id)));
        }
        let shape = ShapeClass::parse(&r.shape)
            .ok_or_else(|| PlanError::Grounding(format!("unknown shape class '{}'", r.shape)))?;
        if !seen.insert(entry.id) {
            return Err(PlanError::Grounding(format!("'{}' listed twice", r.name)));
        }
        items.push(GroundedItem { descriptor: ObjectDescriptor::new(r.name, shape), id: entry.id });
    }
    Ok(GroundedScene { items })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    /// Number of candidates handed to the backend ranker.
    pub retrieval_r: usize,
    pub weights: SimilarityWeights,
    pub retries: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { retrieval_r: 3, weights: SimilarityWeights::default(), retries: 1 }
    }
}

struct PlanContext<'a> {
    obs: &'a SceneDescription,
    scene: &'a GroundedScene,
    lib: &'a AffordanceLibrary,
    cfg: &'a PlannerConfig,
}

impl PlanContext<'_> {
    fn object_ref(&self, name: &str) -> Result<ObjectRef, String> {
        self.scene
            .by_name(name)
            .map(|i| ObjectRef { id: i.id, name: i.descriptor.name.clone() })
            .ok_or_else(|| format!("'{name}' is not a grounded object"))
    }

    fn destination(&self, verb: SkillVerb, raw: Option<&str>) -> Result<Option<Destination>, String> {
        let needs_region = matches!(verb, SkillVerb::PushIn | SkillVerb::PushOut);
        let needs_support = matches!(verb, SkillVerb::Place | SkillVerb::Stack | SkillVerb::Unstack);
        match raw {
            None if needs_region || needs_support => Err(format!("{verb} needs a destination")),
            None => Ok(None),
            Some(_) if !(needs_region || needs_support) => Err(format!("{verb} takes no destination")),
            Some(d) if needs_region => {
                if self.obs.regions.iter().any(|r| r == d) {
                    Ok(Some(Destination::Region(d.to_string())))
                } else {
                    Err(format!("unknown region '{d}'"))
                }
            }
            Some("table") => Ok(Some(Destination::Table)),
            Some(d) => {
                let r = self.object_ref(d)?;
                let container = self.obs.object_by_id(r.id).is_some_and(|e| e.has_tag("container"));
                Ok(Some(if container { Destination::Container(r) } else { Destination::Object(r) }))
            }
        }
    }

    fn action(&self, step: &RawStep) -> Result<SkillAction, String> {
        let verb = SkillVerb::parse(&step.verb).ok_or_else(|| format!("unknown verb '{}'", step.verb))?;
        let subject = self.object_ref(&step.subject)?;
        let destination = self.destination(verb, step.destination.as_deref())?;
        if destination.as_ref().and_then(Destination::object_id) == Some(subject.id) {
            return Err(format!("{} cannot be its own destination", subject.name));
        }
        Ok(SkillAction::new(verb, subject, destination))
    }

    fn subtask(
        &self,
        backend: &mut dyn ReasonerBackend,
        action: SkillAction,
        description: Option<String>,
        plan_mask: &BTreeSet<u32>,
    ) -> Result<Subtask, PlanError> {
        let target = self
            .scene
            .by_id(action.subject.id)
            .map(|i| i.descriptor.clone())
            .ok_or_else(|| PlanError::Grounding(format!("{} not grounded", action.subject.name)))?;
        let query = SkillQuery::new(action.verb, target);
        let candidates: Vec<LibraryEntry> = retrieve_ranked(self.lib, &query, self.cfg.retrieval_r, &self.cfg.weights)
            .into_iter()
            .map(|d| LibraryEntry { id: d.id.clone(), verb: d.skill_verb, target: d.target.clone() })
            .collect();
        if candidates.is_empty() {
            return Err(PlanError::RetrievalEmpty(action.to_string()));
        }
        let ranking = backend.rank(&query, &candidates)?;
        let demo_id = ranking
            .into_iter()
            .find(|id| candidates.iter().any(|c| &c.id == id))
            .ok_or_else(|| PlanError::Backend(BackendError::Protocol("ranking names no candidate".into())))?;
        let mut relevant = BTreeSet::from([action.subject.id]);
        relevant.extend(action.destination.as_ref().and_then(Destination::object_id));
        let mask: BTreeSet<u32> = relevant.intersection(plan_mask).copied().collect();
        if !mask.contains(&action.subject.id) {
            return Err(PlanError::PlanningFailure {
                attempts: 0,
                reason: format!("mask excludes subject {}", action.subject.name),
            });
        }
        Ok(Subtask {
            description: description.unwrap_or_else(|| action.describe()),
            action,
            demo_id,
            mask,
        })
    }
}

fn build_plan(
    backend: &mut dyn ReasonerBackend,
    raw: &RawPlan,
    ctx: &PlanContext<'_>,
    mode: PlanningMode,
) -> Result<TaskPlan, PlanError> {
    let structural = |reason: String| PlanError::PlanningFailure { attempts: 0, reason };
    if raw.forward.is_empty() {
        return Err(structural("forward plan is empty".into()));
    }
    if mode.is_atomic() && raw.forward.len() != 1 {
        return Err(structural(format!("{} plan must have exactly one subtask", mode.as_str())));
    }
    let forward_actions: Vec<SkillAction> =
        raw.forward.iter().map(|s| ctx.action(s)).collect::<Result<_, _>>().map_err(structural)?;
    let reverse_steps: Vec<(SkillAction, Option<String>)> = if mode.is_atomic() {
        let inv = inverse_action(&forward_actions[0], ctx.obs).map_err(structural)?;
        vec![(inv, None)]
    } else {
        let rev = raw.reverse.as_ref().ok_or_else(|| structural("long-horizon plan lacks a reverse plan".into()))?;
        rev.iter()
            .map(|s| ctx.action(s).map(|a| (a, s.description.clone())))
            .collect::<Result<_, _>>()
            .map_err(structural)?
    };
    let plan_mask: BTreeSet<u32> = if raw.mask.is_empty() {
        forward_actions
            .iter()
            .flat_map(|a| std::iter::once(a.subject.id).chain(a.destination.as_ref().and_then(Destination::object_id)))
            .collect()
    } else {
        raw.mask
            .iter()
            .map(|n| ctx.object_ref(n).map(|r| r.id))
            .collect::<Result<_, _>>()
            .map_err(structural)?
    };
    let fwd_refs: Vec<&SkillAction> = forward_actions.iter().collect();
    let rev_refs: Vec<&SkillAction> = reverse_steps.iter().map(|(a, _)| a).collect();
    let violations = lifo_violations(&fwd_refs, &rev_refs);
    if !violations.is_empty() {
        let reasons: Vec<String> = violations.iter().map(|v| format!("step {}: {}", v.step, v.reason)).collect();
        return Err(structural(format!("LIFO violations: {}", reasons.join("; "))));
    }
    let mut forward = Vec::with_capacity(forward_actions.len());
    for (a, step) in forward_actions.into_iter().zip(&raw.forward) {
        forward.push(ctx.subtask(backend, a, step.description.clone(), &plan_mask)?);
    }
    let mut reverse = Vec::with_capacity(reverse_steps.len());
    for (a, desc) in reverse_steps {
        reverse.push(ctx.subtask(backend, a, desc, &plan_mask)?);
    }
    Ok(TaskPlan { template: ctx.obs.template.clone(), mode, forward, reverse, scene: ctx.scene.clone() })
}

fn scene_listing(scene: &GroundedScene) -> String {
    scene
        .items
        .iter()
        .map(|i| format!("{} ({})", i.descriptor.name, i.descriptor.shape))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Queries the backend for a plan, validating it structurally and retrying on failure.
pub fn plan_task(
    backend: &mut dyn ReasonerBackend,
    prompts: &PromptSet,
    obs: &SceneDescription,
    scene: &GroundedScene,
    lib: &AffordanceLibrary,
    mode: PlanningMode,
    cfg: &PlannerConfig,
) -> Result<TaskPlan, PlanError> {
    if scene.items.is_empty() {
        return Err(PlanError::EmptyScene);
    }
    if lib.is_empty() {
        return Err(PlanError::EmptyLibrary);
    }
    let entries = library_entries(lib);
    let listing = entries.iter().map(|e| format!("{} {}", e.verb, e.target.name)).collect::<Vec<_>>().join(", ");
    let prompt = prompts.render_level(&scene_listing(scene), &listing, mode.as_str());
    let ctx = PlanContext { obs, scene, lib, cfg };
    let attempts = cfg.retries + 1;
    let mut last = String::new();
    for _ in 0..attempts {
        let raw = match backend.plan(&prompt, obs, &entries) {
            Ok(raw) => raw,
            Err(BackendError::NoRule(reason)) => {
                return Err(PlanError::PlanningFailure { attempts: 1, reason })
            }
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        match build_plan(backend, &raw, &ctx, mode) {
            Ok(plan) => return Ok(plan),
            Err(PlanError::PlanningFailure { reason, .. }) => last = reason,
            Err(PlanError::Backend(e)) => last = e.to_string(),
            Err(other) => return Err(other),
        }
    }
    Err(PlanError::PlanningFailure { attempts, reason: last })
}

/// Per-subtask masks keyed by demonstration slot: `[subject, destination]`.
pub fn attention_map(action: &SkillAction) -> BTreeMap<usize, u32> {
    let mut m = BTreeMap::from([(0, action.subject.id)]);
    if let Some(d) = action.destination.as_ref().and_then(Destination::object_id) {
        m.insert(1, d);
    }
    m
}
