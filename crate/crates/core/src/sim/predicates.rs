use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::library::ShapeClass;

use super::{Body, SimError, SimObject, WorldState, TABLE_SUPPORT};

pub const OPEN_THRESHOLD_DEG: f64 = 60.0;
pub const CLOSED_THRESHOLD_DEG: f64 = 10.0;
const LIDDED_WALL: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateKind {
    On,
    In,
    Held,
    Open,
    Closed,
    StackedOn,
    InRegion,
}

impl PredicateKind {
    pub const ALL: [PredicateKind; 7] = [
        PredicateKind::On,
        PredicateKind::In,
        PredicateKind::Held,
        PredicateKind::Open,
        PredicateKind::Closed,
        PredicateKind::StackedOn,
        PredicateKind::InRegion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PredicateKind::On => "on",
            PredicateKind::In => "in",
            PredicateKind::Held => "held",
            PredicateKind::Open => "open",
            PredicateKind::Closed => "closed",
            PredicateKind::StackedOn => "stacked_on",
            PredicateKind::InRegion => "in_region",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relatum {
    Table,
    Object(u32),
    Region(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub kind: PredicateKind,
    pub subject: u32,
    pub relatum: Option<Relatum>,
}

impl Predicate {
    pub fn new(kind: PredicateKind, subject: u32, relatum: Option<Relatum>) -> Self {
        Self { kind, subject, relatum }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.relatum {
            None => write!(f, "{}({})", self.kind.as_str(), self.subject),
            Some(Relatum::Table) => write!(f, "{}({},table)", self.kind.as_str(), self.subject),
            Some(Relatum::Object(o)) => write!(f, "{}({},{})", self.kind.as_str(), self.subject, o),
            Some(Relatum::Region(r)) => write!(f, "{}({},{})", self.kind.as_str(), self.subject, r),
        }
    }
}

fn is_open(o: &SimObject) -> bool {
    o.body == Body::Lidded && o.flags.lid_angle > OPEN_THRESHOLD_DEG.to_radians()
}

fn is_closed(o: &SimObject) -> bool {
    o.body == Body::Lidded && o.flags.lid_angle < CLOSED_THRESHOLD_DEG.to_radians()
}

fn inside(subject: &SimObject, container: &SimObject) -> bool {
    if subject.flags.held || subject.id == container.id {
        return false;
    }
    let c = container.center();
    let [hx, hy, hz] = container.half_extents;
    let (wall, floor_z, ceiling) = match container.body {
        Body::Container { wall, floor, interior_height } => {
            let f = c.z - hz + floor;
            (wall, f, f + interior_height)
        }
        Body::Lidded => (LIDDED_WALL, c.z - hz + LIDDED_WALL, c.z + hz),
        Body::Solid => return false,
    };
    let p = subject.center();
    (p.x - c.x).abs() <= hx - wall
        && (p.y - c.y).abs() <= hy - wall
        && p.z >= floor_z
        && p.z <= ceiling
}

fn stacked_on(subject: &SimObject, base: &SimObject) -> bool {
    if subject.support_id != i64::from(base.id) {
        return false;
    }
    let d = subject.center() - base.center();
    d.x.hypot(d.y) < base.half_extents[0].min(base.half_extents[1])
}

pub fn ground_truth(w: &WorldState, p: &Predicate) -> Result<bool, SimError> {
    let s = w.object(p.subject)?;
    let object_relatum = |what: &str| -> Result<&SimObject, SimError> {
        match &p.relatum {
            Some(Relatum::Object(id)) => w.object(*id),
            other => Err(SimError::InvalidPredicate(format!(
                "{} requires an object relatum, got {other:?}",
                what
            ))),
        }
    };
    Ok(match p.kind {
        PredicateKind::Held => w.held_object == Some(s.id),
        PredicateKind::Open => is_open(s),
        PredicateKind::Closed => is_closed(s),
        PredicateKind::On => match &p.relatum {
            Some(Relatum::Table) => s.support_id == TABLE_SUPPORT,
            Some(Relatum::Object(id)) => {
                w.object(*id)?;
                s.support_id == i64::from(*id)
            }
            other => {
                return Err(SimError::InvalidPredicate(format!(
                    "on requires table or object relatum, got {other:?}"
                )))
            }
        },
        PredicateKind::In => inside(s, object_relatum("in")?),
        PredicateKind::StackedOn => stacked_on(s, object_relatum("stacked_on")?),
        PredicateKind::InRegion => match &p.relatum {
            Some(Relatum::Region(r)) => {
                let b = w.regions.get(r).ok_or_else(|| SimError::UnknownRegion(r.clone()))?;
                let c = s.center();
                b.contains(c.x, c.y)
            }
            other => {
                return Err(SimError::InvalidPredicate(format!(
                    "in_region requires a region relatum, got {other:?}"
                )))
            }
        },
    })
}

/// Every grounded predicate of the world keyed by a stable textual form.
pub fn all_predicates(w: &WorldState) -> BTreeMap<String, bool> {
    let mut out = BTreeMap::new();
    let mut put = |p: Predicate| {
        let v = ground_truth(w, &p).unwrap_or(false);
        out.insert(p.to_string(), v);
    };
    for s in w.objects.keys().copied() {
        put(Predicate::new(PredicateKind::Held, s, None));
        put(Predicate::new(PredicateKind::Open, s, None));
        put(Predicate::new(PredicateKind::Closed, s, None));
        put(Predicate::new(PredicateKind::On, s, Some(Relatum::Table)));
        for o in w.objects.keys().copied().filter(|o| *o != s) {
            for kind in [PredicateKind::On, PredicateKind::In, PredicateKind::StackedOn] {
                put(Predicate::new(kind, s, Some(Relatum::Object(o))));
            }
        }
        for r in w.regions.keys() {
            put(Predicate::new(PredicateKind::InRegion, s, Some(Relatum::Region(r.clone()))));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObjectEntry {
    pub name: String,
    pub id: u32,
    pub shape: ShapeClass,
    pub position: [f64; 3],
    pub tags: Vec<String>,
}

impl SceneObjectEntry {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub template: String,
    pub objects: Vec<SceneObjectEntry>,
    pub regions: Vec<String>,
}

impl SceneDescription {
    pub fn object(&self, name: &str) -> Option<&SceneObjectEntry> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn object_by_id(&self, id: u32) -> Option<&SceneObjectEntry> {
        self.objects.iter().find(|o| o.id == id)
    }
}

pub fn describe_scene(w: &WorldState) -> SceneDescription {
    let name_of = |id: i64| -> String {
        w.objects.get(&(id as u32)).map(|o| o.descriptor.name.clone()).unwrap_or_default()
    };
    let objects = w
        .objects
        .values()
        .map(|o| {
            let mut tags = Vec::new();
            if o.flags.held {
                tags.push("held".to_string());
            } else if o.support_id == TABLE_SUPPORT {
                tags.push("on:table".to_string());
            } else {
                tags.push(format!("on:{}", name_of(o.support_id)));
            }
            for other in w.objects.values().filter(|x| x.id != o.id) {
                if inside(o, other) {
                    tags.push(format!("in:{}", other.descriptor.name));
                }
                if stacked_on(o, other) {
                    tags.push(format!("stacked_on:{}", other.descriptor.name));
                }
            }
            let c = o.center();
            for (r, b) in &w.regions {
                if b.contains(c.x, c.y) {
                    tags.push(format!("in_region:{r}"));
                }
            }
            if matches!(o.body, Body::Container { .. }) {
                tags.push("container".into());
            }
            if is_open(o) {
                tags.push("open".into());
            }
            if is_closed(o) {
                tags.push("closed".into());
            }
            SceneObjectEntry {
                name: o.descriptor.name.clone(),
                id: o.id,
                shape: o.descriptor.shape,
                position: [c.x, c.y, c.z],
                tags,
            }
        })
        .collect();
    SceneDescription {
        template: w.template.clone(),
        objects,
        regions: w.regions.keys().cloned().collect(),
    }
}
