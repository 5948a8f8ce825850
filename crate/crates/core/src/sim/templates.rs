use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::library::ShapeClass;

use super::SimError;

const BUILTIN_TEMPLATES: &str = include_str!("../../assets/templates.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanningMode {
    AtomicSimple,
    AtomicCluttered,
    LongHorizon,
}

impl PlanningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanningMode::AtomicSimple => "atomic_simple",
            PlanningMode::AtomicCluttered => "atomic_cluttered",
            PlanningMode::LongHorizon => "long_horizon",
        }
    }

    pub fn is_atomic(&self) -> bool {
        !matches!(self, PlanningMode::LongHorizon)
    }
}

/// Rigid-body variant of a scene object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Body {
    #[default]
    Solid,
    /// Open-top receptacle: objects rest on its floor.
    Container { wall: f64, floor: f64, interior_height: f64 },
    /// Box with a lid hinged on its -x top edge.
    Lidded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds2 {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    fn is_valid(&self) -> bool {
        self.min.iter().chain(self.max.iter()).all(|v| v.is_finite())
            && self.min[0] <= self.max[0]
            && self.min[1] <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: ShapeClass,
    pub half_extents: [f64; 3],
    pub spawn_region: Bounds2,
    #[serde(default)]
    pub body: Body,
    #[serde(default)]
    pub initial_tags: Vec<String>,
}

impl ObjectSpec {
    pub fn is_distractor(&self) -> bool {
        self.initial_tags.iter().any(|t| t == "distractor")
    }

    /// Initial lid angle in radians from the `open`, `closed` or `lid_angle:<deg>` tags.
    pub fn initial_lid_angle(&self) -> Result<f64, String> {
        let mut angle = 0.0;
        for tag in &self.initial_tags {
            match tag.as_str() {
                "open" => angle = 80f64.to_radians(),
                "closed" => angle = 0.0,
                "distractor" => {}
                other => match other.strip_prefix("lid_angle:") {
                    Some(deg) => {
                        let deg: f64 = deg
                            .parse()
                            .map_err(|_| format!("bad lid angle in tag '{other}'"))?;
                        angle = deg.to_radians();
                    }
                    None => return Err(format!("unknown initial tag '{other}'")),
                },
            }
        }
        Ok(angle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRule {
    pub requires: Vec<String>,
    pub forward: Vec<String>,
    #[serde(default)]
    pub reverse: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTemplate {
    pub name: String,
    pub mode: PlanningMode,
    #[serde(default)]
    pub regions: Vec<RegionSpec>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub rules: Vec<PlanRule>,
}

impl SceneTemplate {
    fn validate(&self) -> Result<(), String> {
        if self.objects.is_empty() {
            return Err("template has no objects".into());
        }
        let mut names = BTreeSet::new();
        for o in &self.objects {
            if !names.insert(o.name.as_str()) || o.name == "table" {
                return Err(format!("duplicate or reserved object name '{}'", o.name));
            }
            if o.half_extents.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
                return Err(format!("object '{}' has invalid half extents", o.name));
            }
            if !o.spawn_region.is_valid() {
                return Err(format!("object '{}' has invalid spawn region", o.name));
            }
            o.initial_lid_angle()?;
        }
        for r in &self.regions {
            let b = Bounds2 { min: r.min, max: r.max };
            if !b.is_valid() {
                return Err(format!("region '{}' has invalid bounds", r.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRegistry {
    #[serde(rename = "template")]
    pub templates: Vec<SceneTemplate>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_TEMPLATES).expect("built-in template registry is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let reg: TemplateRegistry =
            toml::from_str(text).map_err(|e| SimError::Registry(e.to_string()))?;
        let mut names = BTreeSet::new();
        for t in &reg.templates {
            if !names.insert(t.name.as_str()) {
                return Err(SimError::Registry(format!("duplicate template '{}'", t.name)));
            }
            t.validate()
                .map_err(|e| SimError::Registry(format!("template '{}': {e}", t.name)))?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Registry(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn get(&self, name: &str) -> Option<&SceneTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.templates.iter().map(|t| t.name.as_str()).collect()
    }
}
