//! Affordance library: seed and harvested demonstrations plus dual-criteria
//! (action, geometry) retrieval.
//!
//! On disk the library is one JSON record per line, sorted by id.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{PointCloud, Pose};

/// Largest ee translation between consecutive demonstration steps.
pub const MAX_STEP_JUMP: f64 = 0.10;
/// Point budget per stored step.
pub const STORED_CLOUD_BUDGET: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Cuboid,
    Oval,
    Conical,
    Flat,
    Cylindrical,
    Articulated,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Cuboid,
        ShapeClass::Oval,
        ShapeClass::Conical,
        ShapeClass::Flat,
        ShapeClass::Cylindrical,
        ShapeClass::Articulated,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeClass::Cuboid => "cuboid",
            ShapeClass::Oval => "oval",
            ShapeClass::Conical => "conical",
            ShapeClass::Flat => "flat",
            ShapeClass::Cylindrical => "cylindrical",
            ShapeClass::Articulated => "articulated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillVerb {
    Pick,
    Place,
    PushIn,
    PushOut,
    Stack,
    Unstack,
    Open,
    Close,
    Fold,
    Unfold,
}

impl SkillVerb {
    pub const ALL: [SkillVerb; 10] = [
        SkillVerb::Pick,
        SkillVerb::Place,
        SkillVerb::PushIn,
        SkillVerb::PushOut,
        SkillVerb::Stack,
        SkillVerb::Unstack,
        SkillVerb::Open,
        SkillVerb::Close,
        SkillVerb::Fold,
        SkillVerb::Unfold,
    ];

    /// The skill that undoes this one.
    pub fn inverse(self) -> SkillVerb {
        use SkillVerb::*;
        match self {
            Pick => Place,
            Place => Pick,
            PushIn => PushOut,
            PushOut => PushIn,
            Stack => Unstack,
            Unstack => Stack,
            Open => Close,
            Close => Open,
            Fold => Unfold,
            Unfold => Fold,
        }
    }

    pub fn as_str(&self) -> &'static str {
        use SkillVerb::*;
        match self {
            Pick => "pick",
            Place => "place",
            PushIn => "push_in",
            PushOut => "push_out",
            Stack => "stack",
            Unstack => "unstack",
            Open => "open",
            Close => "close",
            Fold => "fold",
            Unfold => "unfold",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for SkillVerb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDescriptor {
    pub name: String,
    pub shape: ShapeClass,
}

impl ObjectDescriptor {
    pub fn new(name: impl Into<String>, shape: ShapeClass) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Gripper {
    #[default]
    Open,
    Closed,
}

impl Gripper {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Gripper::Open),
            1 => Some(Gripper::Closed),
            _ => None,
        }
    }

    pub fn bit(&self) -> u8 {
        match self {
            Gripper::Open => 0,
            Gripper::Closed => 1,
        }
    }

    pub fn is_closed(&self) -> bool {
        *self == Gripper::Closed
    }
}

impl Serialize for Gripper {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Gripper {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bit = u8::deserialize(d)?;
        Gripper::from_bit(bit).ok_or_else(|| serde::de::Error::custom(format!("gripper must be 0 or 1, got {bit}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemonstrationStep {
    pub cloud: PointCloud,
    pub ee_pose: Pose,
    pub gripper: Gripper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Seed,
    Harvested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub id: String,
    pub skill_verb: SkillVerb,
    pub target: ObjectDescriptor,
    /// Object ids in the recording world: subject first, then destination.
    /// Empty for records without ground-truth ids.
    pub object_ids: Vec<u32>,
    pub steps: Vec<DemonstrationStep>,
    pub provenance: Provenance,
}

impl Demonstration {
    pub fn validate(&self) -> Result<(), LibraryError> {
        let fail = |reason: String| {
            Err(LibraryError::Invariant {
                id: self.id.clone(),
                reason,
            })
        };
        if self.id.is_empty() {
            return fail("empty id".into());
        }
        if self.steps.len() < 2 {
            return fail(format!("needs at least 2 steps, has {}", self.steps.len()));
        }
        for (i, pair) in self.steps.windows(2).enumerate() {
            let jump = (pair[1].ee_pose.translation() - pair[0].ee_pose.translation()).norm();
            if jump > MAX_STEP_JUMP {
                return fail(format!("ee jump of {jump:.4} m between steps {i} and {}", i + 1));
            }
        }
        if let Some((i, _)) = self
            .steps
            .iter()
            .enumerate()
            .find(|(_, s)| !s.cloud.is_finite() || !s.ee_pose.is_finite())
        {
            return fail(format!("non-finite data in step {i}"));
        }
        Ok(())
    }

    /// Same demonstration restricted to `steps[range]`.
    pub fn slice(&self, start: usize, end: usize) -> Demonstration {
        Demonstration {
            id: self.id.clone(),
            skill_verb: self.skill_verb,
            target: self.target.clone(),
            object_ids: self.object_ids.clone(),
            steps: self.steps[start..end].to_vec(),
            provenance: self.provenance,
        }
    }
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("{path}: record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },
    #[error("demonstration {id:?}: {reason}")]
    Invariant { id: String, reason: String },
    #[error("duplicate demonstration id {0:?}")]
    DuplicateId(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffordanceLibrary {
    demos: BTreeMap<String, Demonstration>,
}

impl AffordanceLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.demos.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.demos.contains_key(id)
    }

    /// Demonstrations in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Demonstration> {
        self.demos.values()
    }

    pub fn append(&mut self, demo: Demonstration) -> Result<(), LibraryError> {
        demo.validate()?;
        if self.demos.contains_key(&demo.id) {
            return Err(LibraryError::DuplicateId(demo.id));
        }
        self.demos.insert(demo.id.clone(), demo);
        Ok(())
    }

    /// Serialized form, one line per demonstration.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for demo in self.demos.values() {
            out.push_str(&serde_json::to_string(demo).expect("demonstrations always serialize"));
            out.push('\n');
        }
        out
    }

    /// Stable content fingerprint, recorded by stored episodes.
    pub fn snapshot_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    /// `(id, verb, target)` listing handed to reasoner backends.
    pub fn summary(&self) -> Vec<(String, SkillVerb, ObjectDescriptor)> {
        self.demos
            .values()
            .map(|d| (d.id.clone(), d.skill_verb, d.target.clone()))
            .collect()
    }
}

/// Appends `demo`, failing on a duplicate id or a broken invariant.
pub fn append_demonstration(lib: &mut AffordanceLibrary, demo: Demonstration) -> Result<(), LibraryError> {
    lib.append(demo)
}

fn parse_records(path: &Path, text: &str, lib: &mut AffordanceLibrary) -> Result<(), LibraryError> {
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration = serde_json::from_str(line).map_err(|e| LibraryError::Parse {
            path: path.to_path_buf(),
            record: idx,
            message: e.to_string(),
        })?;
        lib.append(demo)?;
    }
    Ok(())
}

/// Loads a library file, or every `*.jsonl` file of a directory in name order.
pub fn load_library(path: &Path) -> Result<AffordanceLibrary, LibraryError> {
    let io = |source| LibraryError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut lib = AffordanceLibrary::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        for file in files {
            let text = fs::read_to_string(&file).map_err(|source| LibraryError::Io {
                path: file.clone(),
                source,
            })?;
            parse_records(&file, &text, &mut lib)?;
        }
    } else {
        let text = fs::read_to_string(path).map_err(io)?;
        parse_records(path, &text, &mut lib)?;
    }
    Ok(lib)
}

pub fn save_library(lib: &AffordanceLibrary, path: &Path) -> Result<(), LibraryError> {
    let io = |source| LibraryError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(lib.to_jsonl().as_bytes()).map_err(io)?;
    file.sync_all().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityWeights {
    pub action: f64,
    pub geometry: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self {
            action: 0.6,
            geometry: 0.4,
        }
    }
}

impl SimilarityWeights {
    /// Rescales to sum to one; `None` if both are zero or any is negative.
    pub fn normalized(&self) -> Option<Self> {
        let sum = self.action + self.geometry;
        if self.action < 0.0 || self.geometry < 0.0 || sum <= 0.0 || !sum.is_finite() {
            return None;
        }
        Some(Self {
            action: self.action / sum,
            geometry: self.geometry / sum,
        })
    }
}

pub const CONGRUENT_VERB_AFFINITY: f64 = 0.7;
pub const UNRELATED_VERB_AFFINITY: f64 = 0.2;
pub const NAME_MATCH_BONUS: f64 = 0.25;

const CONGRUENT_VERBS: [(SkillVerb, SkillVerb); 4] = [
    (SkillVerb::Fold, SkillVerb::Close),
    (SkillVerb::Unfold, SkillVerb::Open),
    (SkillVerb::Place, SkillVerb::Stack),
    (SkillVerb::Pick, SkillVerb::Unstack),
];

pub fn verb_affinity(query: SkillVerb, demo: SkillVerb) -> f64 {
    if query == demo {
        1.0
    } else if query.inverse() == demo {
        0.0
    } else if CONGRUENT_VERBS
        .iter()
        .any(|&(a, b)| (a, b) == (query, demo) || (b, a) == (query, demo))
    {
        CONGRUENT_VERB_AFFINITY
    } else {
        UNRELATED_VERB_AFFINITY
    }
}

// Upper triangle, row order = ShapeClass::ALL.
const SHAPE_AFFINITY: [[f64; 6]; 6] = [
    //  cub   oval  con   flat  cyl   art
    [1.0, 0.3, 0.2, 0.5, 0.5, 0.4],
    [0.3, 1.0, 0.6, 0.1, 0.5, 0.1],
    [0.2, 0.6, 1.0, 0.1, 0.5, 0.1],
    [0.5, 0.1, 0.1, 1.0, 0.1, 0.6],
    [0.5, 0.5, 0.5, 0.1, 1.0, 0.2],
    [0.4, 0.1, 0.1, 0.6, 0.2, 1.0],
];

pub fn shape_affinity(a: ShapeClass, b: ShapeClass) -> f64 {
    SHAPE_AFFINITY[a.index()][b.index()]
}

pub fn geometric_similarity(query: &ObjectDescriptor, demo: &ObjectDescriptor) -> f64 {
    let bonus = if query.name == demo.name { NAME_MATCH_BONUS } else { 0.0 };
    (shape_affinity(query.shape, demo.shape) + bonus).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillQuery {
    pub verb: SkillVerb,
    pub target: ObjectDescriptor,
}

impl SkillQuery {
    pub fn new(verb: SkillVerb, target: ObjectDescriptor) -> Self {
        Self { verb, target }
    }
}

pub fn score_similarity(query: &SkillQuery, demo: &Demonstration, weights: &SimilarityWeights) -> f64 {
    score_descriptor(query, demo.skill_verb, &demo.target, weights)
}

/// Score against a bare `(verb, target)` library summary entry.
pub fn score_descriptor(
    query: &SkillQuery,
    verb: SkillVerb,
    target: &ObjectDescriptor,
    weights: &SimilarityWeights,
) -> f64 {
    let w = weights.normalized().unwrap_or_default();
    w.action * verb_affinity(query.verb, verb) + w.geometry * geometric_similarity(&query.target, target)
}

/// Up to `r` demonstrations by descending score, ties broken by ascending id.
pub fn retrieve_ranked<'a>(
    lib: &'a AffordanceLibrary,
    query: &SkillQuery,
    r: usize,
    weights: &SimilarityWeights,
) -> Vec<&'a Demonstration> {
    let mut scored: Vec<(f64, &Demonstration)> = lib.iter().map(|d| (score_similarity(query, d, weights), d)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    scored.into_iter().take(r.max(1)).map(|(_, d)| d).collect()
}
