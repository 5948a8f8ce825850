use std::sync::Arc;

use crate::backend::BackendError;
use crate::library::{score_descriptor, SimilarityWeights, SkillQuery};
use crate::sim::{SceneDescription, TemplateRegistry};

use super::{LibraryEntry, RawGroundedItem, RawPlan, RawStep, ReasonerBackend};

/// Deterministic stand-in reasoner: perfect grounding, per-template rule table
/// planning and similarity-score ranking.
#[derive(Debug, Clone)]
pub struct OracleReasoner {
    registry: Arc<TemplateRegistry>,
    weights: SimilarityWeights,
    seed: u64,
}

impl OracleReasoner {
    pub fn new(registry: Arc<TemplateRegistry>, weights: SimilarityWeights, seed: u64) -> Self {
        Self { registry, weights, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn requirement_holds(req: &str, obs: &SceneDescription) -> Result<bool, BackendError> {
    let (negated, body) = match req.strip_prefix('!') {
        Some(rest) => (true, rest),
        None => (false, req),
    };
    let (object, tag) = body
        .split_once(':')
        .ok_or_else(|| BackendError::Rejected(format!("malformed requirement '{req}'")))?;
    let entry = obs
        .object(object)
        .ok_or_else(|| BackendError::Rejected(format!("requirement names unknown object '{object}'")))?;
    Ok(entry.has_tag(tag) != negated)
}

fn parse_steps(lines: &[String]) -> Result<Vec<RawStep>, BackendError> {
    lines
        .iter()
        .map(|l| RawStep::parse(l).ok_or_else(|| BackendError::Rejected(format!("malformed step '{l}'"))))
        .collect()
}

impl ReasonerBackend for OracleReasoner {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn ground(&mut self, _prompt: &str, obs: &SceneDescription) -> Result<Vec<RawGroundedItem>, BackendError> {
        Ok(obs
            .objects
            .iter()
            .map(|o| RawGroundedItem { name: o.name.clone(), shape: o.shape.as_str().into(), id: Some(o.id) })
            .collect())
    }

    fn plan(
        &mut self,
        _prompt: &str,
        obs: &SceneDescription,
        _library: &[LibraryEntry],
    ) -> Result<RawPlan, BackendError> {
        let template = self
            .registry
            .get(&obs.template)
            .ok_or_else(|| BackendError::NoRule(format!("no rules for template '{}'", obs.template)))?;
        for rule in &template.rules {
            let mut applies = true;
            for req in &rule.requires {
                if !requirement_holds(req, obs)? {
                    applies = false;
                    break;
                }
            }
            if !applies {
                continue;
            }
            let forward = parse_steps(&rule.forward)?;
            let reverse = rule.reverse.as_deref().map(parse_steps).transpose()?;
            let mut mask: Vec<String> = Vec::new();
            for step in &forward {
                for name in std::iter::once(&step.subject).chain(step.destination.as_ref()) {
                    if obs.object(name).is_some() && !mask.contains(name) {
                        mask.push(name.clone());
                    }
                }
            }
            return Ok(RawPlan { forward, reverse, mask });
        }
        Err(BackendError::NoRule(format!("no rule of '{}' applies to the current scene", obs.template)))
    }

    fn rank(&mut self, query: &SkillQuery, candidates: &[LibraryEntry]) -> Result<Vec<String>, BackendError> {
        let mut scored: Vec<(f64, &LibraryEntry)> = candidates
            .iter()
            .map(|c| (score_descriptor(query, c.verb, &c.target, &self.weights), c))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        Ok(scored.into_iter().map(|(_, c)| c.id.clone()).collect())
    }
}
