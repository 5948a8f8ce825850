//! Three-stage success check: command to visual query, assessment of the final
//! scene, and reduction of the free-text answer to a strict boolean.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::library::SkillVerb;
use crate::planner::{spoken, Destination, SkillAction};
use crate::prompts::PromptSet;
use crate::sim::{Predicate, PredicateKind, Relatum, SceneDescription};

/// Predicate whose truth answers the query. `negated` flips it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateHint {
    pub predicate: Predicate,
    pub negated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaQuery {
    pub text: String,
    pub hint: Option<PredicateHint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub text: String,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageLog {
    pub command: String,
    pub query: Option<String>,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessSignal {
    pub value: bool,
    pub stage_log: StageLog,
    /// Set when a stage failed and the value was forced to false.
    pub flagged: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("command is empty")]
    EmptyCommand,
    #[error("query is not interrogative: {0}")]
    NotAQuestion(String),
    #[error("query carries no predicate hint")]
    MissingHint,
    #[error("hint references unknown object {0}")]
    UnknownObject(u32),
    #[error("hint references unknown region '{0}'")]
    UnknownRegion(String),
    #[error("assessment is empty")]
    EmptyResponse,
    #[error("ambiguous assessment: {0}")]
    Ambiguous(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub trait QueryTranslator: Send {
    fn backend_id(&self) -> &str;
    fn translate(&mut self, prompt: &str, command: &str, action: &SkillAction) -> Result<VqaQuery, EvalError>;
}

pub trait Assessor: Send {
    fn backend_id(&self) -> &str;
    fn assess(&mut self, scene: &SceneDescription, query: &VqaQuery) -> Result<Assessment, EvalError>;
}

pub trait AnswerParser: Send {
    fn backend_id(&self) -> &str;
    fn decode(&mut self, command: &str, query: &VqaQuery, response: &Assessment) -> Result<bool, EvalError>;
}

pub struct EvaluatorBackends {
    pub translator: Box<dyn QueryTranslator>,
    pub assessor: Box<dyn Assessor>,
    pub parser: Box<dyn AnswerParser>,
    pub prompts: PromptSet,
}

impl EvaluatorBackends {
    pub fn oracle() -> Self {
        Self::oracle_with_style(0)
    }

    pub fn oracle_with_style(style: usize) -> Self {
        Self {
            translator: Box::new(OracleTranslator),
            assessor: Box::new(OracleAssessor::new(style)),
            parser: Box::new(OracleParser),
            prompts: PromptSet::default(),
        }
    }
}

static PUT_ON: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^put the (.+?) (?:on|onto) the (.+)$").unwrap());
static MOVE_FROM_TO: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^move the (.+?) from the (.+?) to the (.+)$").unwrap());
static PUT_INTO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^put the (.+?) into the (.+)$").unwrap());

fn relatum_name(scene_name: impl Fn(u32) -> String, r: &Relatum) -> String {
    match r {
        Relatum::Table => "table".into(),
        Relatum::Object(id) => scene_name(*id),
        Relatum::Region(name) => spoken(name),
    }
}

/// Rule-based translator: command patterns first, then per-predicate templates.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleTranslator;

impl QueryTranslator for OracleTranslator {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn translate(&mut self, _prompt: &str, command: &str, action: &SkillAction) -> Result<VqaQuery, EvalError> {
        let c = command.trim().trim_end_matches('.').to_lowercase();
        if c.is_empty() {
            return Err(EvalError::EmptyCommand);
        }
        let (predicate, negated) = action.success_predicate();
        let hint = Some(PredicateHint { predicate: predicate.clone(), negated });
        if let Some(m) = MOVE_FROM_TO.captures(&c) {
            let text = format!("Is the {} on the {} or the {}?", &m[1], &m[2], &m[3]);
            return Ok(VqaQuery { text, hint });
        }
        if let Some(m) = PUT_ON.captures(&c) {
            return Ok(VqaQuery { text: format!("Is the {} on the {}?", &m[1], &m[2]), hint });
        }
        if let Some(m) = PUT_INTO.captures(&c) {
            return Ok(VqaQuery { text: format!("Is the {} inside the {}?", &m[1], &m[2]), hint });
        }
        let s = spoken(&action.subject.name);
        let dest_name = |id: u32| {
            action
                .destination
                .as_ref()
                .and_then(|d| match d {
                    Destination::Object(o) | Destination::Container(o) if o.id == id => {
                        Some(spoken(&o.name))
                    }
                    _ => None,
                })
                .unwrap_or_else(|| format!("object {id}"))
        };
        let rel = predicate.relatum.as_ref().map(|r| relatum_name(dest_name, r)).unwrap_or_default();
        let text = match (predicate.kind, action.verb) {
            (PredicateKind::Held, _) => format!("Is the {s} held by the gripper?"),
            (PredicateKind::On, _) => format!("Is the {s} on the {rel}?"),
            (PredicateKind::In, _) => format!("Is the {s} inside the {rel}?"),
            (PredicateKind::StackedOn, _) => format!("Is the {s} stacked on the {rel}?"),
            (PredicateKind::InRegion, _) if negated => format!("Is the {s} outside the {rel}?"),
            (PredicateKind::InRegion, _) => format!("Is the {s} inside the {rel}?"),
            (PredicateKind::Closed, SkillVerb::Fold) => format!("Is the {s} folded?"),
            (PredicateKind::Open, SkillVerb::Unfold) => format!("Is the {s} unfolded?"),
            (PredicateKind::Open, _) => format!("Is the {s} open?"),
            (PredicateKind::Closed, _) => format!("Is the {s} closed?"),
        };
        Ok(VqaQuery { text, hint })
    }
}

const RELATION_WORDS: [&str; 10] =
    ["on", "in", "inside", "outside", "open", "closed", "stacked", "held", "folded", "unfolded"];

fn antonym(word: &str) -> Option<&'static str> {
    Some(match word {
        "open" => "closed",
        "closed" => "open",
        "inside" => "outside",
        "outside" => "inside",
        "folded" => "unfolded",
        "unfolded" => "folded",
        _ => return None,
    })
}

fn normalize(text: &str) -> String {
    text.to_lowercase().replace('_', " ").replace(['\u{2019}', '\u{2018}'], "'")
}

fn tokens(clause: &str) -> Vec<String> {
    clause
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Tokens of the query from its first relation word up to the question mark.
pub fn query_phrase(query: &str) -> Option<Vec<String>> {
    let q = normalize(query);
    let body = q.trim().trim_end_matches('?');
    let toks = tokens(body);
    let start = toks.iter().skip(2).position(|t| RELATION_WORDS.contains(&t.as_str()))? + 2;
    Some(toks[start..].to_vec())
}

fn subject_of(query: &str, phrase_len: usize) -> String {
    let toks = tokens(normalize(query).trim_end_matches('?'));
    let end = toks.len().saturating_sub(phrase_len);
    toks.get(2..end).map(|t| t.join(" ")).unwrap_or_default()
}

const PREFIXES: [&str; 10] = [
    "",
    "Looking at the final frame, ",
    "After examining the scene carefully, ",
    "Based on the image, ",
    "From this viewpoint, ",
    "Let me check. ",
    "Having reviewed the workspace, ",
    "Upon inspection, ",
    "To answer the question, ",
    "Judging from the picture, ",
];

const SUFFIXES: [&str; 5] =
    ["", " The lighting is even.", " Everything else looks unchanged.", " The robot arm is visible.", " I hope this helps!"];

pub const CORE_FORMS: usize = 4;
/// Distinct oracle answer styles per polarity.
pub const STYLE_COUNT: usize = PREFIXES.len() * CORE_FORMS * SUFFIXES.len();

/// Verbose templated answer for a query of the given truth.
pub fn styled_answer(style: usize, truth: bool, subject: &str, phrase: &[String]) -> String {
    let style = style % STYLE_COUNT;
    let prefix = PREFIXES[style / (CORE_FORMS * SUFFIXES.len())];
    let core = (style / SUFFIXES.len()) % CORE_FORMS;
    let suffix = SUFFIXES[style % SUFFIXES.len()];
    let p = phrase.join(" ");
    let lone = if phrase.len() == 1 { antonym(&phrase[0]) } else { None };
    let body = match (truth, core) {
        (true, 0) => format!("Yes, I can see that the object is {p}."),
        (true, 1) => format!("Yes, the {subject} is {p}."),
        (true, 2) => format!("Correct, the {subject} is clearly {p}."),
        (true, _) => format!("Affirmative: the {subject} appears to be {p}."),
        (false, 0) => match lone {
            Some(other) => format!("No, the {subject} remains {other} on the table."),
            None => format!("No, the {subject} is not {p}."),
        },
        (false, 1) => format!("No, the {subject} isn't {p}."),
        (false, 2) => format!("Negative, the {subject} is no longer {p}."),
        (false, _) => format!("Nope, I do not think the {subject} is {p}."),
    };
    format!("{prefix}{body}{suffix}")
}

/// Assessor that reads the hint off the final scene tags and answers in prose.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleAssessor {
    pub style: usize,
}

impl OracleAssessor {
    pub fn new(style: usize) -> Self {
        Self { style }
    }
}

/// Truth of a hint against the tags of a scene description.
pub fn hint_truth(scene: &SceneDescription, hint: &PredicateHint) -> Result<bool, EvalError> {
    let p = &hint.predicate;
    let s = scene.object_by_id(p.subject).ok_or(EvalError::UnknownObject(p.subject))?;
    let name = |id: u32| scene.object_by_id(id).map(|o| o.name.clone()).ok_or(EvalError::UnknownObject(id));
    let object_tag = |prefix: &str| -> Result<bool, EvalError> {
        match &p.relatum {
            Some(Relatum::Object(id)) => Ok(s.has_tag(&format!("{prefix}:{}", name(*id)?))),
            Some(Relatum::Table) if prefix == "on" => Ok(s.has_tag("on:table")),
            _ => Ok(false),
        }
    };
    let value = match p.kind {
        PredicateKind::Held => s.has_tag("held"),
        PredicateKind::Open => s.has_tag("open"),
        PredicateKind::Closed => s.has_tag("closed"),
        PredicateKind::On => object_tag("on")?,
        PredicateKind::In => object_tag("in")?,
        PredicateKind::StackedOn => object_tag("stacked_on")?,
        PredicateKind::InRegion => match &p.relatum {
            Some(Relatum::Region(r)) => {
                if !scene.regions.contains(r) {
                    return Err(EvalError::UnknownRegion(r.clone()));
                }
                s.has_tag(&format!("in_region:{r}"))
            }
            _ => false,
        },
    };
    Ok(value != hint.negated)
}

impl Assessor for OracleAssessor {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn assess(&mut self, scene: &SceneDescription, query: &VqaQuery) -> Result<Assessment, EvalError> {
        let hint = query.hint.as_ref().ok_or(EvalError::MissingHint)?;
        let truth = hint_truth(scene, hint)?;
        let phrase = query_phrase(&query.text).ok_or_else(|| EvalError::NotAQuestion(query.text.clone()))?;
        let subject = subject_of(&query.text, phrase.len());
        Ok(Assessment { text: styled_answer(self.style, truth, &subject, &phrase), backend_id: "oracle".into() })
    }
}

const YES: [&str; 4] = ["yes", "yeah", "correct", "affirmative"];
const NO: [&str; 4] = ["no", "nope", "negative", "incorrect"];

fn find_seq(hay: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

fn negated_before(toks: &[String]) -> bool {
    toks.iter().enumerate().any(|(i, t)| {
        t == "not"
            || t == "never"
            || t == "cannot"
            || t.ends_with("n't")
            || (t == "no" && toks.get(i + 1).is_some_and(|n| n == "longer"))
    })
}

/// Yes/no answer to `query` contained in `response`.
pub fn decode_answer(query: &str, response: &str) -> Result<bool, EvalError> {
    let text = normalize(response);
    if text.trim().is_empty() {
        return Err(EvalError::EmptyResponse);
    }
    let phrase = query_phrase(query).ok_or_else(|| EvalError::NotAQuestion(query.to_string()))?;
    let mut votes: Vec<bool> = Vec::new();

    // Interjections count only when immediately followed by punctuation.
    let chars: Vec<char> = text.chars().collect();
    let mut word = String::new();
    for c in &chars {
        if c.is_alphanumeric() || *c == '\'' {
            word.push(*c);
            continue;
        }
        if !word.is_empty() && ".,!?;:".contains(*c) {
            if YES.contains(&word.as_str()) {
                votes.push(true);
            } else if NO.contains(&word.as_str()) {
                votes.push(false);
            }
        }
        word.clear();
    }

    let head = &phrase[0];
    let rest = &phrase[1..];
    for clause in text.split(|c: char| ".,!?;:".contains(c)) {
        let toks = tokens(clause);
        if let Some(i) = find_seq(&toks, &phrase) {
            votes.push(!negated_before(&toks[..i]));
            continue;
        }
        let mut flipped = vec![format!("un{head}")];
        flipped.extend(rest.iter().cloned());
        if let Some(i) = find_seq(&toks, &flipped) {
            votes.push(negated_before(&toks[..i]));
            continue;
        }
        if let Some(other) = antonym(head) {
            let mut opposite = vec![other.to_string()];
            opposite.extend(rest.iter().cloned());
            let hit = find_seq(&toks, &opposite).or_else(|| find_seq(&toks, &opposite[..1]));
            if let Some(i) = hit {
                votes.push(negated_before(&toks[..i]));
            }
        }
    }

    match (votes.iter().any(|v| *v), votes.iter().any(|v| !*v)) {
        (true, false) => Ok(true),
        (false, true) => Ok(false),
        (false, false) => Err(EvalError::Ambiguous("no decisive statement".into())),
        (true, true) => Err(EvalError::Ambiguous("contradictory statements".into())),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleParser;

impl AnswerParser for OracleParser {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn decode(&mut self, _command: &str, query: &VqaQuery, response: &Assessment) -> Result<bool, EvalError> {
        decode_answer(&query.text, &response.text)
    }
}

/// Runs all three stages. Any stage failure yields a flagged `false`.
pub fn evaluate(
    backends: &mut EvaluatorBackends,
    command: &str,
    action: &SkillAction,
    scene: &SceneDescription,
) -> SuccessSignal {
    let mut log = StageLog { command: command.to_string(), ..StageLog::default() };
    let result = (|| {
        let prompt = backends.prompts.render_vqa(command);
        let query = backends.translator.translate(&prompt, command, action)?;
        if !query.text.trim_end().ends_with('?') {
            return Err(EvalError::NotAQuestion(query.text));
        }
        log.query = Some(query.text.clone());
        let response = backends.assessor.assess(scene, &query)?;
        log.response = Some(response.text.clone());
        backends.parser.decode(command, &query, &response)
    })();
    match result {
        Ok(value) => SuccessSignal { value, stage_log: log, flagged: false },
        Err(e) => {
            log.error = Some(e.to_string());
            SuccessSignal { value: false, stage_log: log, flagged: true }
        }
    }
}
