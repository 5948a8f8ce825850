use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::StorageAction;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("no episode records")]
    Empty,
    #[error("episode of task '{0}' ended without a storage decision")]
    Unrouted(String),
}

/// The part of an episode that statistics depend on.
pub trait EpisodeOutcome {
    fn task(&self) -> &str;
    fn storage(&self) -> StorageAction;
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskStats {
    pub task: String,
    pub episodes: usize,
    pub forward_successes: usize,
    pub reverse_attempts: usize,
    pub reverse_successes: usize,
    pub dual: usize,
    pub single: usize,
    pub discarded: usize,
    pub p_forward: f64,
    /// Reverse successes over episodes that entered reverse execution (0 when none did).
    pub p_reverse: f64,
    pub p_total: f64,
}

impl TaskStats {
    fn add(&mut self, storage: StorageAction) {
        self.episodes += 1;
        match storage {
            StorageAction::Dual => self.dual += 1,
            StorageAction::Single => self.single += 1,
            StorageAction::Discard => self.discarded += 1,
            StorageAction::None => {}
        }
    }

    fn finish(&mut self) {
        self.forward_successes = self.dual + self.single;
        self.reverse_attempts = self.dual + self.single;
        self.reverse_successes = self.dual;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        self.p_forward = ratio(self.forward_successes, self.episodes);
        self.p_reverse = ratio(self.reverse_successes, self.reverse_attempts);
        self.p_total = ratio(self.dual, self.episodes);
    }

    pub fn reconciles(&self) -> bool {
        self.dual + self.single + self.discarded == self.episodes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LoopCounts {
    /// B→C→B, ending in dual storage.
    pub success_loop: usize,
    /// B→C→A, ending in single storage.
    pub recovery_loop: usize,
    /// B→A forward aborts.
    pub forward_abort: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignStats {
    pub tasks: Vec<TaskStats>,
    pub total: TaskStats,
    pub loops: LoopCounts,
    pub planning_failures: usize,
    pub repetition_caps: usize,
    pub planner_calls: usize,
}

pub fn compute_stats<E: EpisodeOutcome>(records: &[E]) -> Result<CampaignStats, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut per_task: BTreeMap<&str, TaskStats> = BTreeMap::new();
    let mut total = TaskStats { task: "all".into(), ..TaskStats::default() };
    for r in records {
        if r.storage() == StorageAction::None {
            return Err(StatsError::Unrouted(r.task().to_string()));
        }
        per_task
            .entry(r.task())
            .or_insert_with(|| TaskStats { task: r.task().to_string(), ..TaskStats::default() })
            .add(r.storage());
        total.add(r.storage());
    }
    let mut tasks: Vec<TaskStats> = per_task.into_values().collect();
    tasks.iter_mut().for_each(TaskStats::finish);
    total.finish();
    let loops = LoopCounts { success_loop: total.dual, recovery_loop: total.single, forward_abort: total.discarded };
    Ok(CampaignStats { tasks, total, loops, ..CampaignStats::default() })
}

/// Per-task success table followed by loop and routing counts.
pub fn render_report(stats: &CampaignStats) -> String {
    let mut out = String::new();
    let rule = "-".repeat(86);
    let _ = writeln!(
        out,
        "{:<28} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>8}",
        "Task", "Episodes", "Forward", "Reverse", "Total", "Dual", "Single", "Discard"
    );
    let _ = writeln!(out, "{rule}");
    let row = |out: &mut String, t: &TaskStats| {
        let _ = writeln!(
            out,
            "{:<28} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>6} {:>6} {:>8}",
            t.task, t.episodes, t.p_forward, t.p_reverse, t.p_total, t.dual, t.single, t.discarded
        );
    };
    for t in &stats.tasks {
        row(&mut out, t);
    }
    let _ = writeln!(out, "{rule}");
    row(&mut out, &stats.total);
    let l = &stats.loops;
    let _ = writeln!(
        out,
        "loops: B->C->B {}  B->C->A {}  B->A {}",
        l.success_loop, l.recovery_loop, l.forward_abort
    );
    let _ = writeln!(
        out,
        "planner calls {}  planning failures {}  repetition caps {}",
        stats.planner_calls, stats.planning_failures, stats.repetition_caps
    );
    out
}
