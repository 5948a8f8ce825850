//! Execution state machine: physical states A/B/C and the storage actions fired
//! on its transitions.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsmState {
    TaskPlanning,
    ForwardExecution,
    ReverseExecution,
}

impl FsmState {
    pub const ALL: [FsmState; 3] = [FsmState::TaskPlanning, FsmState::ForwardExecution, FsmState::ReverseExecution];

    pub fn letter(&self) -> char {
        match self {
            FsmState::TaskPlanning => 'A',
            FsmState::ForwardExecution => 'B',
            FsmState::ReverseExecution => 'C',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageAction {
    /// No data routing on this transition.
    None,
    /// Forward abort: the partial trajectory is dropped.
    Discard,
    /// Forward and reverse trajectories are both kept.
    Dual,
    /// Only the forward trajectory is kept.
    Single,
}

impl StorageAction {
    pub fn letter(&self) -> &'static str {
        match self {
            StorageAction::None => "-",
            StorageAction::Discard => "discard",
            StorageAction::Dual => "D",
            StorageAction::Single => "E",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsmEvent {
    PlanReady,
    PlanFailed,
    ForwardResult(bool),
    ReverseResult(bool),
    RepetitionCapReached,
}

impl FsmEvent {
    pub const ALL: [FsmEvent; 7] = [
        FsmEvent::PlanReady,
        FsmEvent::PlanFailed,
        FsmEvent::ForwardResult(true),
        FsmEvent::ForwardResult(false),
        FsmEvent::ReverseResult(true),
        FsmEvent::ReverseResult(false),
        FsmEvent::RepetitionCapReached,
    ];
}

impl fmt::Display for FsmEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FsmEvent::PlanReady => f.write_str("PlanReady"),
            FsmEvent::PlanFailed => f.write_str("PlanFailed"),
            FsmEvent::ForwardResult(b) => write!(f, "ForwardResult({b})"),
            FsmEvent::ReverseResult(b) => write!(f, "ReverseResult({b})"),
            FsmEvent::RepetitionCapReached => f.write_str("RepetitionCapReached"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("event {event} is not legal in state {}", .state.letter())]
pub struct FsmProtocolError {
    pub state: FsmState,
    pub event: FsmEvent,
}

pub fn step_fsm(state: FsmState, event: FsmEvent) -> Result<(FsmState, StorageAction), FsmProtocolError> {
    use FsmEvent as E;
    use FsmState as S;
    match (state, event) {
        (S::TaskPlanning, E::PlanReady) => Ok((S::ForwardExecution, StorageAction::None)),
        (S::TaskPlanning, E::PlanFailed) => Ok((S::TaskPlanning, StorageAction::None)),
        (S::ForwardExecution, E::ForwardResult(true)) => Ok((S::ReverseExecution, StorageAction::None)),
        (S::ForwardExecution, E::ForwardResult(false)) => Ok((S::TaskPlanning, StorageAction::Discard)),
        (S::ForwardExecution, E::RepetitionCapReached) => Ok((S::TaskPlanning, StorageAction::None)),
        (S::ReverseExecution, E::ReverseResult(true)) => Ok((S::ForwardExecution, StorageAction::Dual)),
        (S::ReverseExecution, E::ReverseResult(false)) => Ok((S::TaskPlanning, StorageAction::Single)),
        _ => Err(FsmProtocolError { state, event }),
    }
}
