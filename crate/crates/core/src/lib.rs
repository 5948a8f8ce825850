//! Autonomous tabletop data collection: scene-grounded task planning with paired
//! reverse plans, in-context action denoising, three-stage success checks and an
//! FSM that routes episodes into dual or single storage.

pub mod geometry;
pub mod library;
pub mod sim;
pub mod backend;
pub mod planner;
pub mod prompts;
pub mod policy;
pub mod evaluator;
pub mod demos;
pub mod fsm;
pub mod execute;
pub mod dataset;
pub mod external;
pub mod orchestrator;
