//! Agent-driven synthesis of multi-turn task-oriented dialogues.
//!
//! The crate is organised as a pipeline:
//!
//! - [`persona`] asks a generator model for candidate users of a scenario.
//! - [`actions`] lets each user act out a sequence of activities grounded in a
//!   local knowledge corpus, consolidating memory after every round.
//! - [`dialogue`] runs the user/assistant interaction and scores the result
//!   with a proxy evaluator.
//! - [`graph`] and [`trilevel`] evolve the dialogue-quality loss function and
//!   tune prompt parameters with zeroth-order descent.
//! - [`refinery`] derives reasoning tasks, measures multi-model accuracy and
//!   replaces easy problems until none remain.
//! - [`store`] and [`reports`] persist artifacts and compute corpus reports.
//!
//! Every model call goes through [`gateway`], which ships a remote
//! chat-completion client and a deterministic mock.

pub mod actions;
pub mod dialogue;
pub mod gateway;
pub mod graph;
pub mod hashing;
pub mod metrics;
pub mod persona;
pub mod prompts;
pub mod refinery;
pub mod reports;
pub mod store;
pub mod trilevel;

pub use gateway::{Gateway, GatewayError};
