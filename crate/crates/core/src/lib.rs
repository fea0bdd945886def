//! Multi-hop question answering by iterative retrieval and plan assessment.
//!
//! A session repeatedly asks a chat model to plan from the evidence gathered
//! so far, picks one plan per iteration with [`assessor`], and grows the
//! evidence with [`retriever`] until an answer is accepted or forced.

pub mod assessor;
pub mod cli;
pub mod config;
pub mod engine;
pub mod evaluation;
pub mod llm;
pub mod prompting;
pub mod retriever;
pub mod scorer;
pub mod training;

pub use config::EngineConfig;
pub use engine::{Engine, SessionOutcome, SessionResult};
