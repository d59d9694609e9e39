//! Patch correctness prediction framed as answer selection.

pub mod cli;
pub mod corpus;
pub mod diffsum;
pub mod embed;
pub mod eval;
pub mod qa_model;
pub mod pairing;
pub mod synthetic;
