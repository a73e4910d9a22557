//! Interactive curation of in-context demonstration sets.
//!
//! The engine surfaces unlabeled pool examples slice by slice, learns key-phrase
//! templates from accepted demonstrations, and pseudo-labels candidates the
//! model agrees on unanimously.

pub mod engine;
pub mod lingo;
pub mod llmfn;
pub mod metrics;
pub mod session;
pub mod sim;
pub mod slicing;
pub mod templates;
pub mod textdiff;
