//! Optimal control of switched systems under minimum dwell time constraints.
//!
//! Three solution methods share one transcription and NLP layer: branch and
//! bound over the inclusion vector of a master sequence ([`minlp`]), the
//! iterative switching time optimization homotopy ([`isto`]) and
//! combinatorial integral approximation on a fixed grid ([`cia`]).

pub mod cia;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod integrate;
pub mod isto;
pub mod minlp;
pub mod model;
pub mod nlp;
pub mod segments;
pub mod simulate;
pub mod transcribe;

pub use error::{Error, Result};
