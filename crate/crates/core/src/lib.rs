//! Executable containment layer for agentic flow graphs.
//!
//! An oracle is modeled as a havoc source of typed actions. The dispatch loop
//! over a flow graph is checked against an abstract boundary model by
//! bounded forward-simulation refinement, and the proof artifact itself is
//! checked by vacuity, discrimination, and fitness gates.

pub mod action;
pub mod digest;
pub mod fixtures;
pub mod flow_file;
pub mod gates;
pub mod harness;
pub mod impl_model;
pub mod lts;
pub mod refinement;
pub mod spec_model;
pub mod trace_log;

pub use action::{Action, BoundaryEvent, EventKind};

// Compiles and runs the guide's snippets as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/havoc.md")]
    mod havoc {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/gates.md")]
    mod gates {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
