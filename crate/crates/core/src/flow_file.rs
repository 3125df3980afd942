//! Flow definition files.
//!
//! A flow file is TOML with a provenance string, the action alphabet used for
//! bounded checks, the abstract constants, the flow graph, and an optional
//! proof bundle:
//!
//! ```toml
//! provenance = "hand-written"
//! alphabet = ["NoAction", "StepAction", 'ReadPathAction("/ws/x")']
//!
//! [constants]
//! workspace_root = "/ws"
//! allowed_tools = ["search"]
//! max_steps = 4
//!
//! [graph]
//! entry = "loop"
//! nodes = [{ id = "loop", kind = "step" }]
//! edges = [{ from = "loop", label = "step", to = "loop" }]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::impl_model::{FlowGraph, ImplConstants};
use crate::refinement::{AbstractionBundle, BundleError};
use crate::spec_model::{Guards, ModelError, SpecConstants, SpecSystem};

/// The untrusted proof artifact: the abstract guards the model claims and the
/// abstraction that relates it to the loop.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecBundle {
    #[serde(default)]
    pub guards: Guards,
    #[serde(default)]
    pub abstraction: AbstractionBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDefinition {
    /// Where the flow came from. Free text, carried into reports.
    pub provenance: String,
    pub alphabet: Vec<Action>,
    pub constants: SpecConstants,
    pub graph: FlowGraph,
    #[serde(default)]
    pub bundle: SpecBundle,
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("flow file does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Constants(#[from] ModelError),
    #[error("proof bundle does not type-check: {0}")]
    Bundle(#[from] BundleError),
    #[error("the action alphabet is empty")]
    EmptyAlphabet,
}

impl FlowDefinition {
    /// Parses and type-checks a flow file.
    pub fn from_toml(text: &str) -> Result<Self, FlowError> {
        let def: FlowDefinition = toml::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let text = std::fs::read_to_string(path).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        self.constants.validate()?;
        self.bundle.abstraction.type_check()?;
        if self.alphabet.is_empty() {
            return Err(FlowError::EmptyAlphabet);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flow definitions always serialize")
    }

    pub fn impl_constants(&self) -> ImplConstants {
        ImplConstants::new(self.constants.clone(), self.graph.clone())
    }

    /// The abstract system with the bundle's guards.
    pub fn spec_system(&self) -> SpecSystem {
        SpecSystem::with_guards(self.constants.clone(), self.bundle.guards)
    }
}
