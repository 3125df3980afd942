//! Built-in flows.

use crate::action::Action;
use crate::flow_file::FlowDefinition;
use crate::impl_model::ImplConstants;

const READ_AGENT: &str = include_str!("../fixtures/read-agent.toml");
const RAG_FLOW_BARRIER: &str = include_str!("../fixtures/rag-flow-barrier.toml");
const RAG_FLOW_NO_BARRIER: &str = include_str!("../fixtures/rag-flow-no-barrier.toml");

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["read-agent", "rag-flow-barrier", "rag-flow-no-barrier"];

/// The source text of a built-in flow.
pub fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "read-agent" => Some(READ_AGENT),
        "rag-flow-barrier" => Some(RAG_FLOW_BARRIER),
        "rag-flow-no-barrier" => Some(RAG_FLOW_NO_BARRIER),
        _ => None,
    }
}

pub fn builtin(name: &str) -> Option<FlowDefinition> {
    builtin_source(name)
        .map(|src| FlowDefinition::from_toml(src).expect("built-in flows are well formed"))
}

/// Read, tool, step in a cycle; root `/ws`, tools `{search}`, six steps.
pub fn read_agent_flow() -> FlowDefinition {
    builtin("read-agent").expect("registered")
}

pub fn read_agent() -> ImplConstants {
    read_agent_flow().impl_constants()
}

/// The read-agent alphabet: one in-policy and one out-of-policy value for
/// each argument-carrying variant, plus `NoAction` and `StepAction`.
pub fn default_alphabet() -> Vec<Action> {
    read_agent_flow().alphabet
}

pub fn rag_flow_barrier() -> FlowDefinition {
    builtin("rag-flow-barrier").expect("registered")
}

/// Like the barrier flow, but the document node is a plain step node, so
/// the tool boundary is never crossed.
pub fn rag_flow_no_barrier() -> FlowDefinition {
    builtin("rag-flow-no-barrier").expect("registered")
}
