//! The typed action interface and the boundary events it can produce.
//!
//! Both types have a literal text form used in flow files and trace logs:
//! `NoAction`, `StepAction`, `ReadPathAction("/ws/a")`,
//! `ToolCallAction("search")` for actions, and `ReadEvent("/ws/a")`,
//! `ToolEvent("search")`, `StepEvent`, `NoEffect` for events. String
//! arguments use JSON string escaping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The only channel through which an oracle affects the containment layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Action {
    NoAction,
    ReadPath(String),
    ToolCall(String),
    Step,
}

/// A modeled boundary effect. `NoEffect` is the stutter that represents a
/// rejected action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BoundaryEvent {
    Read(String),
    Tool(String),
    Step,
    NoEffect,
}

/// The variant tag of an event, without its argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    ReadEvent,
    ToolEvent,
    StepEvent,
    NoEffect,
}

impl BoundaryEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            BoundaryEvent::Read(_) => EventKind::ReadEvent,
            BoundaryEvent::Tool(_) => EventKind::ToolEvent,
            BoundaryEvent::Step => EventKind::StepEvent,
            BoundaryEvent::NoEffect => EventKind::NoEffect,
        }
    }

    pub fn is_effect(&self) -> bool {
        !matches!(self, BoundaryEvent::NoEffect)
    }
}

impl Action {
    /// The edge label a flow graph must carry for this action to dispatch.
    pub fn edge_label(&self) -> Option<&'static str> {
        match self {
            Action::NoAction => None,
            Action::ReadPath(_) => Some("read"),
            Action::ToolCall(_) => Some("tool"),
            Action::Step => Some("step"),
        }
    }

    /// The event this action produces when it is admitted.
    pub fn effect(&self) -> BoundaryEvent {
        match self {
            Action::NoAction => BoundaryEvent::NoEffect,
            Action::ReadPath(p) => BoundaryEvent::Read(p.clone()),
            Action::ToolCall(t) => BoundaryEvent::Tool(t.clone()),
            Action::Step => BoundaryEvent::Step,
        }
    }
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::NoAction => f.write_str("NoAction"),
            Action::ReadPath(p) => write!(f, "ReadPathAction({})", quoted(p)),
            Action::ToolCall(t) => write!(f, "ToolCallAction({})", quoted(t)),
            Action::Step => f.write_str("StepAction"),
        }
    }
}

impl fmt::Display for BoundaryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryEvent::Read(p) => write!(f, "ReadEvent({})", quoted(p)),
            BoundaryEvent::Tool(t) => write!(f, "ToolEvent({})", quoted(t)),
            BoundaryEvent::Step => f.write_str("StepEvent"),
            BoundaryEvent::NoEffect => f.write_str("NoEffect"),
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::ReadEvent => "ReadEvent",
            EventKind::ToolEvent => "ToolEvent",
            EventKind::StepEvent => "StepEvent",
            EventKind::NoEffect => "NoEffect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed literal `{literal}`: {reason}")]
pub struct LiteralError {
    pub literal: String,
    pub reason: &'static str,
}

/// Splits `Name("arg")` into the name and the decoded argument.
fn split_call(s: &str) -> Result<(&str, Option<String>), LiteralError> {
    let err = |reason| LiteralError {
        literal: s.to_string(),
        reason,
    };
    let s = s.trim();
    let Some(open) = s.find('(') else {
        return Ok((s, None));
    };
    let inner = s[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| err("missing closing parenthesis"))?;
    let arg: String =
        serde_json::from_str(inner.trim()).map_err(|_| err("argument is not a quoted string"))?;
    Ok((&s[..open], Some(arg)))
}

impl FromStr for Action {
    type Err = LiteralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = split_call(s)?;
        let err = |reason| LiteralError {
            literal: s.to_string(),
            reason,
        };
        match (name, arg) {
            ("NoAction", None) => Ok(Action::NoAction),
            ("StepAction", None) => Ok(Action::Step),
            ("ReadPathAction", Some(p)) => Ok(Action::ReadPath(p)),
            ("ToolCallAction", Some(t)) => Ok(Action::ToolCall(t)),
            ("NoAction" | "StepAction", Some(_)) => Err(err("variant takes no argument")),
            ("ReadPathAction" | "ToolCallAction", None) => Err(err("variant needs an argument")),
            _ => Err(err("unknown action variant")),
        }
    }
}

impl FromStr for BoundaryEvent {
    type Err = LiteralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = split_call(s)?;
        let err = |reason| LiteralError {
            literal: s.to_string(),
            reason,
        };
        match (name, arg) {
            ("NoEffect", None) => Ok(BoundaryEvent::NoEffect),
            ("StepEvent", None) => Ok(BoundaryEvent::Step),
            ("ReadEvent", Some(p)) => Ok(BoundaryEvent::Read(p)),
            ("ToolEvent", Some(t)) => Ok(BoundaryEvent::Tool(t)),
            ("NoEffect" | "StepEvent", Some(_)) => Err(err("variant takes no argument")),
            ("ReadEvent" | "ToolEvent", None) => Err(err("variant needs an argument")),
            _ => Err(err("unknown event variant")),
        }
    }
}

impl FromStr for EventKind {
    type Err = LiteralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "ReadEvent" => Ok(EventKind::ReadEvent),
            "ToolEvent" => Ok(EventKind::ToolEvent),
            "StepEvent" => Ok(EventKind::StepEvent),
            "NoEffect" => Ok(EventKind::NoEffect),
            _ => Err(LiteralError {
                literal: s.to_string(),
                reason: "unknown event variant",
            }),
        }
    }
}

impl From<Action> for String {
    fn from(a: Action) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Action {
    type Error = LiteralError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BoundaryEvent> for String {
    fn from(e: BoundaryEvent) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for BoundaryEvent {
    type Error = LiteralError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}
