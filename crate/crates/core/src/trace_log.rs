//! Line-delimited trace logs.
//!
//! The first line is a header naming the schema, the digest of the loop's
//! constants, the seed, and the strategy. Each further line is one step:
//!
//! ```text
//! {"schema":"containment-trace/1","constants_digest":"9f…","seed":7,"strategy":"random"}
//! {"index":0,"pre":"5c…","action":"ReadPathAction(\"/ws/x\")","event":"ReadEvent(\"/ws/x\") @ read_file -[read]-> call_tool","post":"e1…"}
//! ```
//!
//! State digests are SHA-256 over the compact JSON of the state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, LiteralError};
use crate::digest::digest;
use crate::impl_model::{impl_init, impl_next, ImplConstants, ImplEvent, ImplState};
use crate::lts::Trace;

pub const SCHEMA: &str = "containment-trace/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub schema: String,
    pub constants_digest: String,
    pub seed: Option<u64>,
    pub strategy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub index: usize,
    pub pre: String,
    pub action: String,
    pub event: String,
    pub post: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLog {
    pub header: Header,
    pub records: Vec<Record>,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("trace log is empty")]
    MissingHeader,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("unsupported schema `{0}`")]
    Schema(String),
    #[error("line {line}: {source}")]
    Action { line: usize, source: LiteralError },
}

pub fn constants_digest(c: &ImplConstants) -> String {
    digest(c)
}

pub fn state_digest(s: &ImplState) -> String {
    digest(s)
}

impl TraceLog {
    pub fn from_trace(
        c: &ImplConstants,
        trace: &Trace<ImplState, Action, ImplEvent>,
        seed: Option<u64>,
        strategy: &str,
    ) -> Self {
        let records = trace
            .steps
            .iter()
            .enumerate()
            .map(|(index, st)| Record {
                index,
                pre: state_digest(&st.pre),
                action: st.action.to_string(),
                event: st.event.to_string(),
                post: state_digest(&st.post),
            })
            .collect();
        TraceLog {
            header: Header {
                schema: SCHEMA.to_string(),
                constants_digest: constants_digest(c),
                seed,
                strategy: strategy.to_string(),
            },
            records,
        }
    }

    pub fn render(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("headers serialize");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LogError::MissingHeader)?;
        let header: Header =
            serde_json::from_str(first).map_err(|source| LogError::Json { line: 1, source })?;
        if header.schema != SCHEMA {
            return Err(LogError::Schema(header.schema));
        }
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| LogError::Json {
                    line: i + 1,
                    source,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(TraceLog { header, records })
    }

    /// The action column.
    pub fn actions(&self) -> Result<Vec<Action>, LogError> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.action.parse().map_err(|source| LogError::Action {
                    line: i + 2,
                    source,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub index: usize,
    pub column: &'static str,
    pub logged: String,
    pub replayed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayVerdict {
    pub records: usize,
    pub constants_match: bool,
    pub mismatch: Option<Mismatch>,
}

impl ReplayVerdict {
    pub fn passed(&self) -> bool {
        self.constants_match && self.mismatch.is_none()
    }
}

/// Re-executes the action column from the initial state and compares every
/// other column byte for byte.
pub fn replay(c: &ImplConstants, log: &TraceLog) -> Result<ReplayVerdict, LogError> {
    let actions = log.actions()?;
    let mut cur = impl_init(c);
    let mut mismatch = None;
    for (i, (a, r)) in actions.iter().zip(&log.records).enumerate() {
        let (event, post) = impl_next(c, &cur, a).remove(0);
        let replayed = [
            ("index", i.to_string(), r.index.to_string()),
            ("pre", state_digest(&cur), r.pre.clone()),
            ("event", event.to_string(), r.event.clone()),
            ("post", state_digest(&post), r.post.clone()),
        ];
        if let Some((column, replayed, logged)) = replayed.into_iter().find(|(_, x, y)| x != y) {
            mismatch = Some(Mismatch {
                index: i,
                column,
                logged,
                replayed,
            });
            break;
        }
        cur = post;
    }
    Ok(ReplayVerdict {
        records: log.records.len(),
        constants_match: log.header.constants_digest == constants_digest(c),
        mismatch,
    })
}
