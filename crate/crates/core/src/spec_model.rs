//! The abstract boundary-safety model.
//!
//! Abstract state is four variables: the recorded read paths, the recorded
//! tool calls, a step counter, and a halted flag. The next relation always
//! admits the stutter `(NoEffect, s)`, since the containment layer may reject
//! any action; an action that passes the policy guards additionally admits
//! its effect, which is recorded and consumes one step.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, BoundaryEvent};
use crate::lts::{self, TotalityViolation, TransitionSystem};

/// How `StartsWith(path, root)` is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixMode {
    /// `path` equals `root`, or extends it at a `/` boundary.
    #[default]
    SeparatorGuarded,
    /// Plain string prefix.
    Bare,
}

/// Which admitted actions consume a step of the loop bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepAccounting {
    /// Every dispatched action counts, so history length tracks the counter.
    #[default]
    AllDispatches,
    /// Only `StepAction` counts. Breaks the history-length invariant and is
    /// kept for comparison.
    StepActionOnly,
}

impl StepAccounting {
    pub fn counts(self, action: &Action) -> bool {
        match self {
            StepAccounting::AllDispatches => !matches!(action, Action::NoAction),
            StepAccounting::StepActionOnly => matches!(action, Action::Step),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("workspace root must be nonempty")]
    EmptyWorkspaceRoot,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConstants {
    pub workspace_root: String,
    pub allowed_tools: BTreeSet<String>,
    pub max_steps: u32,
    #[serde(default)]
    pub prefix_mode: PrefixMode,
    #[serde(default)]
    pub step_accounting: StepAccounting,
}

impl SpecConstants {
    pub fn new<I, T>(
        workspace_root: impl Into<String>,
        allowed_tools: I,
        max_steps: u32,
    ) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let c = SpecConstants {
            workspace_root: workspace_root.into(),
            allowed_tools: allowed_tools.into_iter().map(Into::into).collect(),
            max_steps,
            prefix_mode: PrefixMode::default(),
            step_accounting: StepAccounting::default(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_prefix_mode(mut self, mode: PrefixMode) -> Self {
        self.prefix_mode = mode;
        self
    }

    pub fn with_step_accounting(mut self, accounting: StepAccounting) -> Self {
        self.step_accounting = accounting;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.workspace_root.is_empty() {
            return Err(ModelError::EmptyWorkspaceRoot);
        }
        Ok(())
    }

    pub fn is_rooted(&self, path: &str) -> bool {
        starts_with_root(path, &self.workspace_root, self.prefix_mode)
    }

    pub fn is_allowed(&self, tool: &str) -> bool {
        self.allowed_tools.contains(tool)
    }
}

/// Byte-exact prefix test; no path normalization is performed.
pub fn starts_with_root(path: &str, root: &str, mode: PrefixMode) -> bool {
    let Some(rest) = path.strip_prefix(root) else {
        return false;
    };
    match mode {
        PrefixMode::Bare => true,
        PrefixMode::SeparatorGuarded => {
            rest.is_empty() || root.ends_with('/') || rest.starts_with('/')
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct SpecState {
    pub read_paths: Vec<String>,
    pub tool_calls: Vec<String>,
    pub step_count: u32,
    pub halted: bool,
}

/// The three conjuncts of the boundary safety predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Conjunct {
    ReadRooted,
    ToolAllowlisted,
    StepBounded,
}

/// A sequence variable quantified over by a safety conjunct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceField {
    ReadPaths,
    ToolCalls,
}

impl Conjunct {
    pub const ALL: [Conjunct; 3] = [
        Conjunct::ReadRooted,
        Conjunct::ToolAllowlisted,
        Conjunct::StepBounded,
    ];

    pub fn holds(
        self,
        c: &SpecConstants,
        read_paths: &[String],
        tool_calls: &[String],
        step_count: u32,
    ) -> bool {
        match self {
            Conjunct::ReadRooted => read_paths.iter().all(|p| c.is_rooted(p)),
            Conjunct::ToolAllowlisted => tool_calls.iter().all(|t| c.is_allowed(t)),
            Conjunct::StepBounded => step_count <= c.max_steps,
        }
    }

    /// The sequence the conjunct quantifies over, if any.
    pub fn quantified_field(self) -> Option<SequenceField> {
        match self {
            Conjunct::ReadRooted => Some(SequenceField::ReadPaths),
            Conjunct::ToolAllowlisted => Some(SequenceField::ToolCalls),
            Conjunct::StepBounded => None,
        }
    }
}

impl std::fmt::Display for Conjunct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

pub fn violated_conjuncts(c: &SpecConstants, s: &SpecState) -> Vec<Conjunct> {
    Conjunct::ALL
        .into_iter()
        .filter(|cj| !cj.holds(c, &s.read_paths, &s.tool_calls, s.step_count))
        .collect()
}

pub fn spec_safety(c: &SpecConstants, s: &SpecState) -> bool {
    violated_conjuncts(c, s).is_empty()
}

/// The admission guards of the boundary policy.
///
/// The faithful policy has all guards on and no slack. Turning a guard off,
/// or widening the step bound, is how seeded modeling errors and injected
/// containment faults are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Guards {
    pub workspace_root: bool,
    pub allowlist: bool,
    pub step_bound_slack: u32,
}

impl Default for Guards {
    fn default() -> Self {
        Guards {
            workspace_root: true,
            allowlist: true,
            step_bound_slack: 0,
        }
    }
}

impl Guards {
    /// The step bound in force: `max_steps` plus any slack.
    pub fn bound(&self, c: &SpecConstants) -> u32 {
        c.max_steps.saturating_add(self.step_bound_slack)
    }

    /// The event `action` produces if the policy admits it, given the loop
    /// counter and the halted flag.
    pub fn admits(
        &self,
        c: &SpecConstants,
        counter: u32,
        halted: bool,
        action: &Action,
    ) -> Option<BoundaryEvent> {
        if halted {
            return None;
        }
        if c.step_accounting.counts(action) && counter >= self.bound(c) {
            return None;
        }
        match action {
            Action::NoAction => None,
            Action::ReadPath(p) if self.workspace_root && !c.is_rooted(p) => None,
            Action::ToolCall(t) if self.allowlist && !c.is_allowed(t) => None,
            a => Some(a.effect()),
        }
    }
}

/// Records an admitted event on the boundary variables and advances the
/// counter. Shared by the abstract and concrete next relations.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record(
    c: &SpecConstants,
    guards: &Guards,
    read_paths: &mut Vec<String>,
    tool_calls: &mut Vec<String>,
    step_count: &mut u32,
    halted: &mut bool,
    action: &Action,
    event: &BoundaryEvent,
) {
    match event {
        BoundaryEvent::Read(p) => read_paths.push(p.clone()),
        BoundaryEvent::Tool(t) => tool_calls.push(t.clone()),
        BoundaryEvent::Step | BoundaryEvent::NoEffect => {}
    }
    if c.step_accounting.counts(action) {
        *step_count += 1;
        if *step_count >= guards.bound(c) {
            *halted = true;
        }
    }
}

pub fn spec_init(_c: &SpecConstants) -> SpecState {
    SpecState::default()
}

/// The abstract model as a transition system, parameterized by its guards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpecSystem {
    pub constants: SpecConstants,
    pub guards: Guards,
}

impl SpecSystem {
    pub fn new(constants: SpecConstants) -> Self {
        SpecSystem {
            constants,
            guards: Guards::default(),
        }
    }

    pub fn with_guards(constants: SpecConstants, guards: Guards) -> Self {
        SpecSystem { constants, guards }
    }

    pub fn next(&self, s: &SpecState, a: &Action) -> Vec<(BoundaryEvent, SpecState)> {
        let c = &self.constants;
        let mut out = Vec::with_capacity(2);
        if let Some(ev) = self.guards.admits(c, s.step_count, s.halted, a) {
            let mut post = s.clone();
            record(
                c,
                &self.guards,
                &mut post.read_paths,
                &mut post.tool_calls,
                &mut post.step_count,
                &mut post.halted,
                a,
                &ev,
            );
            out.push((ev, post));
        }
        out.push((BoundaryEvent::NoEffect, s.clone()));
        out
    }
}

impl TransitionSystem for SpecSystem {
    type State = SpecState;
    type Action = Action;
    type Event = BoundaryEvent;

    fn initial_state(&self) -> SpecState {
        spec_init(&self.constants)
    }

    fn successors(&self, s: &SpecState, a: &Action) -> Vec<(BoundaryEvent, SpecState)> {
        self.next(s, a)
    }
}

/// The faithful abstract next relation.
pub fn spec_next(c: &SpecConstants, s: &SpecState, a: &Action) -> Vec<(BoundaryEvent, SpecState)> {
    SpecSystem::new(c.clone()).next(s, a)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InitSafety {
    pub passed: bool,
    pub violated: Vec<Conjunct>,
}

/// Base case: the initial abstract state is safe.
pub fn check_init_safety(c: &SpecConstants) -> InitSafety {
    let violated = violated_conjuncts(c, &spec_init(c));
    InitSafety {
        passed: violated.is_empty(),
        violated,
    }
}

/// A step from a safe abstract state to an unsafe one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SafetyCounterexample {
    /// Actions leading from the initial state to `pre`.
    pub prefix: Vec<Action>,
    pub pre: SpecState,
    pub action: Action,
    pub event: BoundaryEvent,
    pub post: SpecState,
    pub violated: Vec<Conjunct>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SafetyPreservation {
    pub depth: usize,
    pub explored_states: usize,
    pub counterexample: Option<SafetyCounterexample>,
}

impl SafetyPreservation {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

/// Inductive step, checked exhaustively: every transition taken from a safe
/// state within `depth` steps of the initial state lands in a safe state.
///
/// Exploration is breadth-first, so the reported counterexample has a
/// shortest prefix.
pub fn check_safety_preserved(
    sys: &SpecSystem,
    alphabet: &[Action],
    depth: usize,
) -> Result<SafetyPreservation, TotalityViolation> {
    let c = &sys.constants;
    let reach = lts::reachable(sys, alphabet, depth)?;
    for pre in reach.within(depth) {
        if !spec_safety(c, pre) {
            continue;
        }
        for a in alphabet {
            for (event, post) in lts::step(sys, pre, a)? {
                let violated = violated_conjuncts(c, &post);
                if !violated.is_empty() {
                    return Ok(SafetyPreservation {
                        depth,
                        explored_states: reach.len(),
                        counterexample: Some(SafetyCounterexample {
                            prefix: reach.path_to(pre),
                            pre: pre.clone(),
                            action: a.clone(),
                            event,
                            post,
                            violated,
                        }),
                    });
                }
            }
        }
    }
    Ok(SafetyPreservation {
        depth,
        explored_states: reach.len(),
        counterexample: None,
    })
}
