//! Oracle strategies and the live enforcement loop.
//!
//! Every strategy is a source of [`Action`] values and nothing else; the loop
//! decides what each action is allowed to do.

use std::collections::HashSet;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::action::{Action, BoundaryEvent};
use crate::impl_model::{
    event_is_compliant, impl_init, impl_inv, impl_violations, ImplConstants, ImplEvent, ImplState,
    ImplSystem,
};
use crate::lts::{self, History, Oracle, Resolver, Step, Trace};
use crate::spec_model::{Conjunct, SpecConstants};

/// Weight multiplier the adversarial strategy puts on out-of-policy values.
pub const ADVERSARIAL_BOOST: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleStrategy {
    /// Plays the script, then `NoAction` forever.
    Scripted(Vec<Action>),
    SeededRandom {
        seed: u64,
        alphabet: Vec<Action>,
    },
    /// Uniform over the alphabet except that out-of-policy values weigh
    /// `boost` times as much.
    Adversarial {
        seed: u64,
        alphabet: Vec<Action>,
        boost: u32,
    },
    /// The `cursor`-th sequence of length `depth` over the alphabet, in
    /// lexicographic order of alphabet positions, then `NoAction`.
    Exhaustive {
        alphabet: Vec<Action>,
        depth: usize,
        cursor: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrategyError {
    #[error("strategy alphabet is empty")]
    EmptyAlphabet,
    #[error("cursor {cursor} is past the last sequence of length {depth}")]
    CursorOutOfRange { cursor: u64, depth: usize },
}

impl OracleStrategy {
    pub fn adversarial(seed: u64, alphabet: Vec<Action>) -> Self {
        OracleStrategy::Adversarial {
            seed,
            alphabet,
            boost: ADVERSARIAL_BOOST,
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        match self {
            OracleStrategy::Scripted(_) => Ok(()),
            OracleStrategy::SeededRandom { alphabet, .. }
            | OracleStrategy::Adversarial { alphabet, .. } => {
                if alphabet.is_empty() {
                    Err(StrategyError::EmptyAlphabet)
                } else {
                    Ok(())
                }
            }
            OracleStrategy::Exhaustive {
                alphabet,
                depth,
                cursor,
            } => {
                if alphabet.is_empty() {
                    return Err(StrategyError::EmptyAlphabet);
                }
                let total = (alphabet.len() as u64).checked_pow(*depth as u32);
                match total {
                    Some(n) if *cursor >= n => Err(StrategyError::CursorOutOfRange {
                        cursor: *cursor,
                        depth: *depth,
                    }),
                    _ => Ok(()),
                }
            }
        }
    }

    /// A short name for logs and reports.
    pub fn label(&self) -> String {
        match self {
            OracleStrategy::Scripted(s) => format!("scripted({})", s.len()),
            OracleStrategy::SeededRandom { .. } => "random".into(),
            OracleStrategy::Adversarial { boost, .. } => format!("adversarial(boost={boost})"),
            OracleStrategy::Exhaustive { depth, cursor, .. } => {
                format!("exhaustive(depth={depth},cursor={cursor})")
            }
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            OracleStrategy::SeededRandom { seed, .. }
            | OracleStrategy::Adversarial { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    fn oracle(&self, c: &SpecConstants) -> Box<dyn Oracle<ImplState, Action, ImplEvent>> {
        match self {
            OracleStrategy::Scripted(script) => Box::new(Script {
                actions: script.clone(),
            }),
            OracleStrategy::SeededRandom { seed, alphabet } => Box::new(Weighted::new(
                *seed,
                alphabet.clone(),
                vec![1; alphabet.len()],
            )),
            OracleStrategy::Adversarial {
                seed,
                alphabet,
                boost,
            } => {
                let weights = alphabet
                    .iter()
                    .map(|a| if in_policy(c, a) { 1 } else { *boost })
                    .collect();
                Box::new(Weighted::new(*seed, alphabet.clone(), weights))
            }
            OracleStrategy::Exhaustive {
                alphabet,
                depth,
                cursor,
            } => Box::new(Script {
                actions: nth_sequence(alphabet, *depth, *cursor),
            }),
        }
    }
}

/// Whether an action's argument satisfies the boundary policy. Counter
/// state is not considered.
pub fn in_policy(c: &SpecConstants, a: &Action) -> bool {
    match a {
        Action::ReadPath(p) => c.is_rooted(p),
        Action::ToolCall(t) => c.is_allowed(t),
        Action::NoAction | Action::Step => true,
    }
}

fn nth_sequence(alphabet: &[Action], depth: usize, mut cursor: u64) -> Vec<Action> {
    let n = alphabet.len() as u64;
    let mut out = vec![Action::NoAction; depth];
    for slot in out.iter_mut().rev() {
        *slot = alphabet[(cursor % n) as usize].clone();
        cursor /= n;
    }
    out
}

struct Script {
    actions: Vec<Action>,
}

impl Oracle<ImplState, Action, ImplEvent> for Script {
    fn choose(&mut self, h: &History<'_, ImplState, Action, ImplEvent>) -> Action {
        self.actions
            .get(h.trace.len())
            .cloned()
            .unwrap_or(Action::NoAction)
    }
}

struct Weighted {
    rng: ChaCha8Rng,
    alphabet: Vec<Action>,
    dist: WeightedIndex<u32>,
}

impl Weighted {
    fn new(seed: u64, alphabet: Vec<Action>, weights: Vec<u32>) -> Self {
        Weighted {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: WeightedIndex::new(weights).expect("alphabet is nonempty with positive weights"),
            alphabet,
        }
    }
}

impl Oracle<ImplState, Action, ImplEvent> for Weighted {
    fn choose(&mut self, _: &History<'_, ImplState, Action, ImplEvent>) -> Action {
        self.alphabet[self.dist.sample(&mut self.rng)].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunRecord {
    pub trace: Trace<ImplState, Action, ImplEvent>,
    /// The events that crossed the boundary, in order. Stutters are omitted.
    pub emitted_events: Vec<ImplEvent>,
    /// Stutters triggered by an action other than `NoAction`.
    pub rejected_count: usize,
    pub final_state: ImplState,
}

impl RunRecord {
    fn from_trace(c: &ImplConstants, trace: Trace<ImplState, Action, ImplEvent>) -> Self {
        let emitted_events = trace
            .events()
            .filter(|e| e.event().is_effect())
            .cloned()
            .collect();
        let rejected_count = trace
            .steps
            .iter()
            .filter(|st| !st.event.event().is_effect() && st.action != Action::NoAction)
            .count();
        let final_state = trace.last_state(&impl_init(c)).clone();
        RunRecord {
            trace,
            emitted_events,
            rejected_count,
            final_state,
        }
    }

    /// The first step that emits an out-of-policy event or lands in a state
    /// breaking safety or the invariant.
    pub fn violation(&self, c: &ImplConstants) -> Option<Violation> {
        scan(c, &self.trace)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    OutOfPolicyEvent { event: BoundaryEvent },
    UnsafeState { conjuncts: Vec<Conjunct> },
    InvariantBroken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// The full action sequence being driven.
    pub sequence: Vec<Action>,
    /// Index of the offending step.
    pub step: usize,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

fn scan(c: &ImplConstants, trace: &Trace<ImplState, Action, ImplEvent>) -> Option<Violation> {
    let found = |step, kind| {
        Some(Violation {
            sequence: trace.actions().cloned().collect(),
            step,
            kind,
        })
    };
    for (
        i,
        Step {
            pre, event, post, ..
        },
    ) in trace.steps.iter().enumerate()
    {
        if !event_is_compliant(c, pre, event.event()) {
            return found(
                i,
                ViolationKind::OutOfPolicyEvent {
                    event: event.event().clone(),
                },
            );
        }
        let conjuncts = impl_violations(c, post);
        if !conjuncts.is_empty() {
            return found(i, ViolationKind::UnsafeState { conjuncts });
        }
        if !impl_inv(c, post) {
            return found(i, ViolationKind::InvariantBroken);
        }
    }
    None
}

/// Runs the enforcement loop for `steps` oracle queries.
pub fn drive(
    c: &ImplConstants,
    strategy: &OracleStrategy,
    steps: usize,
) -> Result<RunRecord, StrategyError> {
    strategy.validate()?;
    let sys = ImplSystem::new(c.clone());
    let mut oracle = strategy.oracle(&c.spec);
    let trace = lts::run_with_oracle(&sys, oracle.as_mut(), steps, &mut Resolver::FirstMatch)
        .expect("the dispatch loop is total");
    Ok(RunRecord::from_trace(c, trace))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepVerdict {
    pub depth: usize,
    pub sequences: usize,
    /// Distinct states visited, including the initial state.
    pub states_visited: usize,
    pub violation: Option<Violation>,
}

impl SweepVerdict {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Drives every action sequence of length `depth` over `alphabet` and scans
/// each run. Stops at the first violating sequence.
pub fn sweep(c: &ImplConstants, alphabet: &[Action], depth: usize) -> SweepVerdict {
    let mut visited = HashSet::new();
    visited.insert(impl_init(c));
    let verdict = sweep_with(c, alphabet, depth, &mut |s| {
        visited.insert(s.clone());
    });
    SweepVerdict {
        states_visited: visited.len(),
        ..verdict
    }
}

fn sweep_with(
    c: &ImplConstants,
    alphabet: &[Action],
    depth: usize,
    visit: &mut dyn FnMut(&ImplState),
) -> SweepVerdict {
    let sys = ImplSystem::new(c.clone());
    let mut sequences = 0;
    for trace in lts::enumerate_havoc_traces(&sys, alphabet, depth) {
        let trace = trace.expect("the dispatch loop is total");
        sequences += 1;
        for st in &trace.steps {
            visit(&st.post);
        }
        if let Some(v) = scan(c, &trace) {
            return SweepVerdict {
                depth,
                sequences,
                states_visited: 0,
                violation: Some(v),
            };
        }
    }
    SweepVerdict {
        depth,
        sequences,
        states_visited: 0,
        violation: None,
    }
}

/// All states visited by a sweep, for inclusion checks against single runs.
pub fn sweep_states(c: &ImplConstants, alphabet: &[Action], depth: usize) -> HashSet<ImplState> {
    let mut visited = HashSet::new();
    visited.insert(impl_init(c));
    sweep_with(c, alphabet, depth, &mut |s| {
        visited.insert(s.clone());
    });
    visited
}
