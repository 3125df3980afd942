//! Labeled transition systems, traces, and havoc enumeration.
//!
//! A system is given by an initial state and a relational step: for a state
//! and an action it returns every `(event, next_state)` pair the relation
//! admits. Totality (at least one pair for every state and action) is not a
//! type-level guarantee; [`step`] reports a [`TotalityViolation`] when the
//! relation comes back empty.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A relational transition system over cloneable values.
pub trait TransitionSystem {
    type State: Clone + Eq + Hash + Debug;
    type Action: Clone + Eq + Hash + Debug;
    type Event: Clone + Eq + Hash + Debug;

    fn initial_state(&self) -> Self::State;

    /// Every `(event, next_state)` pair related to `(state, action)`.
    fn successors(
        &self,
        state: &Self::State,
        action: &Self::Action,
    ) -> Vec<(Self::Event, Self::State)>;
}

/// The `(event, next_state)` pairs of one step.
pub type Successors<T> = Vec<(
    <T as TransitionSystem>::Event,
    <T as TransitionSystem>::State,
)>;

/// A trace over a system's own state, action and event types.
pub type SystemTrace<T> = Trace<
    <T as TransitionSystem>::State,
    <T as TransitionSystem>::Action,
    <T as TransitionSystem>::Event,
>;

type Frame<T> = Vec<(
    <T as TransitionSystem>::Action,
    <T as TransitionSystem>::Event,
    <T as TransitionSystem>::State,
)>;

/// The step relation returned no successors.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step relation is not total: no successor for action {action} in state {state}")]
pub struct TotalityViolation {
    pub state: String,
    pub action: String,
}

/// Evaluates the step relation, rejecting an empty successor set.
pub fn step<T: TransitionSystem>(
    sys: &T,
    state: &T::State,
    action: &T::Action,
) -> Result<Successors<T>, TotalityViolation> {
    let succ = sys.successors(state, action);
    if succ.is_empty() {
        return Err(TotalityViolation {
            state: format!("{state:?}"),
            action: format!("{action:?}"),
        });
    }
    Ok(succ)
}

/// One transition `pre --action/event--> post`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step<S, A, E> {
    pub pre: S,
    pub action: A,
    pub event: E,
    pub post: S,
}

/// A finite trace prefix. Empty traces are valid and denote the initial state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trace<S, A, E> {
    pub steps: Vec<Step<S, A, E>>,
}

impl<S, A, E> Default for Trace<S, A, E> {
    fn default() -> Self {
        Self { steps: Vec::new() }
    }
}

/// Why a sequence of steps is not a trace of a given system.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("first pre-state is not the initial state")]
    BadInitial,
    #[error("step {index}: pre-state does not equal the previous post-state")]
    Unchained { index: usize },
    #[error("step {index}: not a member of the step relation")]
    NotAStep { index: usize },
}

impl<S, A, E> Trace<S, A, E> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = &A> {
        self.steps.iter().map(|s| &s.action)
    }

    pub fn events(&self) -> impl Iterator<Item = &E> {
        self.steps.iter().map(|s| &s.event)
    }
}

impl<S: Clone, A, E> Trace<S, A, E> {
    /// States visited by the trace, starting from `initial`.
    ///
    /// `initial` is only used when the trace is empty; otherwise the first
    /// pre-state is taken from the trace itself.
    pub fn states(&self, initial: &S) -> Vec<S> {
        match self.steps.first() {
            None => vec![initial.clone()],
            Some(first) => std::iter::once(first.pre.clone())
                .chain(self.steps.iter().map(|s| s.post.clone()))
                .collect(),
        }
    }

    /// The state the trace ends in.
    pub fn last_state<'a>(&'a self, initial: &'a S) -> &'a S {
        self.steps.last().map(|s| &s.post).unwrap_or(initial)
    }
}

impl<S: Clone + PartialEq, A, E: PartialEq> Trace<S, A, E> {
    /// Checks the trace invariants against `sys`: initial state, chaining,
    /// and membership of every step in the relation.
    pub fn validate<T>(&self, sys: &T) -> Result<(), TraceError>
    where
        T: TransitionSystem<State = S, Action = A, Event = E>,
    {
        let mut expected_pre = sys.initial_state();
        for (index, st) in self.steps.iter().enumerate() {
            if st.pre != expected_pre {
                return Err(if index == 0 {
                    TraceError::BadInitial
                } else {
                    TraceError::Unchained { index }
                });
            }
            let related = sys
                .successors(&st.pre, &st.action)
                .into_iter()
                .any(|(e, s)| e == st.event && s == st.post);
            if !related {
                return Err(TraceError::NotAStep { index });
            }
            expected_pre = st.post.clone();
        }
        Ok(())
    }
}

/// Everything an oracle may see when choosing the next action.
pub struct History<'a, S, A, E> {
    pub current: &'a S,
    pub trace: &'a Trace<S, A, E>,
}

/// A source of actions. The returned value is always a member of the action
/// type, which is the whole content of the havoc adversary model.
pub trait Oracle<S, A, E> {
    fn choose(&mut self, history: &History<'_, S, A, E>) -> A;
}

/// Selects among several successors of a nondeterministic step.
#[derive(Debug, Clone)]
pub enum Resolver {
    FirstMatch,
    Seeded(Box<ChaCha8Rng>),
}

impl Resolver {
    pub fn seeded(seed: u64) -> Self {
        Resolver::Seeded(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    fn pick<X>(&mut self, mut options: Vec<X>) -> X {
        match self {
            Resolver::FirstMatch => options.swap_remove(0),
            Resolver::Seeded(rng) => {
                let i = rng.gen_range(0..options.len());
                options.swap_remove(i)
            }
        }
    }
}

/// Runs `oracle` for `steps` queries and returns the compatible trace chosen
/// by `resolver`.
pub fn run_with_oracle<T, O>(
    sys: &T,
    oracle: &mut O,
    steps: usize,
    resolver: &mut Resolver,
) -> Result<SystemTrace<T>, TotalityViolation>
where
    T: TransitionSystem,
    O: Oracle<T::State, T::Action, T::Event> + ?Sized,
{
    let mut trace = Trace::default();
    let mut current = sys.initial_state();
    for _ in 0..steps {
        let action = oracle.choose(&History {
            current: &current,
            trace: &trace,
        });
        let (event, post) = resolver.pick(step(sys, &current, &action)?);
        trace.steps.push(Step {
            pre: current,
            action,
            event,
            post: post.clone(),
        });
        current = post;
    }
    Ok(trace)
}

/// Lazy depth-first enumeration of every havoc trace of an exact length.
///
/// At each position every alphabet action is tried and every related
/// successor is followed, so the stream is exhaustive; it is duplicate-free
/// whenever the relation does not return repeated pairs.
pub struct HavocTraces<'a, T: TransitionSystem> {
    sys: &'a T,
    alphabet: &'a [T::Action],
    depth: usize,
    // Each frame holds the candidate (action, event, post) triples still to be
    // explored at that position.
    stack: Vec<Frame<T>>,
    prefix: Vec<Step<T::State, T::Action, T::Event>>,
    started: bool,
    failed: bool,
}

impl<'a, T: TransitionSystem> HavocTraces<'a, T> {
    fn frame_for(&self, state: &T::State) -> Result<Frame<T>, TotalityViolation> {
        let mut frame = Vec::new();
        for a in self.alphabet {
            for (e, s) in step(self.sys, state, a)? {
                frame.push((a.clone(), e, s));
            }
        }
        // popped from the back, so reverse to keep alphabet order
        frame.reverse();
        Ok(frame)
    }

    fn current_state(&self) -> T::State {
        self.prefix
            .last()
            .map(|s| s.post.clone())
            .unwrap_or_else(|| self.sys.initial_state())
    }
}

impl<T: TransitionSystem> Iterator for HavocTraces<'_, T> {
    type Item = Result<SystemTrace<T>, TotalityViolation>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if !self.started {
            self.started = true;
            if self.depth == 0 {
                return Some(Ok(Trace::default()));
            }
            if self.alphabet.is_empty() {
                return None;
            }
            match self.frame_for(&self.sys.initial_state()) {
                Ok(f) => self.stack.push(f),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        loop {
            let frame = self.stack.last_mut()?;
            let Some((action, event, post)) = frame.pop() else {
                self.stack.pop();
                self.prefix.pop();
                continue;
            };
            let pre = self.current_state();
            self.prefix.push(Step {
                pre,
                action,
                event,
                post: post.clone(),
            });
            if self.prefix.len() == self.depth {
                let out = Trace {
                    steps: self.prefix.clone(),
                };
                self.prefix.pop();
                return Some(Ok(out));
            }
            match self.frame_for(&post) {
                Ok(f) => self.stack.push(f),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Every trace of length exactly `depth` under havoc choice of actions.
pub fn enumerate_havoc_traces<'a, T: TransitionSystem>(
    sys: &'a T,
    alphabet: &'a [T::Action],
    depth: usize,
) -> HavocTraces<'a, T> {
    HavocTraces {
        sys,
        alphabet,
        depth,
        stack: Vec::new(),
        prefix: Vec::new(),
        started: false,
        failed: false,
    }
}

/// States reachable from the initial state within a bounded number of steps,
/// in breadth-first order, with enough bookkeeping to rebuild a shortest
/// action prefix to each of them.
#[derive(Debug, Clone)]
pub struct Reachable<S, A> {
    order: Vec<S>,
    distance: HashMap<S, usize>,
    parent: HashMap<S, (S, A)>,
}

impl<S: Clone + Eq + Hash, A: Clone> Reachable<S, A> {
    /// All reachable states, breadth-first.
    pub fn states(&self) -> &[S] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, s: &S) -> bool {
        self.distance.contains_key(s)
    }

    /// Length of the shortest path from the initial state.
    pub fn distance(&self, s: &S) -> Option<usize> {
        self.distance.get(s).copied()
    }

    /// States whose distance is strictly below `bound`, breadth-first.
    pub fn within(&self, bound: usize) -> impl Iterator<Item = &S> {
        self.order
            .iter()
            .take_while(move |s| self.distance[*s] < bound)
    }

    /// A shortest action sequence leading from the initial state to `s`.
    pub fn path_to(&self, s: &S) -> Vec<A> {
        let mut path = Vec::new();
        let mut cur = s;
        while let Some((prev, a)) = self.parent.get(cur) {
            path.push(a.clone());
            cur = prev;
        }
        path.reverse();
        path
    }
}

/// Breadth-first reachability within `depth` steps.
pub fn reachable<T: TransitionSystem>(
    sys: &T,
    alphabet: &[T::Action],
    depth: usize,
) -> Result<Reachable<T::State, T::Action>, TotalityViolation> {
    let init = sys.initial_state();
    let mut out = Reachable {
        order: vec![init.clone()],
        distance: HashMap::from([(init, 0)]),
        parent: HashMap::new(),
    };
    let mut cursor = 0;
    while cursor < out.order.len() {
        let s = out.order[cursor].clone();
        cursor += 1;
        let d = out.distance[&s];
        if d >= depth {
            continue;
        }
        for a in alphabet {
            for (_, next) in step(sys, &s, a)? {
                if let Entry::Vacant(v) = out.distance.entry(next.clone()) {
                    v.insert(d + 1);
                    out.parent.insert(next.clone(), (s.clone(), a.clone()));
                    out.order.push(next);
                }
            }
        }
    }
    Ok(out)
}
