//! Boundary-event refinement between the concrete loop and the abstract model.
//!
//! The state relation is the graph of a variables abstraction restricted to
//! states satisfying an inductive invariant; the event relation is the graph
//! of an event abstraction. With relations given as functions the existential
//! in step simulation becomes a membership test: the abstract successor set
//! is finite, so it can be searched.
//!
//! The three obligations are
//!
//! * **R1**: the abstraction of the concrete initial state is the abstract
//!   initial state, and the invariant holds there;
//! * **R2**: every concrete step from a related state is matched by an
//!   abstract step *with the same action*, whose event and post-state are the
//!   abstractions of the concrete ones;
//! * **R3**: abstract safety at the matched post-state implies concrete
//!   safety at the concrete post-state.
//!
//! Step obligations are checked on two state sets. The first is every state
//! reachable from the initial state in fewer than `depth` steps. The second
//! is the *envelope*: every well-formed bookkeeping shape up to one past the
//! step bound (each node, counter, halted flag, history length, and history
//! tail shape). Reachable states alone cannot tell a strong invariant from a
//! weak one, because both hold everywhere reachable; the envelope is what
//! makes the check relative to the invariant, the way an inductive proof is.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, BoundaryEvent, EventKind};
use crate::impl_model::{
    impl_init, impl_inv_with, impl_next, impl_violations, HistoryEntry, ImplConstants, ImplEvent,
    ImplState, ImplSystem, InvariantClause,
};
use crate::lts::{self, Step, TotalityViolation, Trace};
use crate::spec_model::{
    spec_init, spec_safety, violated_conjuncts, Conjunct, Guards, SequenceField, SpecConstants,
    SpecState, SpecSystem,
};

/// Abstraction functions and the inductive invariant.
pub trait Abstraction {
    fn constants(&self, c: &ImplConstants) -> SpecConstants;
    fn variables(&self, s: &ImplState) -> SpecState;
    fn event(&self, e: &ImplEvent) -> BoundaryEvent;
    fn inv(&self, c: &ImplConstants, s: &ImplState) -> bool;
}

/// Where each concrete event variant is sent by the event abstraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventMap {
    pub read: EventKind,
    pub tool: EventKind,
    pub step: EventKind,
}

impl Default for EventMap {
    fn default() -> Self {
        EventMap {
            read: EventKind::ReadEvent,
            tool: EventKind::ToolEvent,
            step: EventKind::StepEvent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BundleError {
    #[error("event abstraction sends {from} to {to}, which cannot carry its argument")]
    EventPayloadMismatch { from: EventKind, to: EventKind },
}

/// A declarative abstraction: the projection of the boundary fields (with
/// optional erasure), an event map, and the invariant clauses in force.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionBundle {
    #[serde(default)]
    pub events: EventMap,
    /// Sequence fields projected to the empty sequence.
    #[serde(default)]
    pub erase: BTreeSet<SequenceField>,
    #[serde(default = "InvariantClause::all")]
    pub invariant: BTreeSet<InvariantClause>,
}

impl Default for AbstractionBundle {
    fn default() -> Self {
        AbstractionBundle {
            events: EventMap::default(),
            erase: BTreeSet::new(),
            invariant: InvariantClause::all(),
        }
    }
}

fn carries_string(k: EventKind) -> bool {
    matches!(k, EventKind::ReadEvent | EventKind::ToolEvent)
}

impl AbstractionBundle {
    /// Checks that every event target can be built from its source: string
    /// carrying variants map to string carrying variants or `NoEffect`, and
    /// `StepEvent` maps to `StepEvent` or `NoEffect`.
    pub fn type_check(&self) -> Result<(), BundleError> {
        let pairs = [
            (EventKind::ReadEvent, self.events.read),
            (EventKind::ToolEvent, self.events.tool),
            (EventKind::StepEvent, self.events.step),
        ];
        for (from, to) in pairs {
            let ok = to == EventKind::NoEffect || carries_string(from) == carries_string(to);
            if !ok {
                return Err(BundleError::EventPayloadMismatch { from, to });
            }
        }
        Ok(())
    }

    fn map_event(target: EventKind, payload: Option<&str>) -> BoundaryEvent {
        match (target, payload) {
            (EventKind::ReadEvent, Some(p)) => BoundaryEvent::Read(p.to_string()),
            (EventKind::ToolEvent, Some(p)) => BoundaryEvent::Tool(p.to_string()),
            (EventKind::StepEvent, None) => BoundaryEvent::Step,
            // ill-typed targets are rejected by type_check; collapse otherwise
            _ => BoundaryEvent::NoEffect,
        }
    }
}

/// The faithful abstraction: identity on the four shared fields, same-named
/// events, the full invariant.
pub fn default_bundle() -> AbstractionBundle {
    AbstractionBundle::default()
}

impl Abstraction for AbstractionBundle {
    fn constants(&self, c: &ImplConstants) -> SpecConstants {
        c.spec.clone()
    }

    fn variables(&self, s: &ImplState) -> SpecState {
        SpecState {
            read_paths: if self.erase.contains(&SequenceField::ReadPaths) {
                Vec::new()
            } else {
                s.read_paths.clone()
            },
            tool_calls: if self.erase.contains(&SequenceField::ToolCalls) {
                Vec::new()
            } else {
                s.tool_calls.clone()
            },
            step_count: s.step_count,
            halted: s.halted,
        }
    }

    fn event(&self, e: &ImplEvent) -> BoundaryEvent {
        match e.event() {
            BoundaryEvent::Read(p) => Self::map_event(self.events.read, Some(p)),
            BoundaryEvent::Tool(t) => Self::map_event(self.events.tool, Some(t)),
            BoundaryEvent::Step => Self::map_event(self.events.step, None),
            BoundaryEvent::NoEffect => BoundaryEvent::NoEffect,
        }
    }

    fn inv(&self, c: &ImplConstants, s: &ImplState) -> bool {
        impl_inv_with(c, s, &self.invariant)
    }
}

/// How a state entered the checked set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Reachable from the initial state by these actions.
    Reachable { prefix: Vec<Action> },
    /// A member of the bounded envelope.
    Envelope,
}

/// A concrete step that breaks an obligation, with its abstract image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepCounterexample {
    pub origin: Origin,
    pub pre: ImplState,
    pub action: Action,
    pub event: ImplEvent,
    pub post: ImplState,
    pub abstract_pre: SpecState,
    pub abstract_event: BoundaryEvent,
    pub abstract_post: SpecState,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InitCounterexample {
    pub state: ImplState,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Obligation<C> {
    Pass,
    Fail { counterexample: C },
}

impl<C> Obligation<C> {
    pub fn passed(&self) -> bool {
        matches!(self, Obligation::Pass)
    }

    pub fn counterexample(&self) -> Option<&C> {
        match self {
            Obligation::Pass => None,
            Obligation::Fail { counterexample } => Some(counterexample),
        }
    }

    fn record(&mut self, cex: impl FnOnce() -> C) {
        if self.passed() {
            *self = Obligation::Fail {
                counterexample: cex(),
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RefinementVerdict {
    pub depth: usize,
    /// Distinct invariant-satisfying states whose step obligations were checked.
    pub explored_states: usize,
    pub reachable_states: usize,
    pub envelope_states: usize,
    pub checked_steps: usize,
    pub r1: Obligation<InitCounterexample>,
    pub r2: Obligation<StepCounterexample>,
    pub r3: Obligation<StepCounterexample>,
    pub inv_inductive: Obligation<StepCounterexample>,
}

impl RefinementVerdict {
    pub fn passed(&self) -> bool {
        self.r1.passed() && self.r2.passed() && self.r3.passed() && self.inv_inductive.passed()
    }
}

/// A concrete step paired with the abstract step it was matched against.
/// Both carry the same action value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedStep<'a> {
    pub concrete: &'a Step<ImplState, Action, ImplEvent>,
    pub abstract_step: Step<SpecState, Action, BoundaryEvent>,
}

/// R1: invariant at the concrete initial state, and the abstraction of that
/// state is the abstract initial state.
pub fn check_refinement_init(
    c: &ImplConstants,
    abs: &dyn Abstraction,
) -> Obligation<InitCounterexample> {
    let s0 = impl_init(c);
    let detail = if !abs.inv(c, &s0) {
        Some("invariant does not hold at the initial state")
    } else if abs.variables(&s0) != spec_init(&abs.constants(c)) {
        Some("abstraction of the initial state is not the abstract initial state")
    } else {
        None
    };
    match detail {
        None => Obligation::Pass,
        Some(d) => Obligation::Fail {
            counterexample: InitCounterexample {
                state: s0,
                detail: d.to_string(),
            },
        },
    }
}

/// The bounded envelope of well-formed concrete states.
///
/// Boundary sequences are left empty: no invariant clause mentions them, and
/// both sides of every obligation treat them identically.
pub fn envelope(c: &ImplConstants) -> Vec<ImplState> {
    let bound = c.spec.max_steps.saturating_add(1);
    let mut out = Vec::new();
    for (node, _) in c.graph.nodes() {
        for step_count in 0..=bound {
            for halted in [false, true] {
                for len in 0..=bound as usize {
                    let history = vec![
                        HistoryEntry {
                            node: node.clone(),
                            action: Action::Step,
                        };
                        len
                    ];
                    let mut tails = vec![(None, Action::NoAction)];
                    if let Some(last) = history.last() {
                        tails.push((Some(last.node.clone()), last.action.clone()));
                    }
                    tails.push((Some(node.clone()), Action::NoAction));
                    for (last_node, last_action) in tails {
                        out.push(ImplState {
                            read_paths: Vec::new(),
                            tool_calls: Vec::new(),
                            step_count,
                            halted,
                            history: history.clone(),
                            current_node: node.clone(),
                            last_node,
                            last_action,
                        });
                    }
                }
            }
        }
    }
    out
}

/// R2, R3 and inductiveness of the invariant over reachable states within
/// `depth` and, when `depth >= 1`, over the envelope.
///
/// `spec_guards` selects the abstract next relation. `observe` sees every
/// successfully matched pair of steps.
pub fn check_refinement_next_with(
    c: &ImplConstants,
    spec_guards: &Guards,
    abs: &dyn Abstraction,
    alphabet: &[Action],
    depth: usize,
    observe: &mut dyn FnMut(&MatchedStep<'_>),
) -> Result<RefinementVerdict, TotalityViolation> {
    let sys = ImplSystem::new(c.clone());
    let spec_c = abs.constants(c);
    let spec = SpecSystem::with_guards(spec_c.clone(), *spec_guards);

    let reach = lts::reachable(&sys, alphabet, depth)?;
    let mut candidates: Vec<(ImplState, Origin)> = reach
        .within(depth)
        .map(|s| {
            (
                s.clone(),
                Origin::Reachable {
                    prefix: reach.path_to(s),
                },
            )
        })
        .collect();
    if depth >= 1 {
        candidates.extend(envelope(c).into_iter().map(|s| (s, Origin::Envelope)));
    }

    let mut seen = HashSet::new();
    let mut verdict = RefinementVerdict {
        depth,
        explored_states: 0,
        reachable_states: 0,
        envelope_states: 0,
        checked_steps: 0,
        r1: check_refinement_init(c, abs),
        r2: Obligation::Pass,
        r3: Obligation::Pass,
        inv_inductive: Obligation::Pass,
    };

    for (pre, origin) in candidates {
        if !abs.inv(c, &pre) || !seen.insert(pre.clone()) {
            continue;
        }
        verdict.explored_states += 1;
        match origin {
            Origin::Reachable { .. } => verdict.reachable_states += 1,
            Origin::Envelope => verdict.envelope_states += 1,
        }
        let abstract_pre = abs.variables(&pre);
        for a in alphabet {
            for (event, post) in lts::step(&sys, &pre, a)? {
                verdict.checked_steps += 1;
                let abstract_event = abs.event(&event);
                let abstract_post = abs.variables(&post);
                let matched = spec
                    .next(&abstract_pre, a)
                    .into_iter()
                    .any(|(e, s)| e == abstract_event && s == abstract_post);
                let cex = |detail: String| StepCounterexample {
                    origin: origin.clone(),
                    pre: pre.clone(),
                    action: a.clone(),
                    event: event.clone(),
                    post: post.clone(),
                    abstract_pre: abstract_pre.clone(),
                    abstract_event: abstract_event.clone(),
                    abstract_post: abstract_post.clone(),
                    detail,
                };
                if !abs.inv(c, &post) {
                    verdict
                        .inv_inductive
                        .record(|| cex("invariant does not hold after the step".into()));
                }
                if !matched {
                    verdict.r2.record(|| {
                        cex(format!(
                            "no abstract step under {a} emits {abstract_event} reaching the abstract post-state"
                        ))
                    });
                    continue;
                }
                if spec_safety(&spec_c, &abstract_post) {
                    let violated = impl_violations(c, &post);
                    if !violated.is_empty() {
                        verdict.r3.record(|| {
                            cex(format!(
                                "abstract post-state is safe but concrete post-state violates {violated:?}"
                            ))
                        });
                    }
                }
                let concrete = Step {
                    pre: pre.clone(),
                    action: a.clone(),
                    event: event.clone(),
                    post: post.clone(),
                };
                observe(&MatchedStep {
                    concrete: &concrete,
                    abstract_step: Step {
                        pre: abstract_pre.clone(),
                        action: a.clone(),
                        event: abstract_event.clone(),
                        post: abstract_post.clone(),
                    },
                });
            }
        }
    }
    Ok(verdict)
}

pub fn check_refinement_next(
    c: &ImplConstants,
    spec_guards: &Guards,
    abs: &dyn Abstraction,
    alphabet: &[Action],
    depth: usize,
) -> Result<RefinementVerdict, TotalityViolation> {
    check_refinement_next_with(c, spec_guards, abs, alphabet, depth, &mut |_| {})
}

/// The three stages of the trace-level soundness argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Stage {
    /// Lift the concrete trace to an abstract havoc trace over the same actions.
    TraceRefinesSpec,
    /// Abstract safety at every lifted state.
    SpecSafetyAlongTrace,
    /// Concrete safety at every concrete state.
    SpecSafetyLiftsToImpl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageFailure {
    pub stage: Stage,
    /// State index for state checks, step index for step checks.
    pub index: usize,
    pub conjuncts: Vec<Conjunct>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SoundnessVerdict {
    /// The first failure of each stage, in stage order. Every stage is
    /// evaluated even when an earlier one fails.
    pub failures: Vec<StageFailure>,
}

impl SoundnessVerdict {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn first_failure(&self) -> Option<&StageFailure> {
        self.failures.first()
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageFailure> {
        self.failures.iter().find(|f| f.stage == stage)
    }
}

/// End-to-end soundness along one trace: every state of the trace has
/// workspace-rooted reads, allowlisted tool calls, and a bounded counter,
/// established by lifting, abstract safety, and translation back.
pub fn check_soundness(
    c: &ImplConstants,
    spec_guards: &Guards,
    abs: &dyn Abstraction,
    trace: &Trace<ImplState, Action, ImplEvent>,
) -> SoundnessVerdict {
    let mut failures = Vec::new();
    if trace.is_empty() {
        return SoundnessVerdict { failures };
    }
    let spec_c = abs.constants(c);
    let spec = SpecSystem::with_guards(spec_c.clone(), *spec_guards);
    let states = trace.states(&impl_init(c));
    let lifted: Vec<SpecState> = states.iter().map(|s| abs.variables(s)).collect();

    let lift_failure = (|| {
        let fail = |index, detail: &str| {
            Some(StageFailure {
                stage: Stage::TraceRefinesSpec,
                index,
                conjuncts: Vec::new(),
                detail: detail.to_string(),
            })
        };
        if !abs.inv(c, &states[0]) {
            return fail(0, "invariant fails at the first state");
        }
        if lifted[0] != spec_init(&spec_c) {
            return fail(
                0,
                "first state does not abstract to the abstract initial state",
            );
        }
        for (i, st) in trace.steps.iter().enumerate() {
            if i > 0 && st.pre != trace.steps[i - 1].post {
                return fail(i, "step does not start where the previous one ended");
            }
            if !abs.inv(c, &st.post) {
                return fail(i, "invariant fails after the step");
            }
            let ev = abs.event(&st.event);
            let post = abs.variables(&st.post);
            let matched = spec
                .next(&abs.variables(&st.pre), &st.action)
                .into_iter()
                .any(|(e, s)| e == ev && s == post);
            if !matched {
                return fail(i, "no abstract step with the same action matches");
            }
        }
        None
    })();
    failures.extend(lift_failure);

    if let Some((index, s)) = lifted
        .iter()
        .enumerate()
        .find(|(_, s)| !spec_safety(&spec_c, s))
    {
        failures.push(StageFailure {
            stage: Stage::SpecSafetyAlongTrace,
            index,
            conjuncts: violated_conjuncts(&spec_c, s),
            detail: "abstract safety fails at a lifted state".into(),
        });
    }

    if let Some((index, violated)) = states
        .iter()
        .map(|s| impl_violations(c, s))
        .enumerate()
        .find(|(_, v)| !v.is_empty())
    {
        failures.push(StageFailure {
            stage: Stage::SpecSafetyLiftsToImpl,
            index,
            conjuncts: violated,
            detail: "concrete safety fails".into(),
        });
    }
    SoundnessVerdict { failures }
}

/// Runs the step function on the concrete side only; used by callers that
/// want to recompute a trace from its actions.
pub fn replay_actions(
    c: &ImplConstants,
    actions: &[Action],
) -> Trace<ImplState, Action, ImplEvent> {
    let mut trace = Trace::default();
    let mut cur = impl_init(c);
    for a in actions {
        let (event, post) = impl_next(c, &cur, a)
            .into_iter()
            .next()
            .expect("impl_next is total");
        trace.steps.push(Step {
            pre: cur,
            action: a.clone(),
            event,
            post: post.clone(),
        });
        cur = post;
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::impl_model::impl_inv;

    struct NeverInv;

    impl Abstraction for NeverInv {
        fn constants(&self, c: &ImplConstants) -> SpecConstants {
            default_bundle().constants(c)
        }
        fn variables(&self, s: &ImplState) -> SpecState {
            default_bundle().variables(s)
        }
        fn event(&self, e: &ImplEvent) -> BoundaryEvent {
            default_bundle().event(e)
        }
        fn inv(&self, _: &ImplConstants, _: &ImplState) -> bool {
            false
        }
    }

    #[test]
    fn default_bundle_r1() {
        let c = fixtures::read_agent();
        let b = default_bundle();
        assert_eq!(b.variables(&impl_init(&c)), spec_init(&b.constants(&c)));
        assert!(check_refinement_init(&c, &b).passed());
    }

    #[test]
    fn erased_reads_still_pass_init() {
        let c = fixtures::read_agent();
        let b = AbstractionBundle {
            erase: [SequenceField::ReadPaths].into(),
            ..default_bundle()
        };
        assert!(check_refinement_init(&c, &b).passed());
    }

    #[test]
    fn false_invariant_fails_init() {
        let c = fixtures::read_agent();
        assert!(!check_refinement_init(&c, &NeverInv).passed());
    }

    #[test]
    fn event_projection() {
        let b = default_bundle();
        let c = fixtures::read_agent();
        let s0 = impl_init(&c);
        let (ev, _) = impl_next(&c, &s0, &Action::ReadPath("/ws/a".into())).remove(0);
        assert!(ev.dispatch().is_some());
        assert_eq!(b.event(&ev), BoundaryEvent::Read("/ws/a".into()));
        assert_eq!(b.event(&ImplEvent::stutter()), BoundaryEvent::NoEffect);
    }

    #[test]
    fn type_check_rejects_payload_mismatch() {
        let b = AbstractionBundle {
            events: EventMap {
                step: EventKind::ToolEvent,
                ..EventMap::default()
            },
            ..default_bundle()
        };
        assert!(b.type_check().is_err());
        let renamed = AbstractionBundle {
            events: EventMap {
                read: EventKind::ToolEvent,
                ..EventMap::default()
            },
            ..default_bundle()
        };
        assert!(renamed.type_check().is_ok());
    }

    #[test]
    fn fixture_refines() {
        let c = fixtures::read_agent();
        let v = check_refinement_next(
            &c,
            &Guards::default(),
            &default_bundle(),
            &fixtures::default_alphabet(),
            4,
        )
        .unwrap();
        assert!(v.passed(), "{v:#?}");
        assert!(v.reachable_states > 1);
        assert!(v.envelope_states > 0);
    }

    #[test]
    fn tool_events_collapsed_to_stutter_break_r2() {
        let c = fixtures::read_agent();
        let b = AbstractionBundle {
            events: EventMap {
                tool: EventKind::NoEffect,
                ..EventMap::default()
            },
            ..default_bundle()
        };
        let v = check_refinement_next(&c, &Guards::default(), &b, &fixtures::default_alphabet(), 4)
            .unwrap();
        let cex = v.r2.counterexample().expect("R2 must fail");
        assert_eq!(cex.event.event(), &BoundaryEvent::Tool("search".into()));
        assert_eq!(cex.abstract_event, BoundaryEvent::NoEffect);
    }

    #[test]
    fn wf_only_invariant_fails_somewhere() {
        let c = fixtures::read_agent();
        let b = AbstractionBundle {
            invariant: BTreeSet::new(),
            ..default_bundle()
        };
        let v = check_refinement_next(&c, &Guards::default(), &b, &fixtures::default_alphabet(), 4)
            .unwrap();
        assert!(!v.passed());
        let full = check_refinement_next(
            &c,
            &Guards::default(),
            &default_bundle(),
            &fixtures::default_alphabet(),
            4,
        )
        .unwrap();
        assert!(v.explored_states > full.explored_states);
    }

    #[test]
    fn envelope_contains_only_wf_states_and_covers_init() {
        let c = fixtures::read_agent();
        let env = envelope(&c);
        assert!(env.contains(&impl_init(&c)));
        assert!(env.iter().filter(|s| impl_inv(&c, s)).count() > 1);
    }

    #[test]
    fn soundness_on_hand_built_violation() {
        let c = fixtures::read_agent();
        let s0 = impl_init(&c);
        let bad = ImplState {
            read_paths: vec!["/etc/pw".into()],
            ..s0.clone()
        };
        let trace = Trace {
            steps: vec![Step {
                pre: s0,
                action: Action::ReadPath("/etc/pw".into()),
                event: ImplEvent::stutter(),
                post: bad,
            }],
        };
        let v = check_soundness(&c, &Guards::default(), &default_bundle(), &trace);
        let s3 = v
            .stage(Stage::SpecSafetyLiftsToImpl)
            .expect("stage 3 fails");
        assert_eq!(s3.conjuncts, vec![Conjunct::ReadRooted]);
        assert_eq!(s3.index, 1);
    }

    #[test]
    fn empty_trace_is_sound() {
        let c = fixtures::read_agent();
        assert!(
            check_soundness(&c, &Guards::default(), &default_bundle(), &Trace::default()).passed()
        );
    }
}
