//! Mutation gates on the proof bundle.
//!
//! * **G1 resolution**: the flow file loads and type-checks within a budget.
//! * **G2 vacuity**: gutting the invariant down to well-formedness must make
//!   verification fail.
//! * **G3 discrimination**: each seeded modeling error must make verification
//!   fail.
//! * **Fitness**: every sequence-quantified safety conjunct must see a
//!   nonempty sequence in some reachable state, or it is only vacuously true.
//!
//! Mutations act on the [`SpecBundle`] alone. The loop's constants, the
//! alphabet and the checker configuration are never touched, and each G3 run
//! confirms this by digest.

use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::action::{Action, EventKind};
use crate::digest::digest;
use crate::flow_file::{FlowDefinition, SpecBundle};
use crate::impl_model::{impl_init, ImplConstants, ImplSystem, InvariantClause};
use crate::lts;
use crate::refinement::{check_refinement_next, Abstraction, RefinementVerdict};
use crate::spec_model::{
    check_init_safety, check_safety_preserved, Conjunct, InitSafety, SafetyPreservation,
    SequenceField, SpecSystem,
};

/// Default budget for loading a flow file.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// G2 needs at least one layer of step obligations.
pub const MIN_VACUITY_DEPTH: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateConfigError {
    #[error(
        "depth {0} is below the vacuity floor of {MIN_VACUITY_DEPTH}: no step obligations exist"
    )]
    DepthBelowFloor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateConfig {
    pub depth: usize,
    pub timeout: Duration,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            depth: 4,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// Everything the gates run against one bundle: abstract safety at the
/// initial state, safety preservation under the bundle's guards, and the
/// refinement obligations under its abstraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verification {
    pub init_safety: InitSafety,
    pub safety_preserved: SafetyPreservation,
    pub refinement: RefinementVerdict,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.failed_obligations().is_empty()
    }

    pub fn failed_obligations(&self) -> Vec<&'static str> {
        let r = &self.refinement;
        [
            ("init-safety", self.init_safety.passed),
            ("safety-preserved", self.safety_preserved.passed()),
            ("r1", r.r1.passed()),
            ("r2", r.r2.passed()),
            ("r3", r.r3.passed()),
            ("inv-inductive", r.inv_inductive.passed()),
        ]
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(name, _)| name)
        .collect()
    }
}

pub fn verify(
    c: &ImplConstants,
    bundle: &SpecBundle,
    alphabet: &[Action],
    depth: usize,
) -> Verification {
    let spec_c = bundle.abstraction.constants(c);
    let spec = SpecSystem::with_guards(spec_c.clone(), bundle.guards);
    let safety_preserved =
        check_safety_preserved(&spec, alphabet, depth).expect("the abstract model is total");
    let refinement = check_refinement_next(c, &bundle.guards, &bundle.abstraction, alphabet, depth)
        .expect("the dispatch loop is total");
    Verification {
        init_safety: check_init_safety(&spec_c),
        safety_preserved,
        refinement,
    }
}

/// An alteration of the untrusted part of a flow: the proof bundle.
pub trait BundleMutation {
    /// Stable identifier, addressable from the command line.
    fn id(&self) -> &str;
    fn describe(&self) -> &str;
    fn apply(&self, bundle: &SpecBundle) -> SpecBundle;
}

/// Reduces the invariant to well-formedness. The G2 mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermissiveStub;

impl BundleMutation for PermissiveStub {
    fn id(&self) -> &str {
        "permissive-stub"
    }

    fn describe(&self) -> &str {
        "invariant reduced to well-formedness"
    }

    fn apply(&self, bundle: &SpecBundle) -> SpecBundle {
        let mut out = bundle.clone();
        out.abstraction.invariant.clear();
        out
    }
}

/// Leaves the bundle as it is. Survives every check the original passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity;

impl BundleMutation for Identity {
    fn id(&self) -> &str {
        "identity"
    }

    fn describe(&self) -> &str {
        "no change"
    }

    fn apply(&self, bundle: &SpecBundle) -> SpecBundle {
        bundle.clone()
    }
}

/// The shipped library of plausible modeling errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeededError {
    DropAllowlistGuard,
    StepBoundOffByOne,
    CollapseEventsToNoEffect,
    DeleteHistoryClause,
}

impl SeededError {
    pub const LIBRARY: [SeededError; 4] = [
        SeededError::DropAllowlistGuard,
        SeededError::StepBoundOffByOne,
        SeededError::CollapseEventsToNoEffect,
        SeededError::DeleteHistoryClause,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SeededError::DropAllowlistGuard => "drop-allowlist-guard",
            SeededError::StepBoundOffByOne => "step-bound-off-by-one",
            SeededError::CollapseEventsToNoEffect => "collapse-events-to-noeffect",
            SeededError::DeleteHistoryClause => "delete-history-clause",
        }
    }
}

impl BundleMutation for SeededError {
    fn id(&self) -> &str {
        self.name()
    }

    fn describe(&self) -> &str {
        match self {
            SeededError::DropAllowlistGuard => "the abstract tool guard admits any tool",
            SeededError::StepBoundOffByOne => "the abstract step bound is one too large",
            SeededError::CollapseEventsToNoEffect => "every event abstracts to NoEffect",
            SeededError::DeleteHistoryClause => {
                "the history-length clause is dropped from the invariant"
            }
        }
    }

    fn apply(&self, bundle: &SpecBundle) -> SpecBundle {
        let mut out = bundle.clone();
        match self {
            SeededError::DropAllowlistGuard => out.guards.allowlist = false,
            SeededError::StepBoundOffByOne => out.guards.step_bound_slack += 1,
            SeededError::CollapseEventsToNoEffect => {
                let ev = &mut out.abstraction.events;
                ev.read = EventKind::NoEffect;
                ev.tool = EventKind::NoEffect;
                ev.step = EventKind::NoEffect;
            }
            SeededError::DeleteHistoryClause => {
                out.abstraction
                    .invariant
                    .remove(&InvariantClause::HistoryLength);
            }
        }
        out
    }
}

/// Looks up a library mutation, the permissive stub, or the identity by id.
pub fn mutation_by_id(id: &str) -> Option<Box<dyn BundleMutation>> {
    if let Some(e) = SeededError::LIBRARY.into_iter().find(|e| e.id() == id) {
        return Some(Box::new(e));
    }
    match id {
        "permissive-stub" => Some(Box::new(PermissiveStub)),
        "identity" => Some(Box::new(Identity)),
        _ => None,
    }
}

/// Every id accepted by [`mutation_by_id`].
pub fn mutation_ids() -> Vec<&'static str> {
    let mut ids: Vec<&'static str> = SeededError::LIBRARY.iter().map(|e| e.name()).collect();
    ids.extend(["permissive-stub", "identity"]);
    ids
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolutionVerdict {
    pub passed: bool,
    pub diagnostics: Vec<String>,
}

/// G1: parses and type-checks `source` on a worker thread and waits at most
/// `timeout` for it.
pub fn gate_resolution(
    source: &str,
    timeout: Duration,
) -> (ResolutionVerdict, Option<FlowDefinition>) {
    let (tx, rx) = mpsc::channel();
    let text = source.to_string();
    thread::spawn(move || {
        let _ = tx.send(FlowDefinition::from_toml(&text));
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(def)) => (
            ResolutionVerdict {
                passed: true,
                diagnostics: Vec::new(),
            },
            Some(def),
        ),
        Ok(Err(e)) => (
            ResolutionVerdict {
                passed: false,
                diagnostics: vec![e.to_string()],
            },
            None,
        ),
        Err(_) => (
            ResolutionVerdict {
                passed: false,
                diagnostics: vec![format!("loading did not finish within {timeout:?}")],
            },
            None,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VacuityVerdict {
    pub passed: bool,
    pub original_verifies: bool,
    pub stub_verifies: bool,
    pub stub_identical: bool,
    /// Obligations the stub still fails; empty when it verifies.
    pub stub_failures: Vec<&'static str>,
    pub diagnostics: Vec<String>,
}

/// G2. Passes iff the original verifies and the permissive stub, which
/// differs from it, does not.
pub fn gate_vacuity(
    c: &ImplConstants,
    bundle: &SpecBundle,
    alphabet: &[Action],
    depth: usize,
) -> Result<VacuityVerdict, GateConfigError> {
    if depth < MIN_VACUITY_DEPTH {
        return Err(GateConfigError::DepthBelowFloor(depth));
    }
    let stub = PermissiveStub.apply(bundle);
    let original = verify(c, bundle, alphabet, depth);
    let mutated = verify(c, &stub, alphabet, depth);
    let stub_identical = &stub == bundle;
    let mut diagnostics = Vec::new();
    if !original.passed() {
        diagnostics.push(format!(
            "the original bundle does not verify: {:?}",
            original.failed_obligations()
        ));
    }
    if stub_identical {
        diagnostics.push("the invariant is already well-formedness only".into());
    }
    if mutated.passed() {
        diagnostics.push("the permissive stub discharges every obligation".into());
    }
    Ok(VacuityVerdict {
        passed: original.passed() && !stub_identical && !mutated.passed(),
        original_verifies: original.passed(),
        stub_verifies: mutated.passed(),
        stub_identical,
        stub_failures: mutated.failed_obligations(),
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MutantOutcome {
    pub id: String,
    pub description: String,
    pub killed: bool,
    /// Obligations the mutant fails.
    pub killed_by: Vec<&'static str>,
    /// Loop constants, alphabet and depth hashed identically before and
    /// after the mutation was applied.
    pub locality_preserved: bool,
}

fn checker_digest(c: &ImplConstants, alphabet: &[Action], depth: usize) -> String {
    digest(&(c, alphabet, depth))
}

/// Applies one mutation and verifies the result. The mutant is killed iff
/// verification fails.
pub fn gate_discrimination(
    c: &ImplConstants,
    bundle: &SpecBundle,
    mutation: &dyn BundleMutation,
    alphabet: &[Action],
    depth: usize,
) -> MutantOutcome {
    let before = checker_digest(c, alphabet, depth);
    let mutant = mutation.apply(bundle);
    let after = checker_digest(c, alphabet, depth);
    let failed = verify(c, &mutant, alphabet, depth).failed_obligations();
    MutantOutcome {
        id: mutation.id().to_string(),
        description: mutation.describe().to_string(),
        killed: !failed.is_empty(),
        killed_by: failed,
        locality_preserved: before == after,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiscriminationVerdict {
    pub passed: bool,
    pub original_verifies: bool,
    pub mutants: Vec<MutantOutcome>,
    pub survivors: Vec<String>,
}

/// G3 over a set of mutations. Passes iff the original verifies and every
/// mutant is killed.
pub fn gate_discrimination_all(
    c: &ImplConstants,
    bundle: &SpecBundle,
    mutations: &[Box<dyn BundleMutation>],
    alphabet: &[Action],
    depth: usize,
) -> DiscriminationVerdict {
    let original_verifies = verify(c, bundle, alphabet, depth).passed();
    let mutants: Vec<MutantOutcome> = mutations
        .iter()
        .map(|m| gate_discrimination(c, bundle, m.as_ref(), alphabet, depth))
        .collect();
    let survivors: Vec<String> = mutants
        .iter()
        .filter(|m| !m.killed)
        .map(|m| m.id.clone())
        .collect();
    DiscriminationVerdict {
        passed: original_verifies
            && survivors.is_empty()
            && mutants.iter().all(|m| m.locality_preserved),
        original_verifies,
        mutants,
        survivors,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ConjunctStatus {
    /// A reachable state where the field is nonempty, and how to get there.
    Witnessed {
        prefix: Vec<Action>,
    },
    Vacuous,
    /// The step-count conjunct quantifies over no sequence.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConjunctFitness {
    pub conjunct: Conjunct,
    pub field: Option<SequenceField>,
    #[serde(flatten)]
    pub status: ConjunctStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FitnessReport {
    pub passed: bool,
    pub depth: usize,
    pub conjuncts: Vec<ConjunctFitness>,
}

impl FitnessReport {
    pub fn vacuous(&self) -> Vec<Conjunct> {
        self.conjuncts
            .iter()
            .filter(|f| f.status == ConjunctStatus::Vacuous)
            .map(|f| f.conjunct)
            .collect()
    }
}

/// Searches concrete states reachable within `depth` for one whose abstract
/// image has each quantified sequence nonempty.
pub fn check_template_fitness(
    c: &ImplConstants,
    bundle: &SpecBundle,
    alphabet: &[Action],
    depth: usize,
) -> FitnessReport {
    let sys = ImplSystem::new(c.clone());
    let reach = lts::reachable(&sys, alphabet, depth).expect("the dispatch loop is total");
    let conjuncts: Vec<ConjunctFitness> = Conjunct::ALL
        .into_iter()
        .map(|conjunct| {
            let field = conjunct.quantified_field();
            let status = match field {
                None => ConjunctStatus::Scalar,
                Some(f) => reach
                    .states()
                    .iter()
                    .find(|s| {
                        let a = bundle.abstraction.variables(s);
                        match f {
                            SequenceField::ReadPaths => !a.read_paths.is_empty(),
                            SequenceField::ToolCalls => !a.tool_calls.is_empty(),
                        }
                    })
                    .map_or(ConjunctStatus::Vacuous, |s| ConjunctStatus::Witnessed {
                        prefix: reach.path_to(s),
                    }),
            };
            ConjunctFitness {
                conjunct,
                field,
                status,
            }
        })
        .collect();
    debug_assert!(reach.contains(&impl_init(c)));
    FitnessReport {
        passed: conjuncts
            .iter()
            .all(|f| f.status != ConjunctStatus::Vacuous),
        depth,
        conjuncts,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GateReport {
    pub passed: bool,
    pub g1: ResolutionVerdict,
    /// Later gates are skipped when G1 fails.
    pub g2: Option<VacuityVerdict>,
    pub g3: Option<DiscriminationVerdict>,
    pub fitness: Option<FitnessReport>,
}

impl GateReport {
    /// Names of the gates that did not pass, in pipeline order.
    pub fn failing_gates(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.g1.passed {
            out.push("g1");
        }
        if !self.g2.as_ref().is_some_and(|g| g.passed) {
            out.push("g2");
        }
        if !self.g3.as_ref().is_some_and(|g| g.passed) {
            out.push("g3");
        }
        if !self.fitness.as_ref().is_some_and(|g| g.passed) {
            out.push("fitness");
        }
        out
    }
}

/// Runs the pipeline on a flow file's text. `mutations` defaults to the
/// seeded-error library when empty. `adjust` is applied to the loaded flow
/// before the remaining gates run.
pub fn run_gates(
    source: &str,
    config: &GateConfig,
    mutations: &[Box<dyn BundleMutation>],
    adjust: &dyn Fn(FlowDefinition) -> FlowDefinition,
) -> Result<GateReport, GateConfigError> {
    if config.depth < MIN_VACUITY_DEPTH {
        return Err(GateConfigError::DepthBelowFloor(config.depth));
    }
    let (g1, def) = gate_resolution(source, config.timeout);
    let Some(def) = def.map(adjust) else {
        return Ok(GateReport {
            passed: false,
            g1,
            g2: None,
            g3: None,
            fitness: None,
        });
    };
    let library: Vec<Box<dyn BundleMutation>>;
    let mutations = if mutations.is_empty() {
        library = SeededError::LIBRARY
            .into_iter()
            .map(|e| Box::new(e) as Box<dyn BundleMutation>)
            .collect();
        &library[..]
    } else {
        mutations
    };
    let c = def.impl_constants();
    let g2 = gate_vacuity(&c, &def.bundle, &def.alphabet, config.depth)?;
    let g3 = gate_discrimination_all(&c, &def.bundle, mutations, &def.alphabet, config.depth);
    let fitness = check_template_fitness(&c, &def.bundle, &def.alphabet, config.depth);
    let mut report = GateReport {
        passed: false,
        g1,
        g2: Some(g2),
        g3: Some(g3),
        fitness: Some(fitness),
    };
    report.passed = report.failing_gates().is_empty();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn read_agent() -> (ImplConstants, SpecBundle, Vec<Action>) {
        let def = fixtures::read_agent_flow();
        (def.impl_constants(), def.bundle, def.alphabet)
    }

    #[test]
    fn ids_resolve() {
        for id in mutation_ids() {
            assert_eq!(mutation_by_id(id).unwrap().id(), id);
        }
        assert!(mutation_by_id("nope").is_none());
    }

    #[test]
    fn original_verifies() {
        let (c, b, alpha) = read_agent();
        let v = verify(&c, &b, &alpha, 4);
        assert!(v.passed(), "{:?}", v.failed_obligations());
    }

    #[test]
    fn each_seeded_error_is_killed() {
        let (c, b, alpha) = read_agent();
        for e in SeededError::LIBRARY {
            let out = gate_discrimination(&c, &b, &e, &alpha, 4);
            assert!(out.killed, "{} survived", e.id());
            assert!(out.locality_preserved);
        }
        let id = gate_discrimination(&c, &b, &Identity, &alpha, 4);
        assert!(!id.killed);
    }

    #[test]
    fn allowlist_drop_is_caught_by_abstract_safety() {
        let (c, b, alpha) = read_agent();
        let out = gate_discrimination(&c, &b, &SeededError::DropAllowlistGuard, &alpha, 4);
        assert_eq!(out.killed_by, vec!["safety-preserved"]);
    }

    #[test]
    fn vacuity_floor_and_stub() {
        let (c, b, alpha) = read_agent();
        assert_eq!(
            gate_vacuity(&c, &b, &alpha, 0),
            Err(GateConfigError::DepthBelowFloor(0))
        );
        let v = gate_vacuity(&c, &b, &alpha, 4).unwrap();
        assert!(v.passed, "{v:?}");
        assert!(!v.stub_verifies);

        let gutted = PermissiveStub.apply(&b);
        let v = gate_vacuity(&c, &gutted, &alpha, 4).unwrap();
        assert!(!v.passed);
        assert!(v.stub_identical);
    }

    #[test]
    fn resolution_failures() {
        let src = fixtures::builtin_source("read-agent").unwrap();
        assert!(gate_resolution(src, DEFAULT_TIMEOUT).0.passed);
        let dangling = src.replace(r#"to = "call_tool""#, r#"to = "ghost""#);
        let (v, def) = gate_resolution(&dangling, DEFAULT_TIMEOUT);
        assert!(!v.passed && def.is_none());
        assert!(v.diagnostics[0].contains("ghost"), "{:?}", v.diagnostics);
        let unknown_event =
            format!("{src}\n[bundle.abstraction.events]\nread = \"WriteEvent\"\ntool = \"ToolEvent\"\nstep = \"StepEvent\"\n");
        assert!(!gate_resolution(&unknown_event, DEFAULT_TIMEOUT).0.passed);
    }

    #[test]
    fn fitness_read_agent() {
        let (c, b, alpha) = read_agent();
        let f = check_template_fitness(&c, &b, &alpha, 4);
        assert!(f.passed);
        assert!(f.vacuous().is_empty());
    }

    #[test]
    fn rag_flow_separation() {
        for (name, vacuous) in [
            ("rag-flow-barrier", vec![]),
            ("rag-flow-no-barrier", vec![Conjunct::ToolAllowlisted]),
        ] {
            let src = fixtures::builtin_source(name).unwrap();
            let r = run_gates(src, &GateConfig::default(), &[], &|d| d).unwrap();
            assert!(r.g1.passed, "{name}");
            assert!(r.g2.as_ref().unwrap().passed, "{name}");
            assert!(r.g3.as_ref().unwrap().passed, "{name}");
            assert_eq!(r.fitness.as_ref().unwrap().vacuous(), vacuous, "{name}");
        }
    }

    #[test]
    fn g1_failure_short_circuits() {
        let r = run_gates("not toml [", &GateConfig::default(), &[], &|d| d).unwrap();
        assert!(!r.passed);
        assert!(r.g2.is_none() && r.g3.is_none() && r.fitness.is_none());
        assert_eq!(r.failing_gates(), vec!["g1", "g2", "g3", "fitness"]);
    }
}
