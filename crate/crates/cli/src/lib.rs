//! Subcommands of the `containment` binary.
//!
//! Each command returns an [`Output`]: an exit code, the primary artifact
//! (a JSON report, or a trace log for `run`), and notes for stderr. The
//! binary only decides where the artifact goes.
//!
//! Exit codes: 0 pass, 1 property failure, 2 usage or load error.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use containment::digest::digest;
use containment::fixtures;
use containment::flow_file::{FlowDefinition, FlowError};
use containment::gates::{self, mutation_by_id, BundleMutation, GateConfig};
use containment::harness::{self, OracleStrategy, RunRecord, SweepVerdict, Violation};
use containment::impl_model::ImplConstants;
use containment::refinement::{
    check_refinement_init, check_refinement_next, InitCounterexample, Obligation, RefinementVerdict,
};
use containment::spec_model::{
    check_init_safety, check_safety_preserved, Guards, InitSafety, PrefixMode, SafetyPreservation,
};
use containment::trace_log::{self, ReplayVerdict, TraceLog};
use containment::Action;

pub const REPORT_SCHEMA: &str = "containment-report/1";

pub const EXIT_PASS: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "containment",
    version,
    about = "Check a flow graph's containment layer against a havoc oracle"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drive the loop with one oracle strategy and write a trace log.
    Run(RunArgs),
    /// Discharge refinement and safety obligations and sweep the loop.
    Check(CheckArgs),
    /// Run the resolution, vacuity, discrimination and fitness gates.
    Gates(GatesArgs),
    /// Drive every action sequence of a given length.
    Sweep(SweepArgs),
    /// Re-execute a trace log's actions and compare its other columns.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrefixModeArg {
    SeparatorGuarded,
    Bare,
}

impl From<PrefixModeArg> for PrefixMode {
    fn from(m: PrefixModeArg) -> Self {
        match m {
            PrefixModeArg::SeparatorGuarded => PrefixMode::SeparatorGuarded,
            PrefixModeArg::Bare => PrefixMode::Bare,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FlowArgs {
    /// A flow file, or one of the built-in names: read-agent,
    /// rag-flow-barrier, rag-flow-no-barrier.
    #[arg(long)]
    pub flow: String,
    /// Override the flow's path-prefix semantics.
    #[arg(long, value_enum)]
    pub prefix_mode: Option<PrefixModeArg>,
    /// Write the artifact here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub flow: FlowArgs,
    /// `random`, `adversarial`, `scripted:FILE` (one action literal per
    /// line), or `exhaustive:CURSOR` (the CURSOR-th sequence of length
    /// `--steps`).
    #[arg(long, default_value = "random")]
    pub strategy: String,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inject a containment fault into the loop's enforcement.
    #[arg(long)]
    pub mutation: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub flow: FlowArgs,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Apply a seeded error to the proof bundle before checking.
    #[arg(long)]
    pub mutation: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GatesArgs {
    #[command(flatten)]
    pub flow: FlowArgs,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Mutations for the discrimination gate; the whole seeded-error
    /// library when omitted. Repeatable.
    #[arg(long)]
    pub mutation: Vec<String>,
    /// Load budget for the resolution gate, in seconds.
    #[arg(long, default_value_t = 30)]
    pub timeout: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flow: FlowArgs,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Inject a containment fault into the loop's enforcement.
    #[arg(long)]
    pub mutation: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub flow: FlowArgs,
    /// The trace log to replay.
    pub log: PathBuf,
    /// Replay against a loop with this containment fault.
    #[arg(long)]
    pub mutation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub code: u8,
    pub artifact: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError(pub String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        CliError(e.to_string())
    }
}

/// Runs a parsed command line. Errors become exit code 2.
pub fn execute(cli: &Cli) -> Output {
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|(o, _)| o),
        Command::Check(a) => cmd_check(a),
        Command::Gates(a) => cmd_gates(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Replay(a) => cmd_replay(a),
    };
    res.unwrap_or_else(|e| Output {
        code: EXIT_USAGE,
        artifact: String::new(),
        notes: vec![format!("error: {e}")],
    })
}

/// The text of a built-in flow or a flow file.
pub fn flow_source(arg: &str) -> Result<String, CliError> {
    if let Some(src) = fixtures::builtin_source(arg) {
        return Ok(src.to_string());
    }
    std::fs::read_to_string(arg).map_err(|e| CliError(format!("cannot read flow `{arg}`: {e}")))
}

fn apply_prefix_mode(mut def: FlowDefinition, mode: Option<PrefixModeArg>) -> FlowDefinition {
    if let Some(m) = mode {
        def.constants.prefix_mode = m.into();
    }
    def
}

pub fn load_flow(args: &FlowArgs) -> Result<FlowDefinition, CliError> {
    let def = FlowDefinition::from_toml(&flow_source(&args.flow)?)?;
    Ok(apply_prefix_mode(def, args.prefix_mode))
}

/// Enforcement faults addressable by the same ids as the bundle's seeded
/// errors, where the loop has an analogue.
pub fn containment_fault(id: &str) -> Result<Guards, CliError> {
    let base = Guards::default();
    match id {
        "drop-allowlist-guard" => Ok(Guards {
            allowlist: false,
            ..base
        }),
        "drop-root-guard" => Ok(Guards {
            workspace_root: false,
            ..base
        }),
        "step-bound-off-by-one" => Ok(Guards {
            step_bound_slack: 1,
            ..base
        }),
        _ => Err(CliError(format!(
            "`{id}` is not a containment fault; expected drop-allowlist-guard, drop-root-guard or step-bound-off-by-one"
        ))),
    }
}

fn loop_constants(def: &FlowDefinition, fault: Option<&str>) -> Result<ImplConstants, CliError> {
    let c = def.impl_constants();
    Ok(match fault {
        None => c,
        Some(id) => c.with_enforcement(containment_fault(id)?),
    })
}

fn mutation(id: &str) -> Result<Box<dyn BundleMutation>, CliError> {
    mutation_by_id(id).ok_or_else(|| {
        CliError(format!(
            "unknown mutation `{id}`; known: {}",
            gates::mutation_ids().join(", ")
        ))
    })
}

pub fn parse_strategy(
    spec: &str,
    seed: u64,
    steps: usize,
    alphabet: &[Action],
) -> Result<OracleStrategy, CliError> {
    let strategy = match spec.split_once(':') {
        None if spec == "random" => OracleStrategy::SeededRandom {
            seed,
            alphabet: alphabet.to_vec(),
        },
        None if spec == "adversarial" => OracleStrategy::adversarial(seed, alphabet.to_vec()),
        Some(("scripted", file)) => OracleStrategy::Scripted(read_script(Path::new(file))?),
        Some(("exhaustive", cursor)) => OracleStrategy::Exhaustive {
            alphabet: alphabet.to_vec(),
            depth: steps,
            cursor: cursor
                .parse()
                .map_err(|_| CliError(format!("bad exhaustive cursor `{cursor}`")))?,
        },
        _ => return Err(CliError(format!("unknown strategy `{spec}`"))),
    };
    strategy.validate().map_err(|e| CliError(e.to_string()))?;
    Ok(strategy)
}

/// One action literal per line; blank lines and `#` comments are skipped.
pub fn parse_script(text: &str) -> Result<Vec<Action>, CliError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse().map_err(|e| CliError(format!("script: {e}"))))
        .collect()
}

fn read_script(path: &Path) -> Result<Vec<Action>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError(format!("cannot read script `{}`: {e}", path.display())))?;
    parse_script(&text)
}

fn render<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
    s.push('\n');
    s
}

fn code(passed: bool) -> u8 {
    if passed {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}

#[derive(Debug, Serialize)]
struct FlowInfo<'a> {
    provenance: &'a str,
    constants_digest: String,
}

impl<'a> FlowInfo<'a> {
    fn new(def: &'a FlowDefinition, c: &ImplConstants) -> Self {
        FlowInfo {
            provenance: &def.provenance,
            constants_digest: digest(c),
        }
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<(Output, RunRecord), CliError> {
    let def = load_flow(&args.flow)?;
    let c = loop_constants(&def, args.mutation.as_deref())?;
    let strategy = parse_strategy(&args.strategy, args.seed, args.steps, &def.alphabet)?;
    let record = harness::drive(&c, &strategy, args.steps).map_err(|e| CliError(e.to_string()))?;
    let log = TraceLog::from_trace(&c, &record.trace, strategy.seed(), &strategy.label());
    let violation = record.violation(&c);
    let mut notes = vec![format!(
        "{} steps, {} emitted, {} rejected",
        record.trace.len(),
        record.emitted_events.len(),
        record.rejected_count
    )];
    if let Some(v) = &violation {
        notes.push(format!(
            "violation: {}",
            serde_json::to_string(v).expect("serializes")
        ));
    }
    Ok((
        Output {
            code: code(violation.is_none()),
            artifact: log.render(),
            notes,
        },
        record,
    ))
}

#[derive(Debug, Serialize)]
pub struct CheckReport<'a> {
    schema_version: &'static str,
    command: &'static str,
    flow: FlowInfo<'a>,
    mutation: Option<&'a str>,
    depth: usize,
    passed: bool,
    warnings: Vec<String>,
    init_safety: InitSafety,
    safety_preserved: SafetyPreservation,
    refinement_init: Obligation<InitCounterexample>,
    refinement_next: RefinementVerdict,
    sweep: SweepVerdict,
}

pub fn cmd_check(args: &CheckArgs) -> Result<Output, CliError> {
    let def = load_flow(&args.flow)?;
    let c = def.impl_constants();
    let bundle = match &args.mutation {
        None => def.bundle.clone(),
        Some(id) => mutation(id)?.apply(&def.bundle),
    };
    let spec_c = def.constants.clone();
    let spec = containment::spec_model::SpecSystem::with_guards(spec_c.clone(), bundle.guards);
    let safety_preserved = check_safety_preserved(&spec, &def.alphabet, args.depth)
        .map_err(|e| CliError(e.to_string()))?;
    let refinement_next = check_refinement_next(
        &c,
        &bundle.guards,
        &bundle.abstraction,
        &def.alphabet,
        args.depth,
    )
    .map_err(|e| CliError(e.to_string()))?;
    let refinement_init = check_refinement_init(&c, &bundle.abstraction);
    let init_safety = check_init_safety(&spec_c);
    let sweep = harness::sweep(&c, &def.alphabet, args.depth);
    let mut warnings = Vec::new();
    if args.depth == 0 {
        warnings.push("depth 0: only initial-state obligations were checked".to_string());
    }
    let passed = init_safety.passed
        && safety_preserved.passed()
        && refinement_init.passed()
        && refinement_next.passed()
        && sweep.passed();
    let report = CheckReport {
        schema_version: REPORT_SCHEMA,
        command: "check",
        flow: FlowInfo::new(&def, &c),
        mutation: args.mutation.as_deref(),
        depth: args.depth,
        passed,
        warnings: warnings.clone(),
        init_safety,
        safety_preserved,
        refinement_init,
        refinement_next,
        sweep,
    };
    Ok(Output {
        code: code(passed),
        artifact: render(&report),
        notes: warnings
            .into_iter()
            .map(|w| format!("warning: {w}"))
            .collect(),
    })
}

#[derive(Debug, Serialize)]
struct GatesReport<'a> {
    schema_version: &'static str,
    command: &'static str,
    flow: &'a str,
    depth: usize,
    #[serde(flatten)]
    report: &'a gates::GateReport,
    failing_gates: Vec<&'static str>,
}

pub fn cmd_gates(args: &GatesArgs) -> Result<Output, CliError> {
    let source = flow_source(&args.flow.flow)?;
    let mutations: Vec<Box<dyn BundleMutation>> = args
        .mutation
        .iter()
        .map(|id| mutation(id))
        .collect::<Result<_, _>>()?;
    let config = GateConfig {
        depth: args.depth,
        timeout: Duration::from_secs(args.timeout),
    };
    let mode = args.flow.prefix_mode;
    let report = gates::run_gates(&source, &config, &mutations, &|d| {
        apply_prefix_mode(d, mode)
    })
    .map_err(|e| CliError(e.to_string()))?;
    let failing = report.failing_gates();
    let notes = if failing.is_empty() {
        Vec::new()
    } else {
        vec![format!("failing gates: {}", failing.join(", "))]
    };
    let out = GatesReport {
        schema_version: REPORT_SCHEMA,
        command: "gates",
        flow: &args.flow.flow,
        depth: args.depth,
        report: &report,
        failing_gates: failing,
    };
    Ok(Output {
        code: code(report.passed),
        artifact: render(&out),
        notes,
    })
}

#[derive(Debug, Serialize)]
struct SweepReport<'a> {
    schema_version: &'static str,
    command: &'static str,
    flow: FlowInfo<'a>,
    mutation: Option<&'a str>,
    passed: bool,
    #[serde(flatten)]
    verdict: SweepVerdict,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Output, CliError> {
    let def = load_flow(&args.flow)?;
    let c = loop_constants(&def, args.mutation.as_deref())?;
    let verdict = harness::sweep(&c, &def.alphabet, args.depth);
    let notes = verdict
        .violation
        .iter()
        .map(|v: &Violation| {
            let seq: Vec<String> = v.sequence.iter().map(ToString::to_string).collect();
            format!("violation at step {}: [{}]", v.step, seq.join(", "))
        })
        .collect();
    let passed = verdict.passed();
    let report = SweepReport {
        schema_version: REPORT_SCHEMA,
        command: "sweep",
        flow: FlowInfo::new(&def, &c),
        mutation: args.mutation.as_deref(),
        passed,
        verdict,
    };
    Ok(Output {
        code: code(passed),
        artifact: render(&report),
        notes,
    })
}

#[derive(Debug, Serialize)]
struct ReplayReport<'a> {
    schema_version: &'static str,
    command: &'static str,
    flow: FlowInfo<'a>,
    passed: bool,
    #[serde(flatten)]
    verdict: ReplayVerdict,
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<Output, CliError> {
    let def = load_flow(&args.flow)?;
    let c = loop_constants(&def, args.mutation.as_deref())?;
    let text = std::fs::read_to_string(&args.log)
        .map_err(|e| CliError(format!("cannot read log `{}`: {e}", args.log.display())))?;
    let log = TraceLog::parse(&text).map_err(|e| CliError(e.to_string()))?;
    let verdict = trace_log::replay(&c, &log).map_err(|e| CliError(e.to_string()))?;
    let mut notes = Vec::new();
    if !verdict.constants_match {
        notes.push("log was recorded against different constants".to_string());
    }
    if let Some(m) = &verdict.mismatch {
        notes.push(format!(
            "record {} differs in the {} column",
            m.index, m.column
        ));
    }
    let passed = verdict.passed();
    let report = ReplayReport {
        schema_version: REPORT_SCHEMA,
        command: "replay",
        flow: FlowInfo::new(&def, &c),
        passed,
        verdict,
    };
    Ok(Output {
        code: code(passed),
        artifact: render(&report),
        notes,
    })
}
