//! Command-line front end: pick a specification, pick a check, run it.
//!
//! Exit status: 0 = all checks pass, 1 = violation found, 2 = usage or
//! configuration error, 3 = bound exhausted. Timing goes to stderr so that
//! reports on stdout are byte-identical across runs and worker counts.

use clap::{Parser, ValueEnum};
use pcnchk::checker::{AbstractSide, Violation};
use pcnchk::net_model::{
    conservation_invariant, honest_monotone_invariant, NetBounds, NetModel,
};
use pcnchk::refine::{map_proto_to_ideal, map_to_network, IdealAbstract, NetworkAbstract};
use pcnchk::spec::{
    build_scenario, honest_safety_holds, ideal_twin, project_without_time, protocol_invariants,
    GlobalModel, SpecConfig, SpecId,
};
use pcnchk::state::ChannelVariant;
use pcnchk::{
    check_refinement, check_terminal_states, compare_projected_state_sets, explore, CheckOptions,
    CheckOutcome, ProjectionOutcome,
};
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckKind {
    Explore,
    Refine,
    Terminal,
    CompareProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AbstractId {
    #[value(alias = "V")]
    V,
    #[value(alias = "VII")]
    Vii,
    #[value(alias = "X")]
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FlawArg {
    ConflateDisjuncts,
    PunishCommitmentOnly,
}

/// Model checker for payment channel network specifications.
#[derive(Parser, Debug)]
#[command(name = "pcnchk", version, about)]
struct Args {
    /// Specification to check (I..X).
    #[arg(long)]
    spec: String,

    /// Which check to run.
    #[arg(long, value_enum, default_value = "explore")]
    check: CheckKind,

    /// Abstract specification for --check refine.
    #[arg(long, value_enum)]
    r#abstract: Option<AbstractId>,

    /// Re-enable a known flaw (repeatable).
    #[arg(long, value_enum)]
    flaw: Vec<FlawArg>,

    /// Clock bound override.
    #[arg(long)]
    max_time: Option<u32>,

    /// Payment amount bound override.
    #[arg(long)]
    max_amount: Option<u32>,

    /// Concurrent-HTLC bound override.
    #[arg(long)]
    max_htlcs: Option<usize>,

    /// User count (must match the spec's fixed topology).
    #[arg(long)]
    users: Option<usize>,

    /// Worker threads for successor generation (results are identical for
    /// any value).
    #[arg(long, default_value = "1")]
    workers: usize,

    /// Write the counterexample trace to this file on violation.
    #[arg(long)]
    trace_out: Option<std::path::PathBuf>,

    /// Keep full canonical states next to fingerprints and cross-check the
    /// two stores (collision detection).
    #[arg(long, default_value = "false")]
    exact_states: bool,

    /// Abort exploration beyond this many states (0 = unlimited).
    #[arg(long, default_value = "0")]
    max_states: u64,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn opts(args: &Args) -> CheckOptions {
    CheckOptions { exact_states: args.exact_states, workers: args.workers, max_states: args.max_states }
}

fn flaws(args: &Args) -> pcnchk::FlawFlags {
    let mut f = pcnchk::FlawFlags::default();
    for flag in &args.flaw {
        match flag {
            FlawArg::ConflateDisjuncts => f.conflate_disjuncts = true,
            FlawArg::PunishCommitmentOnly => f.punish_commitment_outputs_only = true,
        }
    }
    f
}

fn run(args: &Args) -> Result<ExitCode, String> {
    let id: SpecId = args.spec.parse()?;
    let started = Instant::now();
    let code = match (id, args.check) {
        (SpecId::X, CheckKind::Explore) => run_network_explore(args)?,
        (SpecId::X, other) => {
            return Err(format!("spec X supports --check explore only (got {other:?})"));
        }
        (_, CheckKind::Explore) => run_explore(args, id)?,
        (_, CheckKind::Terminal) => run_terminal(args, id)?,
        (_, CheckKind::Refine) => run_refine(args, id)?,
        (_, CheckKind::CompareProjection) => run_projection(args, id)?,
    };
    eprintln!("wall time: {:.3}s", started.elapsed().as_secs_f64());
    Ok(code)
}

fn config(args: &Args, id: SpecId) -> SpecConfig {
    SpecConfig {
        id: Some(id),
        flaws: flaws(args),
        max_time: args.max_time,
        max_amount: args.max_amount,
        max_htlcs: args.max_htlcs,
        users: args.users,
        honesty: None,
        broken_skip: false,
    }
}

fn report_outcome(args: &Args, what: &str, outcome: &CheckOutcome) -> ExitCode {
    let stats = outcome.stats();
    println!("check: {what}");
    println!(
        "states: {} | transitions: {} | depth: {} | terminal: {}",
        stats.states, stats.transitions, stats.depth, stats.terminal_states
    );
    if let Some(exact) = stats.distinct_exact {
        let agree = exact == stats.states;
        println!("exact-state cross-check: {exact} ({})", if agree { "agrees" } else { "MISMATCH" });
    }
    match outcome {
        CheckOutcome::Pass(_) => {
            println!("result: PASS");
            ExitCode::from(0)
        }
        CheckOutcome::Violation { violation, trace, .. } => {
            println!("result: VIOLATION ({})", violation.describe());
            println!("trace length: {}", trace.len());
            if let Violation::RefinementStep { pre, post, .. } = violation {
                println!("abstract pre-state:");
                for (k, v) in pre {
                    println!("    {k} = {v}");
                }
                println!("abstract post-state:");
                for (k, v) in post {
                    println!("    {k} = {v}");
                }
            }
            let rendered = trace.render();
            if let Some(path) = &args.trace_out {
                if let Err(e) = std::fs::File::create(path).and_then(|mut f| f.write_all(rendered.as_bytes())) {
                    eprintln!("warning: cannot write trace to {}: {e}", path.display());
                }
            } else {
                println!("{rendered}");
            }
            ExitCode::from(1)
        }
        CheckOutcome::BoundExhausted(_) => {
            println!("result: BOUND EXHAUSTED");
            ExitCode::from(3)
        }
    }
}

fn run_network_explore(args: &Args) -> Result<ExitCode, String> {
    if flaws(args).any() {
        return Err("spec X has no flaw toggles".into());
    }
    let bounds = NetBounds {
        num_users: args.users.unwrap_or(2),
        max_external: 3,
        max_payments: 2,
        max_amount: args.max_amount.unwrap_or(2),
    };
    let model = NetModel::new(bounds);
    let invariants = vec![conservation_invariant(), honest_monotone_invariant()];
    let outcome = explore(&model, &invariants, opts(args));
    Ok(report_outcome(args, "explore spec X (idealized payment network)", &outcome))
}

fn run_explore(args: &Args, id: SpecId) -> Result<ExitCode, String> {
    let scenario = build_scenario(&config(args, id)).map_err(|e| e.to_string())?;
    let model = GlobalModel::new(scenario);
    let invariants = protocol_invariants(model.scenario.clone());
    let outcome = explore(&model, &invariants, opts(args));
    Ok(report_outcome(args, &format!("explore spec {id} (invariant suite)"), &outcome))
}

fn run_terminal(args: &Args, id: SpecId) -> Result<ExitCode, String> {
    let scenario = build_scenario(&config(args, id)).map_err(|e| e.to_string())?;
    let model = GlobalModel::new(scenario);
    let invariants = protocol_invariants(model.scenario.clone());
    let sc = model.scenario.clone();
    let outcome = check_terminal_states(
        &model,
        &invariants,
        "honest-users-retrieve-correct-balance",
        move |gs| honest_safety_holds(&sc, gs),
        opts(args),
    );
    Ok(report_outcome(args, &format!("terminal-state check spec {id}"), &outcome))
}

fn run_refine(args: &Args, id: SpecId) -> Result<ExitCode, String> {
    let abs = args.r#abstract.ok_or("--check refine requires --abstract")?;
    let scenario = build_scenario(&config(args, id)).map_err(|e| e.to_string())?;
    let model = GlobalModel::new(scenario);
    match (id, abs) {
        (SpecId::VIII | SpecId::IX, AbstractId::X) => {
            let sc = model.scenario.clone();
            let outcome = check_refinement(
                &model,
                move |gs| map_to_network(&sc, gs),
                &NetworkAbstract,
                opts(args),
            );
            Ok(report_outcome(args, &format!("refinement spec {id} => spec X"), &outcome))
        }
        (SpecId::III | SpecId::IV, AbstractId::V) | (SpecId::I | SpecId::II, AbstractId::Vii) => {
            if model.scenario.channel_variant != ChannelVariant::Protocol {
                return Err("refinement to an ideal spec starts from a protocol spec".into());
            }
            if id == SpecId::III || id == SpecId::I {
                return Err(format!(
                    "spec {id} uses the regular clock; refine its optimized variant instead"
                ));
            }
            let twin = ideal_twin(&model.scenario);
            let abstract_side = IdealAbstract::new(GlobalModel::new(twin));
            let sc = model.scenario.clone();
            let outcome = check_refinement(
                &model,
                move |gs| map_proto_to_ideal(&sc, gs),
                &abstract_side,
                opts(args),
            );
            Ok(report_outcome(args, &format!("refinement spec {id} => ideal channel spec"), &outcome))
        }
        (_, _) => Err(format!("unsupported refinement: spec {id} with abstract {abs:?}")),
    }
}

fn run_projection(args: &Args, id: SpecId) -> Result<ExitCode, String> {
    let partner = id
        .time_partner()
        .ok_or_else(|| format!("spec {id} has no regular/optimized time partner"))?;
    let scenario_a = build_scenario(&config(args, id)).map_err(|e| e.to_string())?;
    let scenario_b = build_scenario(&config(args, partner)).map_err(|e| e.to_string())?;
    let model_a = GlobalModel::new(scenario_a);
    let model_b = GlobalModel::new(scenario_b);
    let outcome = compare_projected_state_sets(
        &model_a,
        &model_b,
        project_without_time,
        project_without_time,
        opts(args),
    );
    println!("check: compare-projection spec {id} vs spec {partner} (time dropped)");
    match outcome {
        ProjectionOutcome::Equal { states_a, states_b, projected } => {
            println!("states: {states_a} vs {states_b} | projected: {projected}");
            println!("result: EQUAL");
            Ok(ExitCode::from(0))
        }
        ProjectionOutcome::Witness { only_in, vars } => {
            println!("result: WITNESS (projected state only in {only_in})");
            for (k, v) in vars {
                println!("    {k} = {v}");
            }
            Ok(ExitCode::from(1))
        }
        ProjectionOutcome::BoundExhausted => {
            println!("result: BOUND EXHAUSTED");
            Ok(ExitCode::from(3))
        }
    }
}

// Silence the unused-import lint for AbstractSide: it is only used through
// trait-method syntax in report paths on some configurations.
#[allow(dead_code)]
fn _assert_traits(n: &NetworkAbstract, s: &pcnchk::ideal_network::IdealNetworkState) {
    let _ = n.satisfies_init(s);
}
