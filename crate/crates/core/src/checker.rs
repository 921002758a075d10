//! Explicit-state model checker: breadth-first exploration with state
//! fingerprinting, invariant evaluation, terminal-state analysis,
//! refinement-mapping validation and projected-state-set comparison.
//!
//! Exploration is level-synchronized: successor generation within a level
//! may fan out to worker threads, but levels are merged sequentially in
//! canonical state order, so state counts, violation choices and traces are
//! identical for any worker count.

use crate::encode::Canon;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

/// State requirements for exploration: canonical encoding gives dedup keys
/// and fingerprints.
pub trait ModelState: Clone + Eq + Ord + Send + Sync + Canon + fmt::Debug + 'static {}

impl<T: Clone + Eq + Ord + Send + Sync + Canon + fmt::Debug + 'static> ModelState for T {}

/// One enabled transition out of a state.
#[derive(Debug, Clone)]
pub struct Step<S> {
    pub action: &'static str,
    pub params: String,
    pub state: S,
}

/// A guarded-action transition system with a deterministic action order.
pub trait Model: Sync {
    type State: ModelState;

    fn init_states(&self) -> Vec<Self::State>;
    fn successors(&self, s: &Self::State) -> Vec<Step<Self::State>>;

    /// Flat variable rendering used for trace diffs.
    fn state_vars(&self, s: &Self::State) -> BTreeMap<String, String>;

    /// Clock steps are excluded when deciding whether a state is terminal.
    fn is_time_action(&self, action: &str) -> bool {
        action == "AdvanceLedgerTime" || action == "OptimizedAdvanceLedgerTime"
    }
}

/// A named state predicate checked on every reachable state.
pub struct Invariant<S> {
    pub name: &'static str,
    pub check: Box<dyn Fn(&S) -> bool + Sync>,
}

impl<S> Invariant<S> {
    pub fn new(name: &'static str, check: impl Fn(&S) -> bool + Sync + 'static) -> Self {
        Invariant { name, check: Box::new(check) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckOptions {
    /// Also keep full canonical states and cross-check the fingerprint set
    /// against them (collision detection at desk scale).
    pub exact_states: bool,
    /// Worker threads for successor generation; 1 = fully sequential.
    pub workers: usize,
    /// Abort exploration when the store exceeds this many states (0 = off).
    pub max_states: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { exact_states: true, workers: 1, max_states: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExploreStats {
    pub states: u64,
    pub distinct_exact: Option<u64>,
    pub transitions: u64,
    pub depth: u32,
    pub terminal_states: u64,
}

/// One trace record: the action taken and the resulting variable values.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub action: String,
    pub params: String,
    pub vars: BTreeMap<String, String>,
}

/// A counterexample: an initial state and the steps leading to the offense.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub initial_vars: BTreeMap<String, String>,
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Line-delimited records: index, action, params, changed-variables diff.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "step 0 | <init>").unwrap();
        for (k, v) in &self.initial_vars {
            writeln!(out, "    {k} = {v}").unwrap();
        }
        let mut prev = &self.initial_vars;
        for (i, step) in self.steps.iter().enumerate() {
            if step.params.is_empty() {
                writeln!(out, "step {} | {}", i + 1, step.action).unwrap();
            } else {
                writeln!(out, "step {} | {} | {}", i + 1, step.action, step.params).unwrap();
            }
            for (k, v) in &step.vars {
                match prev.get(k) {
                    Some(old) if old == v => {}
                    Some(old) => writeln!(out, "    {k} : {old} -> {v}").unwrap(),
                    None => writeln!(out, "    {k} = {v}").unwrap(),
                }
            }
            for k in prev.keys() {
                if !step.vars.contains_key(k) {
                    writeln!(out, "    {k} : removed").unwrap();
                }
            }
            prev = &step.vars;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum Violation {
    Invariant { name: &'static str },
    Terminal { name: String },
    RefinementInit { abstract_vars: BTreeMap<String, String> },
    RefinementStep { action: String, params: String, pre: BTreeMap<String, String>, post: BTreeMap<String, String> },
}

impl Violation {
    pub fn describe(&self) -> String {
        match self {
            Violation::Invariant { name } => format!("invariant '{name}' violated"),
            Violation::Terminal { name } => format!("terminal-state predicate '{name}' violated"),
            Violation::RefinementInit { .. } => {
                "mapped initial state does not satisfy abstract Init".into()
            }
            Violation::RefinementStep { action, params, .. } => format!(
                "transition '{action}' ({params}) maps to neither stuttering nor an abstract step"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub enum CheckOutcome {
    Pass(ExploreStats),
    Violation { violation: Violation, trace: Trace, stats: ExploreStats },
    BoundExhausted(ExploreStats),
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, CheckOutcome::Pass(_))
    }

    pub fn stats(&self) -> &ExploreStats {
        match self {
            CheckOutcome::Pass(s) => s,
            CheckOutcome::Violation { stats, .. } => stats,
            CheckOutcome::BoundExhausted(s) => s,
        }
    }
}

struct NodeMeta {
    depth: u32,
    parent_fp: u64,
    action: &'static str,
    /// Index into the interned parameter-string table.
    params: u32,
}

/// Parameter strings repeat heavily across states; intern them.
#[derive(Default)]
struct ParamTable {
    by_string: HashMap<String, u32>,
    strings: Vec<String>,
}

impl ParamTable {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&i) = self.by_string.get(s) {
            return i;
        }
        let i = self.strings.len() as u32;
        self.by_string.insert(s.to_string(), i);
        self.strings.push(s.to_string());
        i
    }

    fn get(&self, i: u32) -> &str {
        &self.strings[i as usize]
    }
}

/// States expanded per parallel batch; bounds peak successor memory.
const CHUNK: usize = 1024;

/// Internal exploration engine shared by the public checks.
struct Engine<'a, M: Model> {
    model: &'a M,
    invariants: &'a [Invariant<M::State>],
    terminal: Option<(&'a str, &'a (dyn Fn(&M::State) -> bool + Sync))>,
    opts: CheckOptions,
}

enum EngineEnd {
    Done,
    Bound,
    Offense { state_fp: u64, violation: Violation },
}

struct EngineRun<S> {
    seen: HashMap<u64, NodeMeta>,
    init_by_fp: HashMap<u64, S>,
    exact: Option<BTreeSet<Vec<u8>>>,
    params: ParamTable,
    stats: ExploreStats,
    end: EngineEnd,
    /// Projected canonical bytes -> representative state (for projection
    /// comparison); populated only when requested.
    projections: Option<BTreeMap<Vec<u8>, S>>,
}

impl<'a, M: Model> Engine<'a, M> {
    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        if self.opts.workers == 1 {
            f()
        } else {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if self.opts.workers > 0 {
                builder = builder.num_threads(self.opts.workers);
            }
            match builder.build() {
                Ok(pool) => pool.install(f),
                Err(_) => f(),
            }
        }
    }

    fn run(&self, projection: Option<&(dyn Fn(&M::State) -> Vec<u8> + Sync)>) -> EngineRun<M::State> {
        self.in_pool(|| self.run_inner(projection))
    }

    fn run_inner(
        &self,
        projection: Option<&(dyn Fn(&M::State) -> Vec<u8> + Sync)>,
    ) -> EngineRun<M::State> {
        let mut run = EngineRun {
            seen: HashMap::new(),
            init_by_fp: HashMap::new(),
            exact: self.opts.exact_states.then(BTreeSet::new),
            params: ParamTable::default(),
            stats: ExploreStats::default(),
            end: EngineEnd::Done,
            projections: projection.map(|_| BTreeMap::new()),
        };

        // Deterministic initial layer: sorted, deduplicated.
        let mut inits = self.model.init_states();
        inits.sort();
        inits.dedup();

        let init_params = run.params.intern("");
        let mut layer: Vec<M::State> = Vec::new();
        for s in inits {
            let fp = s.fingerprint();
            if let std::collections::hash_map::Entry::Vacant(e) = run.seen.entry(fp) {
                e.insert(NodeMeta { depth: 0, parent_fp: fp, action: "<init>", params: init_params });
                if let Some(exact) = run.exact.as_mut() {
                    exact.insert(s.canon_bytes());
                }
                run.init_by_fp.insert(fp, s.clone());
                run.stats.states += 1;
                layer.push(s);
            }
        }

        let mut depth: u32 = 0;
        while !layer.is_empty() {
            run.stats.depth = depth;
            if std::env::var_os("PCNCHK_PROGRESS").is_some() {
                eprintln!("depth {depth}: layer {} | seen {}", layer.len(), run.stats.states);
            }
            if let Some(d) = std::env::var("PCNCHK_VARHIST").ok().and_then(|v| v.parse::<u32>().ok()) {
                if d == depth {
                    let mut hist: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
                    for s in layer.iter().take(5000) {
                        for (k, v) in self.model.state_vars(s) {
                            hist.entry(k).or_default().insert(v);
                        }
                    }
                    let mut counts: Vec<(usize, String, BTreeSet<String>)> =
                        hist.into_iter().map(|(k, vs)| (vs.len(), k, vs)).collect();
                    counts.sort();
                    counts.reverse();
                    for (n, k, vs) in counts.iter().take(3) {
                        eprintln!("varhist {k}: {n}");
                        for v in vs.iter().take(40) {
                            eprintln!("    {v}");
                        }
                    }
                    std::process::exit(0);
                }
            }

            // Invariants first: every state is checked before expansion.
            if !self.invariants.is_empty() {
                let offender: Option<(usize, usize)> = layer
                    .par_iter()
                    .enumerate()
                    .filter_map(|(i, s)| {
                        self.invariants
                            .iter()
                            .position(|inv| !(inv.check)(s))
                            .map(|j| (i, j))
                    })
                    .min();
                if let Some((i, j)) = offender {
                    run.end = EngineEnd::Offense {
                        state_fp: layer[i].fingerprint(),
                        violation: Violation::Invariant { name: self.invariants[j].name },
                    };
                    return run;
                }
            }

            if let Some(proj) = projection {
                let keys: Vec<Vec<u8>> = layer.par_iter().map(|s| proj(s)).collect();
                let table = run.projections.as_mut().unwrap();
                for (s, key) in layer.iter().zip(keys) {
                    table.entry(key).or_insert_with(|| s.clone());
                }
            }

            // Successor generation in bounded chunks, merged in layer order.
            let mut next_layer: Vec<M::State> = Vec::new();
            for chunk in layer.chunks(CHUNK) {
                let expanded: Vec<(u64, Vec<Step<M::State>>)> = chunk
                    .par_iter()
                    .map(|s| (s.fingerprint(), self.model.successors(s)))
                    .collect();

                // Terminal states: nothing is enabled at all. A state where
                // only the clock can move is not final; its time-advanced
                // descendants carry the same non-time variables and are
                // checked when the clock runs out (or freezes).
                if let Some((name, pred)) = self.terminal {
                    let mut offense: Option<&M::State> = None;
                    for (s, (_, steps)) in chunk.iter().zip(&expanded) {
                        if steps.is_empty() {
                            run.stats.terminal_states += 1;
                            if offense.is_none() && !pred(s) {
                                offense = Some(s);
                            }
                        }
                    }
                    if let Some(s) = offense {
                        run.end = EngineEnd::Offense {
                            state_fp: s.fingerprint(),
                            violation: Violation::Terminal { name: name.to_string() },
                        };
                        return run;
                    }
                } else {
                    for (_, steps) in &expanded {
                        if steps.is_empty() {
                            run.stats.terminal_states += 1;
                        }
                    }
                }

                for (parent_fp, steps) in expanded {
                    run.stats.transitions += steps.len() as u64;
                    for step in steps {
                        let fp = step.state.fingerprint();
                        if let std::collections::hash_map::Entry::Vacant(e) = run.seen.entry(fp) {
                            let params = run.params.intern(&step.params);
                            e.insert(NodeMeta { depth: depth + 1, parent_fp, action: step.action, params });
                            if let Some(exact) = run.exact.as_mut() {
                                exact.insert(step.state.canon_bytes());
                            }
                            run.stats.states += 1;
                            next_layer.push(step.state);
                        }
                    }
                }
            }

            if self.opts.max_states > 0 && run.stats.states > self.opts.max_states {
                run.end = EngineEnd::Bound;
                return run;
            }

            next_layer.sort();
            next_layer.dedup();
            layer = next_layer;
            depth += 1;
        }

        run.stats.distinct_exact = run.exact.as_ref().map(|e| e.len() as u64);
        run
    }

    /// Rebuilds the shortest trace to `target_fp` by replaying recorded
    /// (action, params) choices forward from the initial state.
    fn rebuild_trace(&self, run: &EngineRun<M::State>, target_fp: u64) -> Trace {
        let mut chain: Vec<u64> = Vec::new();
        let mut fp = target_fp;
        loop {
            chain.push(fp);
            let meta = &run.seen[&fp];
            if meta.depth == 0 {
                break;
            }
            fp = meta.parent_fp;
        }
        chain.reverse();

        let mut state = run.init_by_fp[&chain[0]].clone();
        let mut trace = Trace { initial_vars: self.model.state_vars(&state), steps: Vec::new() };
        for target in &chain[1..] {
            let meta = &run.seen[target];
            let params = run.params.get(meta.params);
            let steps = self.model.successors(&state);
            let hit = steps
                .into_iter()
                .find(|st| {
                    st.action == meta.action
                        && st.params == params
                        && st.state.fingerprint() == *target
                })
                .expect("trace replay: recorded step must regenerate");
            trace.steps.push(TraceStep {
                action: hit.action.to_string(),
                params: hit.params.clone(),
                vars: self.model.state_vars(&hit.state),
            });
            state = hit.state;
        }
        trace
    }

    fn finish(&self, run: EngineRun<M::State>) -> CheckOutcome {
        match &run.end {
            EngineEnd::Done => CheckOutcome::Pass(run.stats.clone()),
            EngineEnd::Bound => CheckOutcome::BoundExhausted(run.stats.clone()),
            EngineEnd::Offense { state_fp, violation, .. } => {
                let trace = self.rebuild_trace(&run, *state_fp);
                CheckOutcome::Violation {
                    violation: violation.clone(),
                    trace,
                    stats: run.stats.clone(),
                }
            }
        }
    }
}

/// Exhaustive exploration with invariant checking. Violation traces are
/// shortest in step count (breadth-first order, deterministic tie-break).
pub fn explore<M: Model>(
    model: &M,
    invariants: &[Invariant<M::State>],
    opts: CheckOptions,
) -> CheckOutcome {
    let engine = Engine { model, invariants, terminal: None, opts };
    let run = engine.run(None);
    engine.finish(run)
}

/// Exploration that additionally evaluates `predicate` on every terminal
/// state (a state whose only enabled actions, if any, advance the clock).
pub fn check_terminal_states<M: Model>(
    model: &M,
    invariants: &[Invariant<M::State>],
    predicate_name: &str,
    predicate: impl Fn(&M::State) -> bool + Sync,
    opts: CheckOptions,
) -> CheckOutcome {
    let engine = Engine { model, invariants, terminal: Some((predicate_name, &predicate)), opts };
    let run = engine.run(None);
    engine.finish(run)
}

/// The abstract side of a refinement check: an Init predicate and a total
/// step predicate over mapped states.
pub trait AbstractSide: Sync {
    type State: ModelState;

    fn satisfies_init(&self, s: &Self::State) -> bool;
    fn is_step(&self, pre: &Self::State, post: &Self::State) -> bool;
    fn state_vars(&self, s: &Self::State) -> BTreeMap<String, String>;
}

/// Validates a refinement mapping: every mapped initial state satisfies the
/// abstract Init, and every reachable concrete transition maps to stuttering
/// or an abstract step.
pub fn check_refinement<M: Model, A: AbstractSide>(
    model: &M,
    mapping: impl Fn(&M::State) -> A::State + Sync,
    abstract_side: &A,
    opts: CheckOptions,
) -> CheckOutcome {
    struct RefineOffense {
        chunk_idx: usize,
        violation: Violation,
    }

    let engine = Engine { model, invariants: &[], terminal: None, opts };

    engine.in_pool(|| {
        let mut run = EngineRun::<M::State> {
            seen: HashMap::new(),
            init_by_fp: HashMap::new(),
            exact: opts.exact_states.then(BTreeSet::new),
            params: ParamTable::default(),
            stats: ExploreStats::default(),
            end: EngineEnd::Done,
            projections: None,
        };

        let mut inits = model.init_states();
        inits.sort();
        inits.dedup();

        let init_params = run.params.intern("");
        let mut layer: Vec<M::State> = Vec::new();
        for s in inits {
            let fp = s.fingerprint();
            if let std::collections::hash_map::Entry::Vacant(e) = run.seen.entry(fp) {
                e.insert(NodeMeta { depth: 0, parent_fp: fp, action: "<init>", params: init_params });
                if let Some(exact) = run.exact.as_mut() {
                    exact.insert(s.canon_bytes());
                }
                run.init_by_fp.insert(fp, s.clone());
                run.stats.states += 1;

                let abs = mapping(&s);
                if !abstract_side.satisfies_init(&abs) {
                    run.end = EngineEnd::Offense {
                        state_fp: fp,
                        violation: Violation::RefinementInit {
                            abstract_vars: abstract_side.state_vars(&abs),
                        },
                    };
                    return engine.finish(run);
                }
                layer.push(s);
            }
        }

        let mut depth: u32 = 0;
        while !layer.is_empty() {
            run.stats.depth = depth;

            let mut next_layer: Vec<M::State> = Vec::new();
            for chunk in layer.chunks(CHUNK) {
                let expanded: Vec<(u64, Vec<Step<M::State>>)> = chunk
                    .par_iter()
                    .map(|s| (s.fingerprint(), model.successors(s)))
                    .collect();

                // Check every transition of the chunk in parallel, then pick
                // the deterministically-first offender if any.
                let offense: Option<RefineOffense> = chunk
                    .par_iter()
                    .zip(&expanded)
                    .enumerate()
                    .filter_map(|(i, (s, (_, steps)))| {
                        let pre = mapping(s);
                        for step in steps {
                            let post = mapping(&step.state);
                            if post != pre && !abstract_side.is_step(&pre, &post) {
                                return Some((
                                    i,
                                    RefineOffense {
                                        chunk_idx: i,
                                        violation: Violation::RefinementStep {
                                            action: step.action.to_string(),
                                            params: step.params.clone(),
                                            pre: abstract_side.state_vars(&pre),
                                            post: abstract_side.state_vars(&post),
                                        },
                                    },
                                ));
                            }
                        }
                        None
                    })
                    .min_by_key(|(i, _)| *i)
                    .map(|(_, o)| o);

                if let Some(off) = offense {
                    run.end = EngineEnd::Offense {
                        state_fp: chunk[off.chunk_idx].fingerprint(),
                        violation: off.violation,
                    };
                    return engine.finish(run);
                }

                for (parent_fp, steps) in expanded {
                    run.stats.transitions += steps.len() as u64;
                    for step in steps {
                        let fp = step.state.fingerprint();
                        if let std::collections::hash_map::Entry::Vacant(e) = run.seen.entry(fp) {
                            let params = run.params.intern(&step.params);
                            e.insert(NodeMeta { depth: depth + 1, parent_fp, action: step.action, params });
                            if let Some(exact) = run.exact.as_mut() {
                                exact.insert(step.state.canon_bytes());
                            }
                            run.stats.states += 1;
                            next_layer.push(step.state);
                        }
                    }
                }
            }

            if opts.max_states > 0 && run.stats.states > opts.max_states {
                run.end = EngineEnd::Bound;
                return engine.finish(run);
            }

            next_layer.sort();
            next_layer.dedup();
            layer = next_layer;
            depth += 1;
        }

        run.stats.distinct_exact = run.exact.as_ref().map(|e| e.len() as u64);
        engine.finish(run)
    })
}

#[derive(Debug, Clone)]
pub enum ProjectionOutcome {
    Equal { states_a: u64, states_b: u64, projected: u64 },
    Witness {
        /// Which side reached the projected state the other did not.
        only_in: char,
        vars: BTreeMap<String, String>,
    },
    BoundExhausted,
}

/// Computes both reachable sets, projects each state and compares the
/// projected sets. A witness is a representative state whose projection lies
/// in the symmetric difference.
pub fn compare_projected_state_sets<MA: Model, MB: Model>(
    model_a: &MA,
    model_b: &MB,
    project_a: impl Fn(&MA::State) -> Vec<u8> + Sync,
    project_b: impl Fn(&MB::State) -> Vec<u8> + Sync,
    opts: CheckOptions,
) -> ProjectionOutcome {
    let vars_a = |s: &MA::State| model_a.state_vars(s);
    let vars_b = |s: &MB::State| model_b.state_vars(s);
    let engine_a = Engine { model: model_a, invariants: &[], terminal: None, opts };
    let run_a = engine_a.run(Some(&project_a));
    if matches!(run_a.end, EngineEnd::Bound) {
        return ProjectionOutcome::BoundExhausted;
    }
    let engine_b = Engine { model: model_b, invariants: &[], terminal: None, opts };
    let run_b = engine_b.run(Some(&project_b));
    if matches!(run_b.end, EngineEnd::Bound) {
        return ProjectionOutcome::BoundExhausted;
    }

    let proj_a = run_a.projections.unwrap();
    let proj_b = run_b.projections.unwrap();
    for (key, rep) in &proj_a {
        if !proj_b.contains_key(key) {
            return ProjectionOutcome::Witness { only_in: 'A', vars: vars_a(rep) };
        }
    }
    for (key, rep) in &proj_b {
        if !proj_a.contains_key(key) {
            return ProjectionOutcome::Witness { only_in: 'B', vars: vars_b(rep) };
        }
    }
    ProjectionOutcome::Equal {
        states_a: run_a.stats.states,
        states_b: run_b.stats.states,
        projected: proj_a.len() as u64,
    }
}
