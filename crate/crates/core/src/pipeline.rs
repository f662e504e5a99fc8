//! End-to-end analysis of one program.
//!
//! Everything up to classification is independent of the sensitive list, so
//! [`prepare`] caches it in a [`PreparedProgram`] and [`detect`] can be rerun
//! cheaply with different lists (used by the sweep experiment).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::classify::{classify, post_filter, RemovedCheck, SuspiciousCheck};
use crate::controldep::{detect_logic_bombs, DetectConfig, Detection, SensitiveList};
use crate::deadline::Deadline;
use crate::filters::{apply_filters, FilterConfig};
use crate::graphs::{build_call_graph, build_icfg, CallGraph, CallGraphAlgorithm, Icfg};
use crate::ir::{parse_program, MethodId, Program, StmtId};
use crate::model::Scene;
use crate::predicates::{annotate_edges, recover_path_predicates, Caps, MethodPredicates};
use crate::report::{AnalysisReport, ConfigEcho, PhaseDurations, Status};
use crate::symex::{run_symbolic_execution, AtomicCondition, ModelCatalog};

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub callgraph: CallGraphAlgorithm,
    pub caps: Caps,
    pub detect: DetectConfig,
    pub filters: FilterConfig,
    pub sensitive: Arc<SensitiveList>,
    pub catalog: Arc<ModelCatalog>,
    pub timeout: Option<Duration>,
}

impl Default for AnalysisConfig {
    /// The control configuration: CHA, large list, no filters.
    fn default() -> Self {
        AnalysisConfig {
            callgraph: CallGraphAlgorithm::Cha,
            caps: Caps::default(),
            detect: DetectConfig::default(),
            filters: FilterConfig::default(),
            sensitive: Arc::new(SensitiveList::large()),
            catalog: Arc::new(ModelCatalog::builtin()),
            timeout: Some(Duration::from_secs(crate::DEFAULT_TIMEOUT_SECS)),
        }
    }
}

impl AnalysisConfig {
    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            callgraph: self.callgraph.as_str().to_string(),
            filters: self.filters.enabled().iter().map(|k| k.short().to_string()).collect(),
            app_package: self.filters.app_package.clone(),
            library_prefixes: self.filters.library_prefixes.len(),
            sensitive_list: self.sensitive.name.clone(),
            sensitive_entries: self.sensitive.len(),
            catalog_entries: self.catalog.len(),
            atom_cap: self.caps.atom_cap,
            formula_cap: self.caps.formula_cap,
            max_depth: self.detect.max_depth,
            switch_depth: self.detect.switch_depth,
            timeout_secs: self.timeout.map(|t| t.as_secs()),
        }
    }

    pub fn deadline(&self) -> Deadline {
        match self.timeout {
            Some(t) => Deadline::after(t),
            None => Deadline::none(),
        }
    }
}

/// Fills in what the configuration leaves to the program: the application
/// package for the package filter defaults to the one implied by the
/// program's components.
pub fn resolve_config(config: &AnalysisConfig, program: &Program) -> AnalysisConfig {
    let mut c = config.clone();
    if c.filters.enable_package && c.filters.app_package.is_none() {
        c.filters.app_package = program.application_package();
    }
    c
}

/// A program analyzed up to (and including) classification.
pub struct PreparedProgram {
    pub program: Program,
    pub callgraph: CallGraph,
    pub icfg: Icfg,
    pub conditions: BTreeMap<StmtId, AtomicCondition>,
    pub predicates: BTreeMap<MethodId, MethodPredicates>,
    /// Checks surviving the post-filter.
    pub checks: Vec<SuspiciousCheck>,
    pub removed_checks: Vec<RemovedCheck>,
    pub diagnostics: Vec<String>,
    pub truncated: bool,
    pub durations: PhaseDurations,
    pub symex_iterations: usize,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

pub fn prepare(program: Program, config: &AnalysisConfig, deadline: &Deadline) -> PreparedProgram {
    let mut durations = PhaseDurations::default();
    let t = Instant::now();
    let scene = Scene::new(&program);
    let callgraph = build_call_graph(&scene, config.callgraph);
    let icfg = build_icfg(&scene, &callgraph);
    durations.graphs = ms(t);
    let diagnostics = scene.entry.diagnostics.clone();

    let t = Instant::now();
    let sym = run_symbolic_execution(&scene, &icfg, &callgraph, &config.catalog, deadline);
    durations.symex = ms(t);
    let mut truncated = sym.truncated;

    let t = Instant::now();
    let mut predicates = BTreeMap::new();
    for m in icfg.methods() {
        if deadline.expired() {
            truncated = true;
            break;
        }
        let cfg = icfg.cfg(m).expect("method in icfg");
        let ann = annotate_edges(cfg, &icfg.conditions);
        let p = recover_path_predicates(cfg, &ann, config.caps, deadline);
        truncated |= p.truncated;
        predicates.insert(m, p);
    }
    durations.predicate_recovery = ms(t);

    let t = Instant::now();
    let (checks, removed_checks) = post_filter(classify(&sym.conditions));
    durations.classification = ms(t);

    drop(scene);
    PreparedProgram {
        program,
        callgraph,
        icfg,
        conditions: sym.conditions,
        predicates,
        checks,
        removed_checks,
        diagnostics,
        truncated,
        durations,
        symex_iterations: sym.iterations,
    }
}

/// Control-dependency search of a prepared program against `sensitive`.
pub fn detect(prep: &PreparedProgram, sensitive: &SensitiveList, config: &AnalysisConfig, deadline: &Deadline) -> Detection {
    let scene = Scene::new(&prep.program);
    detect_logic_bombs(
        &scene,
        &prep.icfg,
        &prep.callgraph,
        &prep.checks,
        &prep.conditions,
        &prep.predicates,
        sensitive,
        config.detect,
        config.caps.atom_cap,
        deadline,
    )
}

pub fn analyze_program(program: Program, config: &AnalysisConfig) -> AnalysisReport {
    let start = Instant::now();
    let deadline = config.deadline();
    let source_id = program.source_id.clone();
    analyze_with(program, config, &deadline, start, &source_id, 0.0)
}

fn analyze_with(
    program: Program,
    config: &AnalysisConfig,
    deadline: &Deadline,
    start: Instant,
    source_id: &str,
    parse_ms: f64,
) -> AnalysisReport {
    let config = &resolve_config(config, &program);
    let mut report = AnalysisReport::new(source_id, config.echo());
    let units = program.units.len();
    let prep = prepare(program, config, deadline);

    let t = Instant::now();
    let detection = detect(&prep, &config.sensitive, config, deadline);
    let controldep_ms = ms(t);

    let t = Instant::now();
    let outcome = apply_filters(detection.findings, &config.filters);
    let filters_ms = ms(t);

    report.findings = outcome.kept;
    report.removed_findings = outcome.removed;
    report.removed_checks = prep.removed_checks.clone();
    report.diagnostics = prep.diagnostics.clone();
    report.phase_durations = PhaseDurations {
        parse: parse_ms,
        controldep: controldep_ms,
        filters: filters_ms,
        ..prep.durations
    };
    let reachable: BTreeSet<MethodId> = prep.callgraph.reachable.clone();
    report.stats = crate::report::AnalysisStats {
        units,
        reachable_methods: reachable.len(),
        instructions: prep.icfg.instructions.len(),
        conditions: prep.icfg.conditions.len(),
        callgraph_edges: prep.callgraph.edge_pairs().len(),
        suspicious_checks: prep.checks.len(),
        unknown_predicates: prep.predicates.values().map(|p| p.unknown.len()).sum(),
        partial_predicates: prep.predicates.values().map(|p| p.partial.len()).sum(),
        symex_iterations: prep.symex_iterations,
    };
    if prep.truncated || detection.truncated || deadline.expired() {
        report.status = Status::Timeout;
        for f in &mut report.findings {
            f.partial = true;
        }
        report.diagnostics.push("analysis deadline reached; results are partial".into());
    }
    report.recount();
    report.duration_ms = ms(start);
    report
}

pub fn analyze_source(text: &str, source_id: &str, config: &AnalysisConfig) -> AnalysisReport {
    let start = Instant::now();
    let deadline = config.deadline();
    match parse_program(text, source_id) {
        Ok(p) => {
            let parse_ms = ms(start);
            analyze_with(p, config, &deadline, start, source_id, parse_ms)
        }
        Err(e) => {
            let mut r = AnalysisReport::error(source_id, config.echo(), e.to_string());
            r.duration_ms = ms(start);
            r
        }
    }
}

pub fn analyze_file(path: &Path, config: &AnalysisConfig) -> AnalysisReport {
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    match std::fs::read_to_string(path) {
        Ok(text) => analyze_source(&text, &source_id, config),
        Err(e) => AnalysisReport::error(&source_id, config.echo(), format!("{}: {e}", path.display())),
    }
}
