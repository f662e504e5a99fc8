//! Guarded regions and the search for sensitive calls beneath them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classify::SuspiciousCheck;
use crate::deadline::Deadline;
use crate::graphs::{CallGraph, Icfg};
use crate::ir::{Callee, ComponentKind, FieldRef, MethodId, Place, StmtId, StmtKind};
use crate::model::Scene;
use crate::predicates::{minimize, Formula, Literal, MethodPredicates};
use crate::symex::AtomicCondition;

pub const DEFAULT_MAX_DEPTH: usize = 10;
pub const DEFAULT_SWITCH_DEPTH: usize = 1;

/// Signatures whose invocation under a suspicious check makes a finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveList {
    pub name: String,
    entries: BTreeSet<String>,
    /// `Class.*` entries, honored only when `match_prefixes` is set.
    prefixes: BTreeSet<String>,
    pub match_prefixes: bool,
}

const LARGE_LIST: &str = include_str!("../data/sensitive_large.txt");
const SMALL_LIST: &str = include_str!("../data/sinks_small.txt");

pub const LARGE_LIST_NAME: &str = "sensitive-large";
pub const SMALL_LIST_NAME: &str = "sinks-small";

impl SensitiveList {
    /// One signature per line; `#` comments and blank lines ignored.
    pub fn parse(name: &str, text: &str) -> Self {
        let mut entries = BTreeSet::new();
        let mut prefixes = BTreeSet::new();
        for line in text.lines() {
            let l = line.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            match l.strip_suffix(".*") {
                Some(p) => {
                    prefixes.insert(p.to_string());
                }
                None => {
                    entries.insert(l.to_string());
                }
            }
        }
        SensitiveList {
            name: name.to_string(),
            entries,
            prefixes,
            match_prefixes: false,
        }
    }

    pub fn from_entries(name: &str, entries: impl IntoIterator<Item = String>) -> Self {
        SensitiveList {
            name: name.to_string(),
            entries: entries.into_iter().collect(),
            prefixes: BTreeSet::new(),
            match_prefixes: false,
        }
    }

    pub fn large() -> Self {
        Self::parse(LARGE_LIST_NAME, LARGE_LIST)
    }

    pub fn small() -> Self {
        Self::parse(SMALL_LIST_NAME, SMALL_LIST)
    }

    pub fn contains(&self, signature: &str) -> bool {
        if self.entries.contains(signature) {
            return true;
        }
        self.match_prefixes
            && signature
                .rsplit_once('.')
                .is_some_and(|(class, _)| self.prefixes.contains(class))
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.prefixes.is_empty()
    }

    /// Removable items: exact entries, plus `Class.*` prefixes when they are
    /// honored.
    pub fn items(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.iter().cloned().collect();
        if self.match_prefixes {
            v.extend(self.prefixes.iter().map(|p| format!("{p}.*")));
        }
        v
    }

    /// Copy without the given items (entries or `Class.*` prefixes).
    pub fn without(&self, removed: &BTreeSet<String>) -> Self {
        SensitiveList {
            name: self.name.clone(),
            entries: self.entries.difference(removed).cloned().collect(),
            prefixes: self
                .prefixes
                .iter()
                .filter(|p| !removed.contains(&format!("{p}.*")))
                .cloned()
                .collect(),
            match_prefixes: self.match_prefixes,
        }
    }
}

/// One invoke site on a witness call stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub method: String,
    pub stmt: usize,
    pub line: usize,
    pub callee: String,
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{} (line {}) -> {}", self.method, self.stmt, self.line, self.callee)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveCall {
    pub signature: String,
    /// Invoke sites from the guarded statement down to the sensitive call.
    pub stack: Vec<Frame>,
    pub sites: Vec<StmtId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicBombFinding {
    pub check: SuspiciousCheck,
    pub descriptor: String,
    /// Fully-qualified method holding the check.
    pub method: String,
    pub class: String,
    pub package: String,
    pub line: usize,
    pub guarded_stmts: Vec<usize>,
    /// Statements under the unsatisfied polarity (reported, never searched).
    pub negative_region: Vec<usize>,
    pub sensitive_calls: Vec<SensitiveCall>,
    pub via_switch: Option<String>,
    pub nested: bool,
    pub component: ComponentKind,
    pub starting_component: ComponentKind,
    pub formula: String,
    pub formula_size: usize,
    pub guarded_count: usize,
    /// The search was cut short by the deadline.
    pub partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub max_depth: usize,
    pub switch_depth: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            max_depth: DEFAULT_MAX_DEPTH,
            switch_depth: DEFAULT_SWITCH_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Detection {
    pub findings: Vec<LogicBombFinding>,
    pub truncated: bool,
}

/// Statements of the check's method whose predicate holds the literal.
pub fn region(preds: &MethodPredicates, lit: Literal) -> Vec<usize> {
    preds
        .minimized
        .iter()
        .filter(|(n, f)| **n != lit.atom.index && f.literals().contains(&lit))
        .map(|(n, _)| *n)
        .collect()
}

/// Guarded statements of a check: (satisfied region, other region).
pub fn guarded_instructions(check: &SuspiciousCheck, preds: &MethodPredicates) -> (Vec<usize>, Vec<usize>) {
    let id = check.id();
    let mut sat = BTreeSet::new();
    let mut other = BTreeSet::new();
    for positive in [true, false] {
        let r = region(preds, Literal::new(id, positive));
        if check.satisfied.literals().contains(&positive) {
            sat.extend(r);
        } else {
            other.extend(r);
        }
    }
    (sat.into_iter().collect(), other.into_iter().collect())
}

struct Search<'a, 'p> {
    scene: &'a Scene<'p>,
    icfg: &'a Icfg,
    cg: &'a CallGraph,
    sensitive: &'a SensitiveList,
    max_depth: usize,
    deadline: &'a Deadline,
    truncated: bool,
}

struct SearchResult {
    hits: BTreeMap<String, Vec<StmtId>>,
    visited: BTreeSet<MethodId>,
}

impl Search<'_, '_> {
    fn frame(&self, site: StmtId) -> Frame {
        let stmt = self.scene.stmt(site);
        let callee = match &stmt.kind {
            StmtKind::Invoke { callee, .. } => callee.clone(),
            _ => String::new(),
        };
        Frame {
            method: self.scene.method_name(site.method),
            stmt: site.index,
            line: stmt.pos.line,
            callee,
        }
    }

    /// Breadth-first from `start` invoke sites; first witness per signature.
    fn run(&mut self, start: &[StmtId]) -> SearchResult {
        let mut hits: BTreeMap<String, Vec<StmtId>> = BTreeMap::new();
        let mut visited: BTreeSet<MethodId> = BTreeSet::new();
        let mut queue: VecDeque<(StmtId, Vec<StmtId>)> = start.iter().map(|s| (*s, Vec::new())).collect();
        while let Some((site, prefix)) = queue.pop_front() {
            if self.deadline.expired() {
                self.truncated = true;
                break;
            }
            let mut stack = prefix;
            stack.push(site);
            match self.scene.callee(site) {
                Some(Callee::External(sig)) => {
                    if self.sensitive.contains(sig) && !hits.contains_key(sig) {
                        hits.insert(sig.clone(), stack);
                    }
                }
                Some(Callee::Internal { .. }) => {
                    if stack.len() > self.max_depth {
                        continue;
                    }
                    for t in self.cg.targets(site) {
                        if !visited.insert(t) {
                            continue;
                        }
                        let Some(cfg) = self.icfg.cfg(t) else { continue };
                        for &n in &cfg.nodes {
                            let id = StmtId::new(t, n);
                            if matches!(self.scene.stmt(id).kind, StmtKind::Invoke { .. }) {
                                queue.push_back((id, stack.clone()));
                            }
                        }
                    }
                }
                None => {}
            }
        }
        SearchResult { hits, visited }
    }

    fn invokes(&self, m: MethodId, stmts: &[usize]) -> Vec<StmtId> {
        stmts
            .iter()
            .map(|&n| StmtId::new(m, n))
            .filter(|id| matches!(self.scene.stmt(*id).kind, StmtKind::Invoke { .. }))
            .collect()
    }

    fn calls(&self, hits: &BTreeMap<String, Vec<StmtId>>) -> Vec<SensitiveCall> {
        hits.iter()
            .map(|(sig, sites)| SensitiveCall {
                signature: sig.clone(),
                stack: sites.iter().map(|s| self.frame(*s)).collect(),
                sites: sites.clone(),
            })
            .collect()
    }
}

/// Boolean fields written by the given statements.
fn boolean_writes(scene: &Scene<'_>, stmts: impl IntoIterator<Item = StmtId>) -> BTreeSet<FieldRef> {
    stmts
        .into_iter()
        .filter_map(|id| match &scene.stmt(id).kind {
            StmtKind::Assign {
                dest: Place::Field(f), ..
            } => Some(f.clone()),
            StmtKind::Invoke {
                dest: Some(Place::Field(f)),
                ..
            } => Some(f.clone()),
            _ => None,
        })
        .filter(|f| scene.program.field_kind(f).is_some_and(|k| k == "boolean"))
        .collect()
}

/// Component kind of the lifecycle method through which the dummy main
/// reaches `target` on a shortest call path.
pub fn starting_component(scene: &Scene<'_>, cg: &CallGraph, target: MethodId) -> Option<ComponentKind> {
    let mut parent: BTreeMap<MethodId, MethodId> = BTreeMap::new();
    let mut seen = BTreeSet::from([MethodId::DummyMain]);
    let mut queue = VecDeque::from([MethodId::DummyMain]);
    let mut succ: BTreeMap<MethodId, BTreeSet<MethodId>> = BTreeMap::new();
    for (site, ts) in &cg.edges {
        succ.entry(site.method).or_default().extend(ts.iter().copied());
    }
    while let Some(m) = queue.pop_front() {
        if m == target {
            break;
        }
        for &n in succ.get(&m).into_iter().flatten() {
            if seen.insert(n) {
                parent.insert(n, m);
                queue.push_back(n);
            }
        }
    }
    if !seen.contains(&target) || target == MethodId::DummyMain {
        return None;
    }
    let mut cur = target;
    while let Some(&p) = parent.get(&cur) {
        if p == MethodId::DummyMain {
            break;
        }
        cur = p;
    }
    scene.unit(cur).map(|u| u.kind)
}

#[allow(clippy::too_many_arguments)]
pub fn detect_logic_bombs(
    scene: &Scene<'_>,
    icfg: &Icfg,
    cg: &CallGraph,
    checks: &[SuspiciousCheck],
    conditions: &BTreeMap<StmtId, AtomicCondition>,
    predicates: &BTreeMap<MethodId, MethodPredicates>,
    sensitive: &SensitiveList,
    config: DetectConfig,
    atom_cap: usize,
    deadline: &Deadline,
) -> Detection {
    let mut search = Search {
        scene,
        icfg,
        cg,
        sensitive,
        max_depth: config.max_depth,
        deadline,
        truncated: false,
    };
    let check_atoms: BTreeSet<StmtId> = checks.iter().map(SuspiciousCheck::id).collect();
    let mut findings = Vec::new();

    for check in checks {
        let id = check.id();
        let Some(preds) = predicates.get(&id.method) else { continue };
        let (sat, other) = guarded_instructions(check, preds);

        let stmt_formula = preds.formula(id.index).cloned().unwrap_or(Formula::True);
        let finding_formula = |pols: &[bool]| {
            let polarity = Formula::or(pols.iter().map(|&p| Formula::lit(id, p)));
            minimize(&Formula::and([stmt_formula.clone(), polarity]), atom_cap).formula
        };
        let all_pols = check.satisfied.literals();
        let formula = finding_formula(all_pols);
        let nested = formula.atoms().iter().any(|a| *a != id && check_atoms.contains(a));

        let unit = scene.unit(id.method);
        let component = unit.map(|u| u.kind).unwrap_or(ComponentKind::BasicClass);
        let base = LogicBombFinding {
            check: check.clone(),
            descriptor: check.descriptor.clone(),
            method: scene.method_name(id.method),
            class: unit.map(|u| u.qualified_name.clone()).unwrap_or_default(),
            package: unit.map(|u| u.package.clone()).unwrap_or_default(),
            line: scene.stmt(id).pos.line,
            guarded_count: sat.len(),
            guarded_stmts: sat.clone(),
            negative_region: other,
            sensitive_calls: Vec::new(),
            via_switch: None,
            nested,
            component,
            starting_component: starting_component(scene, cg, id.method).unwrap_or(component),
            formula_size: formula.size(),
            formula: formula.to_string(),
            partial: false,
        };

        let start = search.invokes(id.method, &sat);
        let direct = search.run(&start);
        if !direct.hits.is_empty() {
            let mut f = base.clone();
            f.sensitive_calls = search.calls(&direct.hits);
            if all_pols.len() > 1 {
                // ordered comparison: keep only the branches that reach a call
                let hit_pols: Vec<bool> = all_pols
                    .iter()
                    .copied()
                    .filter(|&p| {
                        let start = search.invokes(id.method, &region(preds, Literal::new(id, p)));
                        !search.run(&start).hits.is_empty()
                    })
                    .collect();
                let formula = finding_formula(&hit_pols);
                f.formula_size = formula.size();
                f.formula = formula.to_string();
            }
            f.partial = search.truncated;
            findings.push(f);
        }

        // boolean switches set under the check
        let mut written: BTreeSet<FieldRef> = boolean_writes(scene, sat.iter().map(|&n| StmtId::new(id.method, n)));
        written.extend(boolean_writes(scene, direct.visited.iter().flat_map(|&m| {
            icfg.cfg(m)
                .map(|c| c.nodes.iter().map(move |&n| StmtId::new(m, n)).collect::<Vec<_>>())
                .unwrap_or_default()
        })));
        let mut followed: BTreeSet<FieldRef> = BTreeSet::new();
        let mut switch_hits: BTreeMap<FieldRef, BTreeMap<String, Vec<StmtId>>> = BTreeMap::new();
        let mut frontier = written;
        for _ in 0..config.switch_depth {
            let mut next = BTreeSet::new();
            for field in frontier {
                if !followed.insert(field.clone()) {
                    continue;
                }
                for cond in conditions.values() {
                    if cond.id == id || !cond.fields().any(|f| *f == field) {
                        continue;
                    }
                    let Some(cp) = predicates.get(&cond.id.method) else { continue };
                    let mut reg: BTreeSet<usize> = BTreeSet::new();
                    reg.extend(region(cp, Literal::new(cond.id, true)));
                    reg.extend(region(cp, Literal::new(cond.id, false)));
                    let reg: Vec<usize> = reg.into_iter().collect();
                    let start = search.invokes(cond.id.method, &reg);
                    let res = search.run(&start);
                    let entry = switch_hits.entry(field.clone()).or_default();
                    for (sig, stack) in res.hits {
                        entry.entry(sig).or_insert(stack);
                    }
                    next.extend(boolean_writes(scene, reg.iter().map(|&n| StmtId::new(cond.id.method, n))));
                }
            }
            frontier = next;
        }
        for (field, hits) in switch_hits {
            if hits.is_empty() {
                continue;
            }
            let mut f = base.clone();
            f.sensitive_calls = search.calls(&hits);
            f.via_switch = Some(field.name.clone());
            f.partial = search.truncated;
            findings.push(f);
        }
        if search.deadline.expired() {
            search.truncated = true;
            break;
        }
    }
    Detection {
        findings,
        truncated: search.truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::pipeline::{detect, prepare, AnalysisConfig};

    const DIAMOND: &str = r#"
class a.M kind Activity {
  method onStart() {
    local t : long
    t = invoke java.lang.System.currentTimeMillis()
    if t == 42L goto Lhit
    invoke android.util.Log.d("miss")
    goto Ljoin
  Lhit: invoke java.lang.Runtime.exec("x")
  Ljoin: invoke java.io.File.delete()
    return
  }
}
"#;

    fn findings(src: &str, list: &SensitiveList) -> Vec<LogicBombFinding> {
        let config = AnalysisConfig::default();
        let prep = prepare(parse_program(src, "t").unwrap(), &config, &Deadline::none());
        detect(&prep, list, &config, &Deadline::none()).findings
    }

    #[test]
    fn only_the_satisfied_branch_is_guarded() {
        let f = findings(DIAMOND, &SensitiveList::large());
        assert_eq!(f.len(), 1);
        let sigs: Vec<&str> = f[0].sensitive_calls.iter().map(|c| c.signature.as_str()).collect();
        // the join point is reached either way and the else branch is not guarded
        assert_eq!(sigs, ["java.lang.Runtime.exec"]);
        assert_eq!(f[0].guarded_count, 1);
        assert_eq!(f[0].negative_region.len(), 2);
        assert_eq!(f[0].formula, "c1");
    }

    #[test]
    fn boolean_switch_links_check_to_distant_call() {
        let src = r#"
class a.R kind BroadcastReceiver {
  field on : boolean
  method onReceive(c: ref, i: ref) {
    local b : String
    local k : boolean
    b = invoke android.telephony.SmsMessage.getMessageBody(i)
    k = invoke java.lang.String.equals(b, "go")
    if k == false goto L
    @on = true
  L: return
  }
}
class a.S kind Service {
  method onStartCommand(i: ref, f: int, id: int) {
    local v : boolean
    v = @a.R.on
    if v == false goto L
    invoke java.lang.Runtime.exec("x")
  L: return 1
  }
}
"#;
        let f = findings(src, &SensitiveList::large());
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].via_switch.as_deref(), Some("on"));
        assert_eq!(f[0].sensitive_calls[0].stack.last().unwrap().callee, "java.lang.Runtime.exec");
        let config = AnalysisConfig::default();
        let prep = prepare(parse_program(src, "t").unwrap(), &config, &Deadline::none());
        let off = DetectConfig {
            switch_depth: 0,
            ..config.detect
        };
        let no_switch = AnalysisConfig { detect: off, ..config };
        assert!(detect(&prep, &SensitiveList::large(), &no_switch, &Deadline::none()).findings.is_empty());
    }

    #[test]
    fn smaller_lists_never_add_findings() {
        let full = SensitiveList::large();
        let fewer = full.without(&BTreeSet::from(["java.lang.Runtime.exec".to_string()]));
        assert_eq!(findings(DIAMOND, &full).len(), 1);
        assert!(findings(DIAMOND, &fewer).is_empty());
        assert!(findings(DIAMOND, &SensitiveList::from_entries("none", [])).is_empty());
    }

    #[test]
    fn lists_parse_prefix_entries() {
        let mut l = SensitiveList::parse("t", "# c\na.B.c\nx.Y.*\n");
        assert!(l.contains("a.B.c"));
        assert!(!l.contains("x.Y.z"));
        l.match_prefixes = true;
        assert!(l.contains("x.Y.z"));
        assert_eq!(l.items(), vec!["a.B.c".to_string(), "x.Y.*".to_string()]);
        assert!(!l.without(&BTreeSet::from(["x.Y.*".to_string()])).contains("x.Y.z"));
        let small = SensitiveList::small();
        assert!(small.entries().all(|e| SensitiveList::large().contains(e)));
    }
}
