//! Intraprocedural CFGs, CHA/RTA call graphs and the interprocedural CFG.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ir::{Callee, MethodDef, MethodId, StmtId, StmtKind};
use crate::model::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    /// Sequential flow out of a non-branching statement.
    Next,
    /// Unconditional `goto`.
    Jump,
    /// Taken branch of an `if`.
    True,
    /// Fall-through branch of an `if`.
    False,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CfgEdge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

/// Control-flow graph of one method over statement indices.
///
/// The entry is always statement 0. Statement 0 may still be the target of a
/// loop back edge; predicate recovery treats the entry as unconditional.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub method: MethodId,
    /// Statements reachable from the entry, ascending.
    pub nodes: Vec<usize>,
    pub edges: Vec<CfgEdge>,
    pub entry: Option<usize>,
    pub exits: Vec<usize>,
    succ: BTreeMap<usize, Vec<usize>>,
    pred: BTreeMap<usize, Vec<usize>>,
}

impl Cfg {
    /// Indices into `edges` leaving `node`.
    pub fn out_edges(&self, node: usize) -> &[usize] {
        self.succ.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Indices into `edges` entering `node`.
    pub fn in_edges(&self, node: usize) -> &[usize] {
        self.pred.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn successors(&self, node: usize) -> Vec<usize> {
        self.out_edges(node).iter().map(|&e| self.edges[e].to).collect()
    }

    pub fn predecessors(&self, node: usize) -> Vec<usize> {
        self.in_edges(node).iter().map(|&e| self.edges[e].from).collect()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }

    /// Reverse postorder from the entry.
    pub fn reverse_postorder(&self) -> Vec<usize> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut visited = BTreeSet::new();
        let mut post = Vec::with_capacity(self.nodes.len());
        // iterative DFS: (node, next successor position)
        let mut stack = vec![(entry, 0usize)];
        visited.insert(entry);
        while let Some((node, pos)) = stack.pop() {
            let outs = self.out_edges(node);
            if pos < outs.len() {
                stack.push((node, pos + 1));
                let next = self.edges[outs[pos]].to;
                if visited.insert(next) {
                    stack.push((next, 0));
                }
            } else {
                post.push(node);
            }
        }
        post.reverse();
        post
    }
}

fn successors_of(body: &MethodDef, i: usize) -> Vec<(usize, EdgeKind)> {
    let next = (i + 1 < body.body.len()).then_some(i + 1);
    match &body.body[i].kind {
        StmtKind::IfGoto { target, .. } => {
            let mut v = vec![(target.index, EdgeKind::True)];
            v.extend(next.map(|n| (n, EdgeKind::False)));
            v
        }
        StmtKind::Goto(t) => vec![(t.index, EdgeKind::Jump)],
        StmtKind::Return(_) => vec![],
        _ => next.map(|n| vec![(n, EdgeKind::Next)]).unwrap_or_default(),
    }
}

pub fn build_cfg(method: MethodId, def: &MethodDef) -> Cfg {
    let mut cfg = Cfg {
        method,
        nodes: Vec::new(),
        edges: Vec::new(),
        entry: None,
        exits: Vec::new(),
        succ: BTreeMap::new(),
        pred: BTreeMap::new(),
    };
    if def.body.is_empty() {
        return cfg;
    }
    cfg.entry = Some(0);
    let mut seen = BTreeSet::from([0usize]);
    let mut queue = VecDeque::from([0usize]);
    while let Some(n) = queue.pop_front() {
        for (to, _) in successors_of(def, n) {
            if seen.insert(to) {
                queue.push_back(to);
            }
        }
    }
    cfg.nodes = seen.into_iter().collect();
    for &n in &cfg.nodes {
        let succ = successors_of(def, n);
        let terminal = match &def.body[n].kind {
            StmtKind::Return(_) => true,
            StmtKind::IfGoto { .. } | StmtKind::Goto(_) => false,
            _ => succ.is_empty(),
        };
        if terminal {
            cfg.exits.push(n);
        }
        for (to, kind) in succ {
            let idx = cfg.edges.len();
            cfg.edges.push(CfgEdge { from: n, to, kind });
            cfg.succ.entry(n).or_default().push(idx);
            cfg.pred.entry(to).or_default().push(idx);
        }
    }
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallGraphAlgorithm {
    Cha,
    Rta,
}

impl CallGraphAlgorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            CallGraphAlgorithm::Cha => "cha",
            CallGraphAlgorithm::Rta => "rta",
        }
    }
}

impl FromStr for CallGraphAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cha" => Ok(CallGraphAlgorithm::Cha),
            "rta" => Ok(CallGraphAlgorithm::Rta),
            other => Err(format!("unsupported call-graph algorithm `{other}` (expected cha or rta)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallGraph {
    pub algorithm: CallGraphAlgorithm,
    /// Invoke site to target methods. Sites with no internal target are absent.
    pub edges: BTreeMap<StmtId, BTreeSet<MethodId>>,
    /// Methods reachable from the dummy main.
    pub reachable: BTreeSet<MethodId>,
    /// Declared units considered instantiated (RTA only; empty under CHA).
    pub instantiated: BTreeSet<usize>,
}

impl CallGraph {
    pub fn targets(&self, site: StmtId) -> impl Iterator<Item = MethodId> + '_ {
        self.edges.get(&site).into_iter().flatten().copied()
    }

    /// Flattened (site, target) pairs.
    pub fn edge_pairs(&self) -> BTreeSet<(StmtId, MethodId)> {
        self.edges
            .iter()
            .flat_map(|(s, ts)| ts.iter().map(move |t| (*s, *t)))
            .collect()
    }

    /// Callers map: callee to the invoke sites targeting it.
    pub fn callers(&self) -> BTreeMap<MethodId, Vec<StmtId>> {
        let mut out: BTreeMap<MethodId, Vec<StmtId>> = BTreeMap::new();
        for (site, ts) in &self.edges {
            for t in ts {
                out.entry(*t).or_default().push(*site);
            }
        }
        out
    }
}

pub fn build_call_graph(scene: &Scene<'_>, algorithm: CallGraphAlgorithm) -> CallGraph {
    let mut instantiated: BTreeSet<usize> = match algorithm {
        CallGraphAlgorithm::Cha => BTreeSet::new(),
        CallGraphAlgorithm::Rta => scene
            .program
            .units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.kind.is_component())
            .map(|(i, _)| i)
            .collect(),
    };
    let cfgs: BTreeMap<MethodId, Cfg> = scene
        .method_ids()
        .into_iter()
        .map(|id| (id, build_cfg(id, scene.method(id))))
        .collect();

    let mut edges: BTreeMap<StmtId, BTreeSet<MethodId>> = BTreeMap::new();
    let mut reachable = BTreeSet::from([MethodId::DummyMain]);
    loop {
        let before = (reachable.len(), instantiated.len(), edges.values().map(BTreeSet::len).sum::<usize>());
        let mut worklist: VecDeque<MethodId> = reachable.iter().copied().collect();
        let mut processed = BTreeSet::new();
        while let Some(m) = worklist.pop_front() {
            if !processed.insert(m) {
                continue;
            }
            for &n in &cfgs[&m].nodes {
                let site = StmtId::new(m, n);
                let Some(Callee::Internal {
                    class,
                    method,
                    is_static,
                    dispatch,
                }) = scene.callee(site)
                else {
                    continue;
                };
                if method == "<init>" && algorithm == CallGraphAlgorithm::Rta {
                    if let Some(u) = scene.hierarchy.unit_index(class) {
                        instantiated.insert(u);
                    }
                }
                let chosen = dispatch.iter().filter(|(recv, _)| {
                    algorithm == CallGraphAlgorithm::Cha
                        || *is_static
                        || method == "<init>"
                        || instantiated.contains(recv)
                });
                for &(_, target) in chosen {
                    edges.entry(site).or_default().insert(target);
                    if reachable.insert(target) || !processed.contains(&target) {
                        worklist.push_back(target);
                    }
                }
            }
        }
        let after = (reachable.len(), instantiated.len(), edges.values().map(BTreeSet::len).sum::<usize>());
        if before == after {
            break;
        }
    }
    CallGraph {
        algorithm,
        edges,
        reachable,
        instantiated,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IcfgEdgeKind {
    Intra(EdgeKind),
    Call,
    Return,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IcfgEdge {
    pub from: StmtId,
    pub to: StmtId,
    pub kind: IcfgEdgeKind,
}

/// Interprocedural CFG restricted to what the dummy main reaches.
#[derive(Debug, Clone)]
pub struct Icfg {
    /// Reachable instructions.
    pub instructions: BTreeSet<StmtId>,
    /// Reachable edges (intra, call and return).
    pub edges: BTreeSet<IcfgEdge>,
    /// Reachable branch statements that are not opaque predicates.
    pub conditions: BTreeSet<StmtId>,
    pub cfgs: BTreeMap<MethodId, Cfg>,
    pred: BTreeMap<StmtId, Vec<StmtId>>,
}

impl Icfg {
    /// The predecessor function over reachable edges.
    pub fn predecessors(&self, i: StmtId) -> &[StmtId] {
        self.pred.get(&i).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn cfg(&self, m: MethodId) -> Option<&Cfg> {
        self.cfgs.get(&m)
    }

    pub fn methods(&self) -> impl Iterator<Item = MethodId> + '_ {
        self.cfgs.keys().copied()
    }

    /// DOT rendering for debugging.
    pub fn to_dot(&self, scene: &Scene<'_>) -> String {
        let mut out = String::from("digraph icfg {\n  node [shape=box, fontname=monospace];\n");
        let name = |s: &StmtId| format!("\"{}#{}\"", scene.method_name(s.method), s.index);
        for m in self.methods() {
            let _ = writeln!(out, "  subgraph \"cluster_{}\" {{", scene.method_name(m));
            let _ = writeln!(out, "    label=\"{}\";", scene.method_name(m));
            for &n in &self.cfgs[&m].nodes {
                let id = StmtId::new(m, n);
                let text = scene.stmt(id).kind.to_string().replace('\\', "\\\\").replace('"', "\\\"");
                let style = if self.conditions.contains(&id) {
                    ", style=bold"
                } else if scene.entry.is_opaque(id) {
                    ", style=dashed"
                } else {
                    ""
                };
                let _ = writeln!(out, "    {} [label=\"{}: {}\"{}];", name(&id), n, text, style);
            }
            out.push_str("  }\n");
        }
        for e in &self.edges {
            let label = match e.kind {
                IcfgEdgeKind::Intra(EdgeKind::True) => " [label=T]",
                IcfgEdgeKind::Intra(EdgeKind::False) => " [label=F]",
                IcfgEdgeKind::Intra(_) => "",
                IcfgEdgeKind::Call => " [style=dashed, label=call]",
                IcfgEdgeKind::Return => " [style=dotted, label=ret]",
            };
            let _ = writeln!(out, "  {} -> {}{};", name(&e.from), name(&e.to), label);
        }
        out.push_str("}\n");
        out
    }
}

pub fn build_icfg(scene: &Scene<'_>, callgraph: &CallGraph) -> Icfg {
    let cfgs: BTreeMap<MethodId, Cfg> = callgraph
        .reachable
        .iter()
        .map(|&m| (m, build_cfg(m, scene.method(m))))
        .collect();
    let mut instructions = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut conditions = BTreeSet::new();
    for (&m, cfg) in &cfgs {
        for &n in &cfg.nodes {
            let id = StmtId::new(m, n);
            instructions.insert(id);
            if scene.stmt(id).is_branch() && !scene.entry.is_opaque(id) {
                conditions.insert(id);
            }
        }
        for e in &cfg.edges {
            edges.insert(IcfgEdge {
                from: StmtId::new(m, e.from),
                to: StmtId::new(m, e.to),
                kind: IcfgEdgeKind::Intra(e.kind),
            });
        }
    }
    for (site, targets) in &callgraph.edges {
        let Some(caller) = cfgs.get(&site.method) else {
            continue;
        };
        if !caller.contains(site.index) {
            continue;
        }
        let return_to: Vec<usize> = caller.successors(site.index);
        for t in targets {
            let callee = &cfgs[t];
            let Some(entry) = callee.entry else {
                continue;
            };
            edges.insert(IcfgEdge {
                from: *site,
                to: StmtId::new(*t, entry),
                kind: IcfgEdgeKind::Call,
            });
            for &x in &callee.exits {
                for &r in &return_to {
                    edges.insert(IcfgEdge {
                        from: StmtId::new(*t, x),
                        to: StmtId::new(site.method, r),
                        kind: IcfgEdgeKind::Return,
                    });
                }
            }
        }
    }
    let mut pred: BTreeMap<StmtId, Vec<StmtId>> = BTreeMap::new();
    for e in &edges {
        pred.entry(e.to).or_default().push(e.from);
    }
    Icfg {
        instructions,
        edges,
        conditions,
        cfgs,
        pred,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn single_method(body: &str) -> MethodDef {
        let src = format!(
            "class t.T kind BasicClass {{\n  method m(p: int, q: int) {{\n    local x : int\n{body}  }}\n}}\n"
        );
        parse_program(&src, "t").unwrap().units[0].methods[0].clone()
    }

    #[test]
    fn straight_line_is_a_path() {
        let m = single_method("    x = 1\n    x = 2\n    return\n");
        let cfg = build_cfg(MethodId::declared(0, 0), &m);
        assert_eq!(cfg.nodes, vec![0, 1, 2]);
        let pairs: Vec<(usize, usize)> = cfg.edges.iter().map(|e| (e.from, e.to)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(cfg.exits, vec![2]);
    }

    #[test]
    fn diamond_has_four_nodes_and_two_way_branch() {
        let m = single_method(
            "    if p == 0 goto Lelse\n    x = 1\n    goto Ljoin\n  Lelse: x = 2\n  Ljoin: return\n",
        );
        let cfg = build_cfg(MethodId::declared(0, 0), &m);
        assert_eq!(cfg.nodes.len(), 5);
        assert_eq!(cfg.successors(0), vec![3, 1]);
        assert_eq!(cfg.successors(2), vec![4]);
        assert_eq!(cfg.predecessors(4), vec![2, 3]);
        for n in &cfg.nodes {
            let s = &m.body[*n];
            let expected = match s.kind {
                StmtKind::IfGoto { .. } => 2,
                StmtKind::Goto(_) => 1,
                StmtKind::Return(_) => 0,
                _ => 1,
            };
            assert_eq!(cfg.successors(*n).len(), expected);
        }
    }

    #[test]
    fn unreachable_statements_are_excluded() {
        let m = single_method("    return\n    x = 1\n    return\n");
        let cfg = build_cfg(MethodId::declared(0, 0), &m);
        assert_eq!(cfg.nodes, vec![0]);
    }

    #[test]
    fn reverse_postorder_puts_loop_header_before_body() {
        let m = single_method(
            "    x = 0\n  Lh: if x >= 3 goto Lout\n    x = x + 1\n    goto Lh\n  Lout: return\n",
        );
        let cfg = build_cfg(MethodId::declared(0, 0), &m);
        let rpo = cfg.reverse_postorder();
        assert_eq!(rpo[0], 0);
        let pos = |n| rpo.iter().position(|&x| x == n).unwrap();
        assert!(pos(1) < pos(2));
        assert!(pos(2) < pos(3));
    }

    const POLY: &str = r#"
class p.Base kind BasicClass {
  abstract method run()
}
class p.A kind BasicClass extends p.Base {
  method run() {
    return
  }
}
class p.B kind BasicClass extends p.Base {
  method run() {
    invoke android.telephony.SmsManager.sendTextMessage(this)
    return
  }
}
class p.Main kind Activity {
  method onCreate(b: ref, x: p.Base) {
    local o : p.A
    o = invoke p.A.<init>()
    invoke p.Base.run(x)
    return
  }
}
"#;

    #[test]
    fn rta_prunes_uninstantiated_overrides() {
        let p = parse_program(POLY, "poly").unwrap();
        let scene = Scene::new(&p);
        let cha = build_call_graph(&scene, CallGraphAlgorithm::Cha);
        let rta = build_call_graph(&scene, CallGraphAlgorithm::Rta);
        let b_run = MethodId::declared(2, 0);
        let a_run = MethodId::declared(1, 0);
        assert!(cha.reachable.contains(&b_run));
        assert!(cha.reachable.contains(&a_run));
        assert!(!rta.reachable.contains(&b_run));
        assert!(rta.reachable.contains(&a_run));
        assert!(rta.edge_pairs().is_subset(&cha.edge_pairs()));
    }

    #[test]
    fn icfg_links_calls_and_returns() {
        let p = parse_program(POLY, "poly").unwrap();
        let scene = Scene::new(&p);
        let cg = build_call_graph(&scene, CallGraphAlgorithm::Cha);
        let icfg = build_icfg(&scene, &cg);
        let calls = icfg.edges.iter().filter(|e| e.kind == IcfgEdgeKind::Call).count();
        let rets = icfg.edges.iter().filter(|e| e.kind == IcfgEdgeKind::Return).count();
        // dummy main -> onCreate, Base.run -> {A.run, B.run}
        assert_eq!(calls, 3);
        assert_eq!(rets, 3);
        assert!(icfg.conditions.is_empty());
        for e in &icfg.edges {
            assert!(icfg.instructions.contains(&e.from) && icfg.instructions.contains(&e.to));
            assert!(icfg.predecessors(e.to).contains(&e.from));
        }
        assert!(icfg.to_dot(&scene).starts_with("digraph icfg"));
    }
}
