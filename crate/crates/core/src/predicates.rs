//! Path predicates: edge annotation, recovery and boolean minimization.
//!
//! Each edge leaving a real (non-opaque) branch carries the branch literal;
//! every other edge is unconstrained. The predicate of a statement is the
//! disjunction over its incoming edges of the predecessor's predicate
//! conjoined with the edge literal, rooted at `True` on the method entry.
//!
//! Cycles are handled in two passes. A pass over the acyclic part (edges to
//! nodes still on the DFS stack contribute `False`) yields the unminimized
//! formula. Minimized formulas are then iterated to the least fixpoint over
//! every edge, which equals the disjunction over acyclic entry paths since
//! every cyclic walk implies the acyclic path it contains.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deadline::Deadline;
use crate::graphs::{Cfg, EdgeKind};
use crate::ir::StmtId;

pub use crate::symex::AtomicCondition;

pub const DEFAULT_ATOM_CAP: usize = 16;
pub const DEFAULT_FORMULA_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Literal {
    pub atom: StmtId,
    pub positive: bool,
}

impl Literal {
    pub fn new(atom: StmtId, positive: bool) -> Self {
        Literal { atom, positive }
    }

    pub fn negate(self) -> Self {
        Literal {
            atom: self.atom,
            positive: !self.positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Formula {
    True,
    False,
    Atom(Literal),
    And(Vec<Formula>),
    Or(Vec<Formula>),
}

impl Formula {
    pub fn lit(atom: StmtId, positive: bool) -> Self {
        Formula::Atom(Literal::new(atom, positive))
    }

    pub fn and(parts: impl IntoIterator<Item = Formula>) -> Formula {
        Self::nary(true, false, parts)
    }

    pub fn or(parts: impl IntoIterator<Item = Formula>) -> Formula {
        Self::nary(false, false, parts)
    }

    /// Builds a flattened, deduplicated, sorted n-ary node applying the
    /// identity, annihilation and idempotence laws, and complementation on
    /// request.
    fn nary(conj: bool, complement: bool, parts: impl IntoIterator<Item = Formula>) -> Formula {
        let (unit, zero) = if conj {
            (Formula::True, Formula::False)
        } else {
            (Formula::False, Formula::True)
        };
        let mut kids = BTreeSet::new();
        for p in parts {
            match p {
                f if f == unit => {}
                f if f == zero => return zero,
                Formula::And(v) if conj => kids.extend(v),
                Formula::Or(v) if !conj => kids.extend(v),
                f => {
                    kids.insert(f);
                }
            }
        }
        let lits: HashSet<Literal> = kids
            .iter()
            .filter_map(|k| match k {
                Formula::Atom(l) => Some(*l),
                _ => None,
            })
            .collect();
        if complement && lits.iter().any(|l| lits.contains(&l.negate())) {
            return zero;
        }
        match kids.len() {
            0 => unit,
            1 => kids.into_iter().next().unwrap(),
            _ if conj => Formula::And(kids.into_iter().collect()),
            _ => Formula::Or(kids.into_iter().collect()),
        }
    }

    pub fn not(&self) -> Formula {
        match self {
            Formula::True => Formula::False,
            Formula::False => Formula::True,
            Formula::Atom(l) => Formula::Atom(l.negate()),
            Formula::And(v) => Formula::or(v.iter().map(Formula::not)),
            Formula::Or(v) => Formula::and(v.iter().map(Formula::not)),
        }
    }

    pub fn atoms(&self) -> BTreeSet<StmtId> {
        let mut out = BTreeSet::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms(&self, out: &mut BTreeSet<StmtId>) {
        match self {
            Formula::Atom(l) => {
                out.insert(l.atom);
            }
            Formula::And(v) | Formula::Or(v) => v.iter().for_each(|f| f.collect_atoms(out)),
            _ => {}
        }
    }

    pub fn literals(&self) -> BTreeSet<Literal> {
        let mut out = BTreeSet::new();
        self.visit_literals(&mut |l| {
            out.insert(l);
        });
        out
    }

    fn visit_literals(&self, f: &mut impl FnMut(Literal)) {
        match self {
            Formula::Atom(l) => f(*l),
            Formula::And(v) | Formula::Or(v) => v.iter().for_each(|x| x.visit_literals(f)),
            _ => {}
        }
    }

    pub fn contains_atom(&self, atom: StmtId) -> bool {
        let mut hit = false;
        self.visit_literals(&mut |l| hit |= l.atom == atom);
        hit
    }

    /// Number of atom occurrences.
    pub fn size(&self) -> usize {
        match self {
            Formula::True | Formula::False => 0,
            Formula::Atom(_) => 1,
            Formula::And(v) | Formula::Or(v) => v.iter().map(Formula::size).sum(),
        }
    }

    /// Number of nodes in the tree.
    pub fn node_count(&self) -> usize {
        match self {
            Formula::And(v) | Formula::Or(v) => 1 + v.iter().map(Formula::node_count).sum::<usize>(),
            _ => 1,
        }
    }

    pub fn eval(&self, value: &impl Fn(StmtId) -> bool) -> bool {
        match self {
            Formula::True => true,
            Formula::False => false,
            Formula::Atom(l) => value(l.atom) == l.positive,
            Formula::And(v) => v.iter().all(|f| f.eval(value)),
            Formula::Or(v) => v.iter().any(|f| f.eval(value)),
        }
    }

    /// Renders with caller-supplied atom names.
    pub fn render(&self, name: &impl Fn(StmtId) -> String) -> String {
        match self {
            Formula::True => "true".into(),
            Formula::False => "false".into(),
            Formula::Atom(l) => format!("{}{}", if l.positive { "" } else { "!" }, name(l.atom)),
            Formula::And(v) | Formula::Or(v) => {
                let sep = if matches!(self, Formula::And(_)) { " & " } else { " | " };
                v.iter()
                    .map(|f| match f {
                        Formula::And(_) | Formula::Or(_) => format!("({})", f.render(name)),
                        _ => f.render(name),
                    })
                    .collect::<Vec<_>>()
                    .join(sep)
            }
        }
    }
}

impl fmt::Display for Formula {
    /// Atoms print as `c<index>`; formulas are intra-procedural so the
    /// statement index identifies the branch.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&|s| format!("c{}", s.index)))
    }
}

// ---------------------------------------------------------------------------
// Truth tables and minimization

/// Bit-parallel truth table over `atoms` (bit i of the row index is atom i).
pub fn truth_table(f: &Formula, atoms: &[StmtId]) -> Vec<u64> {
    let n = atoms.len();
    let rows = 1usize << n;
    let words = rows.div_ceil(64);
    let mask_last = if rows.is_multiple_of(64) { u64::MAX } else { (1u64 << (rows % 64)) - 1 };
    let column = |i: usize| -> Vec<u64> {
        (0..words)
            .map(|w| {
                let mut bits = 0u64;
                for b in 0..64 {
                    let row = w * 64 + b;
                    if row < rows && (row >> i) & 1 == 1 {
                        bits |= 1 << b;
                    }
                }
                bits
            })
            .collect()
    };
    let index: BTreeMap<StmtId, usize> = atoms.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let mut cols: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    fn go(
        f: &Formula,
        words: usize,
        index: &BTreeMap<StmtId, usize>,
        cols: &mut BTreeMap<usize, Vec<u64>>,
        column: &dyn Fn(usize) -> Vec<u64>,
    ) -> Vec<u64> {
        match f {
            Formula::True => vec![u64::MAX; words],
            Formula::False => vec![0; words],
            Formula::Atom(l) => {
                let i = index[&l.atom];
                let c = cols.entry(i).or_insert_with(|| column(i)).clone();
                if l.positive {
                    c
                } else {
                    c.into_iter().map(|w| !w).collect()
                }
            }
            Formula::And(v) => v.iter().fold(vec![u64::MAX; words], |acc, g| {
                let t = go(g, words, index, cols, column);
                acc.iter().zip(t).map(|(a, b)| a & b).collect()
            }),
            Formula::Or(v) => v.iter().fold(vec![0; words], |acc, g| {
                let t = go(g, words, index, cols, column);
                acc.iter().zip(t).map(|(a, b)| a | b).collect()
            }),
        }
    }
    let mut t = go(f, words, &index, &mut cols, &column);
    if let Some(last) = t.last_mut() {
        *last &= mask_last;
    }
    t
}

fn row_set(table: &[u64], row: usize) -> bool {
    (table[row / 64] >> (row % 64)) & 1 == 1
}

/// Truth-table equivalence over the union of both atom sets.
pub fn equivalent(a: &Formula, b: &Formula) -> bool {
    let atoms: Vec<StmtId> = a.atoms().union(&b.atoms()).copied().collect();
    truth_table(a, &atoms) == truth_table(b, &atoms)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minimized {
    pub formula: Formula,
    /// Only algebraic rewriting was applied (too many atoms).
    pub partial: bool,
}

/// A product term: `mask` bits are eliminated variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Cube {
    value: u32,
    mask: u32,
}

impl Cube {
    fn covers(self, row: u32) -> bool {
        row & !self.mask == self.value
    }

    fn literal_count(self, n: usize) -> u32 {
        n as u32 - self.mask.count_ones()
    }
}

const MAX_PRIMES: usize = 20_000;
const EXACT_COVER_LIMIT: usize = 24;

fn prime_implicants(minterms: &[u32], n: usize) -> Option<Vec<Cube>> {
    let mut current: BTreeSet<Cube> = minterms.iter().map(|&m| Cube { value: m, mask: 0 }).collect();
    let mut primes = Vec::new();
    while !current.is_empty() {
        let mut used: HashSet<Cube> = HashSet::new();
        let mut next: BTreeSet<Cube> = BTreeSet::new();
        for &c in &current {
            for b in 0..n {
                let bit = 1u32 << b;
                if c.mask & bit != 0 || c.value & bit != 0 {
                    continue;
                }
                let partner = Cube {
                    value: c.value | bit,
                    mask: c.mask,
                };
                if current.contains(&partner) {
                    used.insert(c);
                    used.insert(partner);
                    next.insert(Cube {
                        value: c.value,
                        mask: c.mask | bit,
                    });
                }
            }
        }
        primes.extend(current.iter().filter(|c| !used.contains(c)).copied());
        if primes.len() + next.len() > MAX_PRIMES {
            return None;
        }
        current = next;
    }
    Some(primes)
}

/// Chooses a cover: essential primes first, then an exact search over the
/// remainder when small, greedy otherwise.
fn select_cover(primes: &[Cube], minterms: &[u32], n: usize) -> Vec<Cube> {
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    for &m in minterms {
        let covering: Vec<usize> = (0..primes.len()).filter(|&i| primes[i].covers(m)).collect();
        if covering.len() == 1 {
            chosen.insert(covering[0]);
        }
    }
    let uncovered: Vec<u32> = minterms
        .iter()
        .copied()
        .filter(|&m| !chosen.iter().any(|&i| primes[i].covers(m)))
        .collect();
    if !uncovered.is_empty() {
        let candidates: Vec<usize> = (0..primes.len())
            .filter(|i| !chosen.contains(i) && uncovered.iter().any(|&m| primes[*i].covers(m)))
            .collect();
        if candidates.len() <= EXACT_COVER_LIMIT {
            let best = exact_cover(primes, &candidates, &uncovered, n);
            chosen.extend(best);
        } else {
            let mut left: BTreeSet<u32> = uncovered.into_iter().collect();
            while !left.is_empty() {
                let &best = candidates
                    .iter()
                    .max_by_key(|&&i| {
                        let gain = left.iter().filter(|&&m| primes[i].covers(m)).count();
                        (gain, std::cmp::Reverse(primes[i].literal_count(n)), std::cmp::Reverse(i))
                    })
                    .expect("every minterm has a covering prime");
                left.retain(|&m| !primes[best].covers(m));
                chosen.insert(best);
            }
        }
    }
    chosen.into_iter().map(|i| primes[i]).collect()
}

/// Smallest subset of `candidates` covering `rows`, by term count then
/// literal count.
fn exact_cover(primes: &[Cube], candidates: &[usize], rows: &[u32], n: usize) -> Vec<usize> {
    let masks: Vec<u64> = candidates
        .iter()
        .map(|&i| {
            rows.iter()
                .enumerate()
                .filter(|(_, &m)| primes[i].covers(m))
                .fold(0u64, |acc, (k, _)| acc | (1 << (k % 64)))
        })
        .collect();
    // rows beyond 64 would alias; fall back to checking coverage directly
    let covers_all = |sel: &[usize]| rows.iter().all(|&m| sel.iter().any(|&i| primes[i].covers(m)));
    let full: u64 = if rows.len() >= 64 { u64::MAX } else { (1u64 << rows.len()) - 1 };
    let mut best: Option<(usize, u32, Vec<usize>)> = None;
    let k = candidates.len();
    for size in 1..=k {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let cov = idx.iter().fold(0u64, |acc, &j| acc | masks[j]);
            if cov == full {
                let sel: Vec<usize> = idx.iter().map(|&j| candidates[j]).collect();
                if rows.len() < 64 || covers_all(&sel) {
                    let lits: u32 = sel.iter().map(|&i| primes[i].literal_count(n)).sum();
                    if best.as_ref().is_none_or(|b| lits < b.1) {
                        best = Some((size, lits, sel));
                    }
                }
            }
            // next combination
            let mut i = size;
            let mut advanced = false;
            while i > 0 {
                i -= 1;
                if idx[i] < k - size + i {
                    idx[i] += 1;
                    for j in i + 1..size {
                        idx[j] = idx[j - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
        if best.is_some() {
            break;
        }
    }
    best.map(|b| b.2).unwrap_or_else(|| candidates.to_vec())
}

fn cube_formula(c: Cube, atoms: &[StmtId]) -> Formula {
    Formula::and(
        atoms
            .iter()
            .enumerate()
            .filter(|(i, _)| c.mask & (1 << i) == 0)
            .map(|(i, a)| Formula::lit(*a, c.value & (1 << i) != 0)),
    )
}

/// Algebraic simplification only: the constructor laws plus absorption.
pub fn simplify_algebraic(f: &Formula) -> Formula {
    match f {
        Formula::And(v) => Formula::nary(true, true, v.iter().map(simplify_algebraic)),
        Formula::Or(v) => {
            let kids: Vec<Formula> = match Formula::nary(false, true, v.iter().map(simplify_algebraic)) {
                Formula::Or(k) => k,
                other => return other,
            };
            let term_lits = |k: &Formula| -> Option<BTreeSet<Literal>> {
                match k {
                    Formula::Atom(l) => Some(BTreeSet::from([*l])),
                    Formula::And(xs) => xs
                        .iter()
                        .map(|x| match x {
                            Formula::Atom(l) => Some(*l),
                            _ => None,
                        })
                        .collect(),
                    _ => None,
                }
            };
            let sets: Vec<Option<BTreeSet<Literal>>> = kids.iter().map(term_lits).collect();
            let kept = kids.iter().enumerate().filter(|(i, _)| {
                let Some(mine) = &sets[*i] else { return true };
                !sets.iter().enumerate().any(|(j, other)| {
                    j != *i
                        && other
                            .as_ref()
                            .is_some_and(|o| o.is_subset(mine) && (o != mine || j < *i))
                })
            });
            Formula::nary(false, true, kept.map(|(_, k)| k.clone()))
        }
        other => other.clone(),
    }
}

/// Two-level minimization. Exact (Quine–McCluskey) within `atom_cap`
/// atoms, algebraic rewriting above it.
pub fn minimize(f: &Formula, atom_cap: usize) -> Minimized {
    let atoms: Vec<StmtId> = f.atoms().into_iter().collect();
    let n = atoms.len();
    if n == 0 {
        let v = f.eval(&|_| false);
        return Minimized {
            formula: if v { Formula::True } else { Formula::False },
            partial: false,
        };
    }
    if n > atom_cap || n > 31 {
        return Minimized {
            formula: simplify_algebraic(f),
            partial: true,
        };
    }
    let table = truth_table(f, &atoms);
    let rows = 1usize << n;
    let minterms: Vec<u32> = (0..rows).filter(|&r| row_set(&table, r)).map(|r| r as u32).collect();
    if minterms.is_empty() {
        return Minimized {
            formula: Formula::False,
            partial: false,
        };
    }
    if minterms.len() == rows {
        return Minimized {
            formula: Formula::True,
            partial: false,
        };
    }
    let Some(primes) = prime_implicants(&minterms, n) else {
        return Minimized {
            formula: simplify_algebraic(f),
            partial: true,
        };
    };
    let cover = select_cover(&primes, &minterms, n);
    Minimized {
        formula: Formula::or(cover.into_iter().map(|c| cube_formula(c, &atoms))),
        partial: false,
    }
}

// ---------------------------------------------------------------------------
// Recovery

/// Literal carried by each CFG edge (by edge index); `None` is unconstrained.
pub fn annotate_edges(cfg: &Cfg, conditions: &BTreeSet<StmtId>) -> Vec<Option<Literal>> {
    cfg.edges
        .iter()
        .map(|e| {
            let id = StmtId::new(cfg.method, e.from);
            if !conditions.contains(&id) {
                return None;
            }
            match e.kind {
                EdgeKind::True => Some(Literal::new(id, true)),
                EdgeKind::False => Some(Literal::new(id, false)),
                _ => None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub atom_cap: usize,
    pub formula_cap: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            atom_cap: DEFAULT_ATOM_CAP,
            formula_cap: DEFAULT_FORMULA_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("formula for statement {stmt} exceeds {cap} nodes")]
pub struct FormulaBudgetExceeded {
    pub stmt: usize,
    pub cap: usize,
}

/// Path predicates of one method, keyed by statement index.
#[derive(Debug, Clone, Default)]
pub struct MethodPredicates {
    pub annotations: Vec<Option<Literal>>,
    /// Unminimized formula over paths without retreating edges (all acyclic
    /// paths when the graph is reducible); absent when over budget.
    pub raw: BTreeMap<usize, Formula>,
    pub minimized: BTreeMap<usize, Formula>,
    /// Statements whose predicate could not be computed within budget.
    pub unknown: BTreeSet<usize>,
    /// Statements whose predicate exceeded the atom cap.
    pub partial: BTreeSet<usize>,
    pub truncated: bool,
}

impl MethodPredicates {
    pub fn formula(&self, stmt: usize) -> Option<&Formula> {
        self.minimized.get(&stmt)
    }
}

/// DFS classification of retreating edges (target on the stack).
fn retreating_edges(cfg: &Cfg) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let Some(entry) = cfg.entry else { return out };
    let mut state: BTreeMap<usize, u8> = BTreeMap::new(); // 1 on stack, 2 done
    let mut stack = vec![(entry, 0usize)];
    state.insert(entry, 1);
    while let Some((node, pos)) = stack.pop() {
        let outs = cfg.out_edges(node);
        if pos < outs.len() {
            stack.push((node, pos + 1));
            let e = outs[pos];
            let to = cfg.edges[e].to;
            match state.get(&to) {
                Some(1) => {
                    out.insert(e);
                }
                Some(_) => {}
                None => {
                    state.insert(to, 1);
                    stack.push((to, 0));
                }
            }
        } else {
            state.insert(node, 2);
        }
    }
    out
}

fn edge_term(pred: &Formula, lit: Option<Literal>) -> Formula {
    match lit {
        Some(l) => Formula::and([pred.clone(), Formula::Atom(l)]),
        None => pred.clone(),
    }
}

/// Like [`edge_term`] but distributes the literal over a disjunction, so
/// unminimized predicates stay in sum-of-products form.
fn raw_edge_term(pred: &Formula, lit: Option<Literal>) -> Formula {
    match (pred, lit) {
        (Formula::Or(kids), Some(l)) => {
            Formula::or(kids.iter().map(|k| Formula::and([k.clone(), Formula::Atom(l)])))
        }
        _ => edge_term(pred, lit),
    }
}

/// Unminimized predicate of a single statement over acyclic paths.
pub fn recover_path_predicate(
    cfg: &Cfg,
    annotations: &[Option<Literal>],
    stmt: usize,
    formula_cap: usize,
) -> Result<Formula, FormulaBudgetExceeded> {
    let back = retreating_edges(cfg);
    let mut memo: BTreeMap<usize, Formula> = BTreeMap::new();
    for n in cfg.reverse_postorder() {
        let f = if Some(n) == cfg.entry {
            Formula::True
        } else {
            Formula::or(
                cfg.in_edges(n)
                    .iter()
                    .filter(|e| !back.contains(e))
                    .filter_map(|&e| memo.get(&cfg.edges[e].from).map(|p| raw_edge_term(p, annotations[e]))),
            )
        };
        if f.node_count() > formula_cap {
            return Err(FormulaBudgetExceeded { stmt: n, cap: formula_cap });
        }
        if n == stmt {
            return Ok(f);
        }
        memo.insert(n, f);
    }
    Ok(Formula::False)
}

/// Predicates for every statement of the method.
pub fn recover_path_predicates(
    cfg: &Cfg,
    annotations: &[Option<Literal>],
    caps: Caps,
    deadline: &Deadline,
) -> MethodPredicates {
    let mut out = MethodPredicates {
        annotations: annotations.to_vec(),
        ..Default::default()
    };
    let Some(entry) = cfg.entry else { return out };
    let rpo = cfg.reverse_postorder();
    let back = retreating_edges(cfg);

    // acyclic pass: raw and initial minimized formulas
    let mut raw_over = BTreeSet::new();
    for &n in &rpo {
        if deadline.expired() {
            out.truncated = true;
            return out;
        }
        let incoming: Vec<usize> = cfg.in_edges(n).iter().copied().filter(|e| !back.contains(e)).collect();
        let preds_unknown = incoming.iter().any(|&e| out.unknown.contains(&cfg.edges[e].from));
        if n == entry {
            out.raw.insert(n, Formula::True);
            out.minimized.insert(n, Formula::True);
            continue;
        }
        if !incoming.iter().any(|&e| raw_over.contains(&cfg.edges[e].from)) {
            let raw = Formula::or(
                incoming
                    .iter()
                    .filter_map(|&e| out.raw.get(&cfg.edges[e].from).map(|p| raw_edge_term(p, annotations[e]))),
            );
            if raw.node_count() <= caps.formula_cap {
                out.raw.insert(n, raw);
            } else {
                raw_over.insert(n);
            }
        } else {
            raw_over.insert(n);
        }
        if preds_unknown {
            out.unknown.insert(n);
            continue;
        }
        let built = Formula::or(incoming.iter().filter_map(|&e| {
            out.minimized.get(&cfg.edges[e].from).map(|p| edge_term(p, annotations[e]))
        }));
        if built.node_count() > caps.formula_cap {
            out.unknown.insert(n);
            continue;
        }
        let m = minimize(&built, caps.atom_cap);
        if m.partial {
            out.partial.insert(n);
        }
        out.minimized.insert(n, m.formula);
    }

    // least fixpoint over all edges
    if !back.is_empty() {
        let limit = 2 * rpo.len() + 8;
        for _ in 0..limit {
            let mut moved = false;
            for &n in &rpo {
                if n == entry || out.unknown.contains(&n) {
                    continue;
                }
                if deadline.expired() {
                    out.truncated = true;
                    return out;
                }
                let incoming = cfg.in_edges(n);
                if incoming.iter().any(|&e| out.unknown.contains(&cfg.edges[e].from)) {
                    out.unknown.insert(n);
                    out.minimized.remove(&n);
                    moved = true;
                    continue;
                }
                let built = Formula::or(incoming.iter().filter_map(|&e| {
                    out.minimized.get(&cfg.edges[e].from).map(|p| edge_term(p, annotations[e]))
                }));
                if built.node_count() > caps.formula_cap {
                    out.unknown.insert(n);
                    out.minimized.remove(&n);
                    moved = true;
                    continue;
                }
                let m = minimize(&built, caps.atom_cap);
                if m.partial {
                    out.partial.insert(n);
                }
                let old = out.minimized.get(&n);
                if old.is_none_or(|o| !equivalent(o, &m.formula)) {
                    out.minimized.insert(n, m.formula);
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    }
    out
}
