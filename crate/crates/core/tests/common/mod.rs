//! Oracles and generators shared by the integration tests. No oracle here
//! calls the code it checks: reachability replaces predicate recovery,
//! brute-force evaluation replaces minimization, and plain sums replace the
//! correlation code.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use trigscan::deadline::Deadline;
use trigscan::graphs::build_cfg;
use trigscan::ir::{parse_program, MethodId, StmtId};
use trigscan::predicates::{annotate_edges, equivalent, recover_path_predicates, Caps, Formula};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn atom(i: usize) -> StmtId {
    StmtId::new(MethodId::declared(0, 0), i)
}

/// Random formula over atoms `0..atoms`.
pub fn random_formula(rng: &mut ChaCha8Rng, atoms: usize, depth: usize) -> Formula {
    if depth == 0 || rng.gen_bool(0.3) {
        return match rng.gen_range(0..20) {
            0 => Formula::True,
            1 => Formula::False,
            _ => Formula::lit(atom(rng.gen_range(0..atoms)), rng.gen_bool(0.5)),
        };
    }
    let n = rng.gen_range(2..=3);
    let kids: Vec<Formula> = (0..n).map(|_| random_formula(rng, atoms, depth - 1)).collect();
    let f = if rng.gen_bool(0.5) { Formula::and(kids) } else { Formula::or(kids) };
    if rng.gen_bool(0.2) {
        f.not()
    } else {
        f
    }
}

/// Evaluates `f` under assignment bits (bit `i` is atom `i`).
pub fn eval_bits(f: &Formula, bits: u32) -> bool {
    f.eval(&|a: StmtId| bits >> a.index & 1 == 1)
}

pub fn same_function(a: &Formula, b: &Formula, atoms: usize) -> bool {
    (0..1u32 << atoms).all(|bits| eval_bits(a, bits) == eval_bits(b, bits))
}

/// Atom `i` matters to `f` when flipping it changes the value somewhere.
pub fn is_essential(f: &Formula, i: usize, atoms: usize) -> bool {
    (0..1u32 << atoms).any(|bits| eval_bits(f, bits) != eval_bits(f, bits ^ (1 << i)))
}

/// A generated method body: one statement per node, the last a return.
#[derive(Debug, Clone)]
pub enum Node {
    Plain,
    Goto(usize),
    /// Branch on its own atom; jumps to the target when true.
    If(usize),
    Return,
}

#[derive(Debug, Clone)]
pub struct GenCfg {
    pub nodes: Vec<Node>,
}

impl GenCfg {
    pub fn random(rng: &mut ChaCha8Rng, max_nodes: usize) -> Self {
        let n = rng.gen_range(2..=max_nodes);
        let mut nodes: Vec<Node> = (0..n - 1)
            .map(|_| match rng.gen_range(0..10) {
                0..=4 => Node::If(rng.gen_range(0..n)),
                5..=6 => Node::Goto(rng.gen_range(0..n)),
                7 => Node::Return,
                _ => Node::Plain,
            })
            .collect();
        nodes.push(Node::Return);
        GenCfg { nodes }
    }

    /// Nested diamonds (if-else inside if-else) joined at the end.
    pub fn nested_diamonds(depth: usize) -> Self {
        // layout per level k: If(else_k) ; <inner> ; Goto(join_k) ; else_k: Plain ; join_k: Plain
        fn build(depth: usize, out: &mut Vec<Node>) {
            if depth == 0 {
                out.push(Node::Plain);
                return;
            }
            let if_at = out.len();
            out.push(Node::If(0));
            build(depth - 1, out);
            let goto_at = out.len();
            out.push(Node::Goto(0));
            let else_at = out.len();
            out.push(Node::Plain);
            let join_at = out.len();
            out.push(Node::Plain);
            out[if_at] = Node::If(else_at);
            out[goto_at] = Node::Goto(join_at);
        }
        let mut nodes = Vec::new();
        build(depth, &mut nodes);
        nodes.push(Node::Return);
        GenCfg { nodes }
    }

    /// A while loop with a branch in its body.
    pub fn loop_with_branch() -> Self {
        GenCfg {
            nodes: vec![
                Node::Plain,
                Node::If(6),   // 1: loop exit test
                Node::If(4),   // 2: branch in body
                Node::Plain,   // 3
                Node::Plain,   // 4: join
                Node::Goto(1), // 5: back edge
                Node::Return,  // 6
            ],
        }
    }

    /// TBIR text of a single-method program encoding this graph.
    pub fn to_tbir(&self) -> String {
        let mut s = String::from("class g.G kind BasicClass {\n  method m(p: int) {\n    local x : int\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let body = match n {
                Node::Plain => "x = 1".to_string(),
                Node::Goto(t) => format!("goto L{t}"),
                Node::If(t) => format!("if p == {i} goto L{t}"),
                Node::Return => "return".to_string(),
            };
            s.push_str(&format!("  L{i}: {body}\n"));
        }
        s.push_str("  }\n}\n");
        s
    }

    pub fn branch_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i], Node::If(_))).collect()
    }

    /// Successors of `i` under the branch outcomes in `bits`.
    fn succ(&self, i: usize, bits: u32) -> Vec<usize> {
        match self.nodes[i] {
            Node::Plain => vec![i + 1],
            Node::Goto(t) => vec![t],
            Node::If(t) => {
                if bits >> i & 1 == 1 {
                    vec![t]
                } else {
                    vec![i + 1]
                }
            }
            Node::Return => vec![],
        }
    }

    /// Nodes reachable from node 0 when every branch `i` takes the outcome
    /// given by bit `i`. A node is reachable under an assignment exactly
    /// when some acyclic path to it is consistent with the assignment.
    pub fn reachable_under(&self, bits: u32) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([0]);
        let mut q = VecDeque::from([0]);
        while let Some(n) = q.pop_front() {
            for s in self.succ(n, bits) {
                if seen.insert(s) {
                    q.push_back(s);
                }
            }
        }
        seen
    }

    /// Nodes reachable at all (ignoring branch outcomes).
    pub fn reachable_any(&self) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([0]);
        let mut q = VecDeque::from([0]);
        while let Some(n) = q.pop_front() {
            let next: Vec<usize> = match self.nodes[n] {
                Node::If(t) => vec![t, n + 1],
                _ => self.succ(n, 0),
            };
            for s in next {
                if seen.insert(s) {
                    q.push_back(s);
                }
            }
        }
        seen
    }
}

/// Checks one generated graph; returns the number of statements compared.
pub fn check_recovery(g: &GenCfg) -> Result<usize, String> {
    let program = parse_program(&g.to_tbir(), "gen").map_err(|e| format!("{e}\n{}", g.to_tbir()))?;
    let mid = MethodId::declared(0, 0);
    let cfg = build_cfg(mid, &program.units[0].methods[0]);
    let branches = g.branch_nodes();
    let conds = branches.iter().map(|&i| StmtId::new(mid, i)).collect();
    let ann = annotate_edges(&cfg, &conds);
    let preds = recover_path_predicates(&cfg, &ann, Caps::default(), &Deadline::none());
    let reachable = g.reachable_any();
    let mut compared = 0;
    for &n in &reachable {
        let f = preds
            .formula(n)
            .ok_or_else(|| format!("no formula for node {n} of {:?}", g.nodes))?;
        // the raw formula skips retreating edges, so in irreducible graphs it
        // may cover fewer paths, never more
        if let Some(raw) = preds.raw.get(&n) {
            if !equivalent(&Formula::and([raw.clone(), f.not()]), &Formula::False) {
                return Err(format!("node {n}: raw {raw} is not covered by {f}"));
            }
        }
        for k in 0..1u32 << branches.len() {
            let bits = branches
                .iter()
                .enumerate()
                .fold(0u32, |acc, (j, &b)| acc | (k >> j & 1) << b);
            let expect = g.reachable_under(bits).contains(&n);
            if eval_bits(f, bits) != expect {
                return Err(format!("node {n} of {:?}: {f} disagrees at {bits:b}", g.nodes));
            }
        }
        compared += 1;
    }
    Ok(compared)
}

/// Pearson by the raw-sums formula.
pub fn pearson_direct(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Rank by counting: 1 + smaller values + half the other equal values.
pub fn ranks_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|a| {
            let less = v.iter().filter(|b| *b < a).count() as f64;
            let equal = v.iter().filter(|b| *b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_direct(x: &[f64], y: &[f64]) -> f64 {
    pearson_direct(&ranks_by_counting(x), &ranks_by_counting(y))
}
