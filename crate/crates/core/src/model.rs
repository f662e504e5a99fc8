//! Whole-program entry model.
//!
//! Components have no single entry point, so a synthetic `dummy main` invokes
//! every recognized lifecycle method, each call guarded by an opaque branch
//! and the whole sequence wrapped in an opaque loop. Every ordering of
//! lifecycle calls is therefore a path. Opaque branches are recorded so later
//! stages never treat them as conditions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ir::{
    Callee, ClassUnit, ComponentKind, Constant, Decl, Hierarchy, MethodDef, MethodId, Operand,
    Place, Program, RelOp, Rhs, Stmt, StmtId, StmtKind, Target,
};

pub const DUMMY_MAIN_NAME: &str = "<dummy>.main";

/// Lifecycle methods recognized per component kind, in framework order.
pub fn lifecycle_methods(kind: ComponentKind) -> &'static [&'static str] {
    match kind {
        ComponentKind::Activity => &["onCreate", "onStart", "onResume", "onPause", "onStop", "onDestroy"],
        ComponentKind::Service => &["onCreate", "onStartCommand", "onDestroy"],
        ComponentKind::BroadcastReceiver => &["onReceive"],
        ComponentKind::ContentProvider => &["onCreate"],
        ComponentKind::BasicClass => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryModel {
    pub dummy_main: MethodDef,
    /// Component unit name to the lifecycle methods it runs, in order.
    pub lifecycle_bindings: BTreeMap<String, Vec<MethodId>>,
    /// Branches of the dummy main; never evaluated, never conditions.
    pub opaque_predicate_ids: BTreeSet<StmtId>,
    pub diagnostics: Vec<String>,
}

impl EntryModel {
    pub fn is_opaque(&self, id: StmtId) -> bool {
        self.opaque_predicate_ids.contains(&id)
    }
}

pub fn build_entry_model(program: &Program) -> EntryModel {
    let h = Hierarchy::new(program);
    let mut bindings: BTreeMap<String, Vec<MethodId>> = BTreeMap::new();
    // (component unit index, method name, arity)
    let mut calls: Vec<(usize, &str, usize)> = Vec::new();

    for (ui, unit) in program.units.iter().enumerate() {
        if !unit.kind.is_component() {
            continue;
        }
        for &name in lifecycle_methods(unit.kind) {
            if let Some(target) = h.dispatch(program, ui, name) {
                let MethodId::Declared { unit: tu, method: tm } = target else {
                    unreachable!()
                };
                let def = &program.units[tu].methods[tm];
                if def.is_static {
                    continue;
                }
                bindings.entry(unit.qualified_name.clone()).or_default().push(target);
                calls.push((ui, name, def.params.len()));
            }
        }
    }

    let mut diagnostics = Vec::new();
    if calls.is_empty() {
        diagnostics.push(format!(
            "{}: no component declares a recognized lifecycle method; dummy main is empty",
            program.source_id
        ));
    }

    let (dummy_main, opaque) = synthesize(program, &calls);
    EntryModel {
        dummy_main,
        lifecycle_bindings: bindings,
        opaque_predicate_ids: opaque,
        diagnostics,
    }
}

fn local(name: &str, kind: &str) -> Decl {
    Decl {
        name: name.to_string(),
        kind: kind.to_string(),
    }
}

fn synthesize(program: &Program, calls: &[(usize, &str, usize)]) -> (MethodDef, BTreeSet<StmtId>) {
    let mut def = MethodDef::new("main");
    def.is_static = true;
    let mut opaque = BTreeSet::new();
    if calls.is_empty() {
        def.body.push(Stmt::new(StmtKind::Return(None)));
        return (def, opaque);
    }

    let mut receivers: BTreeMap<usize, String> = BTreeMap::new();
    for &(ui, _, _) in calls {
        let n = receivers.len();
        receivers.entry(ui).or_insert_with(|| {
            let name = format!("c{n}");
            def.locals.push(local(&name, &program.units[ui].qualified_name));
            name
        });
    }

    // 0: round = 0          (entry, never a branch target)
    // Lhead:
    //   if p_i == 0 goto Lskip_i ; invoke C.m(c, a...) ; Lskip_i: ...
    // Lloop: if p_loop == 0 goto Lhead
    //   return
    def.locals.push(local("round", "int"));
    def.body.push(Stmt::new(StmtKind::Assign {
        dest: Place::Local("round".into()),
        rhs: Rhs::Operand(Operand::Const(Constant::Int(0))),
    }));

    let mut pending_label: Option<String> = Some("Lhead".into());
    let head_index = def.body.len();
    for (i, &(ui, name, arity)) in calls.iter().enumerate() {
        let p = format!("p{i}");
        def.locals.push(local(&p, "int"));
        let skip = if i + 1 < calls.len() {
            format!("Lskip{i}")
        } else {
            "Lloop".to_string()
        };
        let mut branch = Stmt::new(StmtKind::IfGoto {
            lhs: Operand::Local(p),
            op: RelOp::Eq,
            rhs: Operand::Const(Constant::Int(0)),
            target: Target {
                label: skip.clone(),
                index: 0,
            },
        });
        if let Some(l) = pending_label.take() {
            branch.labels.push(l);
        }
        opaque.insert(StmtId::new(MethodId::DummyMain, def.body.len()));
        def.body.push(branch);

        let mut args = vec![Operand::Local(receivers[&ui].clone())];
        for j in 0..arity {
            let a = format!("a{i}_{j}");
            def.locals.push(local(&a, "ref"));
            args.push(Operand::Local(a));
        }
        def.body.push(Stmt::new(StmtKind::Invoke {
            dest: None,
            callee: format!("{}.{}", program.units[ui].qualified_name, name),
            args,
        }));
        pending_label = Some(skip);
    }

    def.locals.push(local("p_loop", "int"));
    let mut back = Stmt::new(StmtKind::IfGoto {
        lhs: Operand::Local("p_loop".into()),
        op: RelOp::Eq,
        rhs: Operand::Const(Constant::Int(0)),
        target: Target {
            label: "Lhead".into(),
            index: head_index,
        },
    });
    back.labels.push(pending_label.take().expect("loop label"));
    opaque.insert(StmtId::new(MethodId::DummyMain, def.body.len()));
    def.body.push(back);
    def.body.push(Stmt::new(StmtKind::Return(None)));

    // resolve skip labels
    let positions: BTreeMap<String, usize> = def
        .body
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.labels.iter().map(move |l| (l.clone(), i)))
        .collect();
    for s in &mut def.body {
        if let StmtKind::IfGoto { target, .. } = &mut s.kind {
            target.index = positions[&target.label];
        }
    }
    (def, opaque)
}

/// A program together with its entry model: the unit of analysis.
pub struct Scene<'p> {
    pub program: &'p Program,
    pub entry: EntryModel,
    pub hierarchy: Hierarchy,
    callees: BTreeMap<StmtId, Callee>,
}

impl<'p> Scene<'p> {
    pub fn new(program: &'p Program) -> Self {
        let entry = build_entry_model(program);
        let hierarchy = Hierarchy::new(program);
        let mut callees = crate::ir::resolve_callees(program);
        for (i, s) in entry.dummy_main.body.iter().enumerate() {
            if let StmtKind::Invoke { callee, .. } = &s.kind {
                callees.insert(
                    StmtId::new(MethodId::DummyMain, i),
                    hierarchy.resolve(program, callee),
                );
            }
        }
        Scene {
            program,
            entry,
            hierarchy,
            callees,
        }
    }

    pub fn method(&self, id: MethodId) -> &MethodDef {
        match id {
            MethodId::DummyMain => &self.entry.dummy_main,
            MethodId::Declared { unit, method } => &self.program.units[unit].methods[method],
        }
    }

    pub fn stmt(&self, id: StmtId) -> &Stmt {
        &self.method(id.method).body[id.index]
    }

    pub fn unit(&self, id: MethodId) -> Option<&ClassUnit> {
        match id {
            MethodId::DummyMain => None,
            MethodId::Declared { unit, .. } => Some(&self.program.units[unit]),
        }
    }

    /// Fully-qualified method name, e.g. `com.app.Main.onStart`.
    pub fn method_name(&self, id: MethodId) -> String {
        match id {
            MethodId::DummyMain => DUMMY_MAIN_NAME.to_string(),
            MethodId::Declared { unit, method } => {
                let u = &self.program.units[unit];
                format!("{}.{}", u.qualified_name, u.methods[method].name)
            }
        }
    }

    /// Every method, dummy main first, then declaration order.
    pub fn method_ids(&self) -> Vec<MethodId> {
        let mut ids = vec![MethodId::DummyMain];
        for (ui, u) in self.program.units.iter().enumerate() {
            for mi in 0..u.methods.len() {
                ids.push(MethodId::declared(ui, mi));
            }
        }
        ids
    }

    pub fn callee(&self, site: StmtId) -> Option<&Callee> {
        self.callees.get(&site)
    }

    pub fn callees(&self) -> &BTreeMap<StmtId, Callee> {
        &self.callees
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    #[test]
    fn activity_lifecycle_is_wired_under_opaque_branches() {
        let src = r#"
class app.Main kind Activity {
  method onCreate(b: ref) {
    return
  }
  method onStart() {
    return
  }
  method helper() {
    return
  }
}
"#;
        let p = parse_program(src, "t").unwrap();
        let m = build_entry_model(&p);
        assert_eq!(
            m.lifecycle_bindings["app.Main"],
            vec![MethodId::declared(0, 0), MethodId::declared(0, 1)]
        );
        let body = &m.dummy_main.body;
        let branches: Vec<usize> = body
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_branch())
            .map(|(i, _)| i)
            .collect();
        assert_eq!(branches.len(), 3);
        for b in branches {
            assert!(m.is_opaque(StmtId::new(MethodId::DummyMain, b)));
        }
        // the back edge returns to the first guarded call so both orders are paths
        let back = body.iter().rev().nth(1).unwrap();
        assert!(matches!(&back.kind, StmtKind::IfGoto { target, .. } if target.index == 1));
        // the printed dummy main is valid TBIR
        let unit = format!("class x.Dummy kind BasicClass {{\n{}}}\n", m.dummy_main);
        parse_program(&unit, "dummy").unwrap();
    }

    #[test]
    fn basic_class_only_program_gets_empty_main() {
        let p = parse_program("class a.U kind BasicClass {\n  method onCreate() {\n    return\n  }\n}\n", "bc").unwrap();
        let m = build_entry_model(&p);
        assert!(m.lifecycle_bindings.is_empty());
        assert_eq!(m.dummy_main.body.len(), 1);
        assert_eq!(m.diagnostics.len(), 1);
        assert!(m.opaque_predicate_ids.is_empty());
    }

    #[test]
    fn receiver_gets_opaque_arguments() {
        let p = parse_program(
            "class a.R kind BroadcastReceiver {\n  method onReceive(ctx: ref, intent: ref) {\n    return\n  }\n}\n",
            "br",
        )
        .unwrap();
        let m = build_entry_model(&p);
        let call = m
            .dummy_main
            .body
            .iter()
            .find_map(|s| match &s.kind {
                StmtKind::Invoke { callee, args, .. } => Some((callee.clone(), args.clone())),
                _ => None,
            })
            .unwrap();
        assert_eq!(call.0, "a.R.onReceive");
        assert_eq!(call.1.len(), 3);
        // none of the argument locals is ever assigned
        for a in &call.1 {
            let Operand::Local(n) = a else { panic!() };
            assert!(!m.dummy_main.body.iter().any(
                |s| matches!(&s.kind, StmtKind::Assign { dest: Place::Local(d), .. } if d == n)
            ));
        }
    }
}
