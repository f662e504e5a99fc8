//! Suspicious-check classification and the obvious-check post-filter.
//!
//! A branch is suspicious when one side is an environment value (time,
//! location or SMS) and the other is hardcoded. For predicates recorded on a
//! tagged value (`#sms/#body.startsWith("GETPOS")`) the hardcoded side is the
//! predicate argument and the branch compares the predicate with a boolean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{RelOp, StmtId};
use crate::symex::{AtomicCondition, SymValue, Tag, TriggerKind};

/// Which branch literal of the condition satisfies the narrow check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Satisfied {
    /// The taken (jump) edge.
    Positive,
    /// The fall-through edge.
    Negative,
    /// Ordered comparisons: either side is a narrow range.
    Both,
}

impl Satisfied {
    pub fn literals(self) -> &'static [bool] {
        match self {
            Satisfied::Positive => &[true],
            Satisfied::Negative => &[false],
            Satisfied::Both => &[true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspiciousCheck {
    pub condition: AtomicCondition,
    pub trigger_kind: TriggerKind,
    /// Human-readable check, e.g. `#now cmp 15L`.
    pub descriptor: String,
    pub tagged_operand: SymValue,
    /// The hardcoded side; `Opaque` for symbolic checks.
    pub hardcoded_operand: SymValue,
    pub satisfied: Satisfied,
    /// Inequality against the hardcoded value (`!=`).
    pub negated: bool,
    /// The non-tagged side is an unknown value rather than a constant.
    pub symbolic: bool,
}

impl SuspiciousCheck {
    pub fn id(&self) -> StmtId {
        self.condition.id
    }
}

/// Parses the leading tag of a descriptor back to its trigger kind.
pub fn trigger_kind_of_descriptor(descriptor: &str) -> Option<TriggerKind> {
    let head: String = descriptor.chars().take_while(|c| *c != '.' && *c != ' ').collect();
    head.parse::<Tag>().ok().map(Tag::kind)
}

fn truthiness(v: &SymValue) -> Option<bool> {
    match v {
        SymValue::Bool(b) => Some(*b),
        SymValue::Int(0) | SymValue::Long(0) => Some(false),
        SymValue::Int(1) | SymValue::Long(1) => Some(true),
        _ => None,
    }
}

fn classify_one(c: &AtomicCondition) -> Option<SuspiciousCheck> {
    let (tagged, other) = match (c.lhs.is_tagged(), c.rhs.is_tagged()) {
        (true, false) => (&c.lhs, &c.rhs),
        (false, true) => (&c.rhs, &c.lhs),
        _ => return None,
    };
    let kind = tagged.tag()?.kind();

    if tagged.is_predicate() {
        let truth = truthiness(other)?;
        let op = tagged.last_op()?;
        let hard = op.args.iter().find(|a| a.is_concrete()).cloned();
        let symbolic = hard.is_none();
        let hardcoded = match hard {
            Some(h) => h,
            None => op.args.iter().find(|a| a.is_opaque()).cloned()?,
        };
        let satisfied = match (c.op, truth) {
            (RelOp::Eq, true) | (RelOp::Ne, false) => Satisfied::Positive,
            (RelOp::Eq, false) | (RelOp::Ne, true) => Satisfied::Negative,
            _ => Satisfied::Both,
        };
        return Some(SuspiciousCheck {
            condition: c.clone(),
            trigger_kind: kind,
            descriptor: tagged.to_string(),
            tagged_operand: tagged.clone(),
            hardcoded_operand: hardcoded,
            satisfied,
            negated: false,
            symbolic,
        });
    }

    if !(other.is_concrete() || other.is_opaque()) {
        return None;
    }
    let (satisfied, negated) = match c.op {
        RelOp::Eq => (Satisfied::Positive, false),
        RelOp::Ne => (Satisfied::Negative, true),
        _ => (Satisfied::Both, false),
    };
    Some(SuspiciousCheck {
        condition: c.clone(),
        trigger_kind: kind,
        descriptor: format!("{tagged} cmp {other}"),
        tagged_operand: tagged.clone(),
        hardcoded_operand: other.clone(),
        satisfied,
        negated,
        symbolic: other.is_opaque(),
    })
}

/// Flags suspicious checks, in condition order.
pub fn classify(conditions: &BTreeMap<StmtId, AtomicCondition>) -> Vec<SuspiciousCheck> {
    conditions.values().filter_map(classify_one).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedCheck {
    pub check: SuspiciousCheck,
    pub reason: String,
}

fn obvious(check: &SuspiciousCheck) -> Option<&'static str> {
    let h = &check.hardcoded_operand;
    if matches!(h, SymValue::Null) {
        return Some("null check");
    }
    if matches!(h, SymValue::Int(-1) | SymValue::Long(-1)) {
        return Some("comparison with -1");
    }
    let sized = check
        .tagged_operand
        .last_op()
        .is_some_and(|op| op.name == "length" || op.name == "size");
    if sized && matches!(h, SymValue::Int(0) | SymValue::Long(0)) {
        return Some("length compared with 0");
    }
    None
}

/// Drops null checks, `-1` comparisons and emptiness tests.
pub fn post_filter(checks: Vec<SuspiciousCheck>) -> (Vec<SuspiciousCheck>, Vec<RemovedCheck>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for c in checks {
        match obvious(&c) {
            Some(reason) => removed.push(RemovedCheck {
                check: c,
                reason: reason.to_string(),
            }),
            None => kept.push(c),
        }
    }
    (kept, removed)
}
