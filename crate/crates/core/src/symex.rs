//! Value modeling over the ICFG.
//!
//! Locals are tracked flow-sensitively along each CFG; fields, parameters and
//! return values live in global bottom/value/top slots that are iterated to a
//! fixpoint across all reachable methods. Framework calls are modeled through
//! a [`ModelCatalog`]: some produce tagged environment values (time, location,
//! SMS), some are string operations executed concretely, and some are
//! comparisons recorded on the tagged operand.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deadline::Deadline;
use crate::graphs::{CallGraph, Icfg};
use crate::ir::{
    write_quoted, BinOp, Callee, Constant, FieldRef, MethodId, Operand, Place, RelOp, Rhs, StmtId,
    StmtKind,
};
use crate::model::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TriggerKind {
    Time,
    Location,
    #[serde(rename = "SMS")]
    Sms,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 3] = [TriggerKind::Time, TriggerKind::Location, TriggerKind::Sms];

    pub fn as_str(self) -> &'static str {
        match self {
            TriggerKind::Time => "Time",
            TriggerKind::Location => "Location",
            TriggerKind::Sms => "SMS",
        }
    }
}

impl fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Environment-value tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    #[serde(rename = "#now")]
    Now,
    #[serde(rename = "#now/#hour")]
    NowHour,
    #[serde(rename = "#here")]
    Here,
    #[serde(rename = "#here/#latitude")]
    HereLatitude,
    #[serde(rename = "#here/#longitude")]
    HereLongitude,
    #[serde(rename = "#sms")]
    Sms,
    #[serde(rename = "#sms/#body")]
    SmsBody,
    #[serde(rename = "#sms/#sender")]
    SmsSender,
}

impl Tag {
    pub const ALL: [Tag; 8] = [
        Tag::Now,
        Tag::NowHour,
        Tag::Here,
        Tag::HereLatitude,
        Tag::HereLongitude,
        Tag::Sms,
        Tag::SmsBody,
        Tag::SmsSender,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Now => "#now",
            Tag::NowHour => "#now/#hour",
            Tag::Here => "#here",
            Tag::HereLatitude => "#here/#latitude",
            Tag::HereLongitude => "#here/#longitude",
            Tag::Sms => "#sms",
            Tag::SmsBody => "#sms/#body",
            Tag::SmsSender => "#sms/#sender",
        }
    }

    pub fn kind(self) -> TriggerKind {
        match self {
            Tag::Now | Tag::NowHour => TriggerKind::Time,
            Tag::Here | Tag::HereLatitude | Tag::HereLongitude => TriggerKind::Location,
            Tag::Sms | Tag::SmsBody | Tag::SmsSender => TriggerKind::Sms,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tag `{s}`"))
    }
}

/// An operation recorded on a tagged value, e.g. `startsWith("GETPOS")`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagOp {
    pub name: String,
    pub args: Vec<SymValue>,
}

/// Operations whose result is a boolean predicate over the tagged value.
pub fn is_predicate_op(name: &str) -> bool {
    matches!(
        name,
        "startsWith" | "endsWith" | "contains" | "matches" | "equals" | "equalsIgnoreCase" | "after" | "before"
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum SymValue {
    Int(i64),
    Long(i64),
    Str(String),
    Bool(bool),
    Null,
    /// Object built by an external constructor from concrete arguments only.
    Object { class: String, args: Vec<SymValue> },
    Tagged { tag: Tag, ops: Vec<TagOp> },
    Opaque(u32),
}

impl SymValue {
    pub fn tagged(tag: Tag) -> Self {
        SymValue::Tagged { tag, ops: Vec::new() }
    }

    pub fn from_constant(c: &Constant) -> Self {
        match c {
            Constant::Int(v) => SymValue::Int(*v),
            Constant::Long(v) => SymValue::Long(*v),
            Constant::Str(s) => SymValue::Str(s.clone()),
            Constant::Bool(b) => SymValue::Bool(*b),
            Constant::Null => SymValue::Null,
        }
    }

    pub fn is_tagged(&self) -> bool {
        matches!(self, SymValue::Tagged { .. })
    }

    pub fn is_opaque(&self) -> bool {
        matches!(self, SymValue::Opaque(_))
    }

    /// Literal scalar (int, long, string, bool, null).
    pub fn is_scalar(&self) -> bool {
        matches!(
            self,
            SymValue::Int(_) | SymValue::Long(_) | SymValue::Str(_) | SymValue::Bool(_) | SymValue::Null
        )
    }

    /// Hardcoded: a scalar or an object transitively built from scalars.
    pub fn is_concrete(&self) -> bool {
        match self {
            SymValue::Object { args, .. } => args.iter().all(SymValue::is_concrete),
            v => v.is_scalar(),
        }
    }

    pub fn tag(&self) -> Option<Tag> {
        match self {
            SymValue::Tagged { tag, .. } => Some(*tag),
            _ => None,
        }
    }

    pub fn last_op(&self) -> Option<&TagOp> {
        match self {
            SymValue::Tagged { ops, .. } => ops.last(),
            _ => None,
        }
    }

    /// Tagged value whose last recorded operation yields a boolean.
    pub fn is_predicate(&self) -> bool {
        self.last_op().is_some_and(|op| is_predicate_op(&op.name))
    }

    fn as_int(&self) -> Option<i64> {
        match self {
            SymValue::Int(v) | SymValue::Long(v) => Some(*v),
            _ => None,
        }
    }

    /// String conversion used by concatenation and `valueOf`.
    fn concat_text(&self) -> Option<String> {
        match self {
            SymValue::Int(v) | SymValue::Long(v) => Some(v.to_string()),
            SymValue::Str(s) => Some(s.clone()),
            SymValue::Bool(b) => Some(b.to_string()),
            SymValue::Null => Some("null".into()),
            _ => None,
        }
    }

    fn with_op(&self, name: &str, args: Vec<SymValue>) -> SymValue {
        match self {
            SymValue::Tagged { tag, ops } => {
                let mut ops = ops.clone();
                ops.push(TagOp {
                    name: name.to_string(),
                    args,
                });
                SymValue::Tagged { tag: *tag, ops }
            }
            other => other.clone(),
        }
    }
}

fn write_args(f: &mut fmt::Formatter<'_>, args: &[SymValue]) -> fmt::Result {
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{a}")?;
    }
    Ok(())
}

impl fmt::Display for SymValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymValue::Int(v) => write!(f, "{v}"),
            SymValue::Long(v) => write!(f, "{v}L"),
            SymValue::Str(s) => write_quoted(f, s),
            SymValue::Bool(b) => write!(f, "{b}"),
            SymValue::Null => f.write_str("null"),
            SymValue::Object { class, args } => {
                write!(f, "new {class}(")?;
                write_args(f, args)?;
                f.write_str(")")
            }
            SymValue::Tagged { tag, ops } => {
                write!(f, "{tag}")?;
                for op in ops {
                    write!(f, ".{}(", op.name)?;
                    write_args(f, &op.args)?;
                    f.write_str(")")?;
                }
                Ok(())
            }
            SymValue::Opaque(id) => write!(f, "$sym{id}"),
        }
    }
}

/// Global lattice entry for fields, parameters and return values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Bottom,
    Value(SymValue),
    Top,
}

impl Slot {
    /// Joins `v` in; reports whether the slot moved.
    pub fn write(&mut self, v: &SymValue) -> bool {
        match self {
            Slot::Bottom => {
                *self = Slot::Value(v.clone());
                true
            }
            Slot::Value(u) if u == v => false,
            Slot::Value(_) => {
                *self = Slot::Top;
                true
            }
            Slot::Top => false,
        }
    }

    fn height(&self) -> u8 {
        match self {
            Slot::Bottom => 0,
            Slot::Value(_) => 1,
            Slot::Top => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrOp {
    Init,
    Append,
    Concat,
    Format,
    Substring,
    StartsWith,
    EndsWith,
    Contains,
    Matches,
    Equals,
    EqualsIgnoreCase,
    Length,
    ToLowerCase,
    ToUpperCase,
    Trim,
    ValueOf,
    ToString,
}

impl StrOp {
    const NAMES: [(&'static str, StrOp); 17] = [
        ("init", StrOp::Init),
        ("append", StrOp::Append),
        ("concat", StrOp::Concat),
        ("format", StrOp::Format),
        ("substring", StrOp::Substring),
        ("startsWith", StrOp::StartsWith),
        ("endsWith", StrOp::EndsWith),
        ("contains", StrOp::Contains),
        ("matches", StrOp::Matches),
        ("equals", StrOp::Equals),
        ("equalsIgnoreCase", StrOp::EqualsIgnoreCase),
        ("length", StrOp::Length),
        ("toLowerCase", StrOp::ToLowerCase),
        ("toUpperCase", StrOp::ToUpperCase),
        ("trim", StrOp::Trim),
        ("valueOf", StrOp::ValueOf),
        ("toString", StrOp::ToString),
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES.iter().find(|(_, o)| *o == self).map(|(n, _)| *n).unwrap_or("?")
    }

    pub fn parse(s: &str) -> Option<StrOp> {
        Self::NAMES.iter().find(|(n, _)| *n == s).map(|(_, o)| *o)
    }

    /// Conversions that pass a tagged value through without recording.
    fn is_identity(self) -> bool {
        matches!(self, StrOp::ValueOf | StrOp::ToString | StrOp::Init)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Result is a fresh tagged value.
    Tag(Tag),
    /// Constructor: no arguments gives the tag, concrete arguments a constant-built object.
    Ctor(Tag),
    StrOp(StrOp),
    /// Comparison recorded on whichever operand is tagged.
    Cmp(String),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Tag(t) => write!(f, "tag:{t}"),
            Action::Ctor(t) => write!(f, "ctor:{t}"),
            Action::StrOp(o) => write!(f, "strop:{}", o.name()),
            Action::Cmp(n) => write!(f, "cmp:{n}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("catalog line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("catalog line {line}: duplicate signature `{signature}`")]
    Duplicate { line: usize, signature: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelCatalog {
    entries: BTreeMap<String, Action>,
}

const DEFAULT_CATALOG: &str = include_str!("../data/catalog.txt");

impl ModelCatalog {
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_CATALOG).expect("embedded catalog is well-formed")
    }

    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            // `#` also starts tag paths, so only whole-line comments exist
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (sig, action) = l.split_once("->").ok_or_else(|| CatalogError::Malformed {
                line,
                message: "expected `SIGNATURE -> ACTION`".into(),
            })?;
            let sig = sig.trim().to_string();
            let action = action.trim();
            let (kind, arg) = action.split_once(':').ok_or_else(|| CatalogError::Malformed {
                line,
                message: format!("action `{action}` lacks a `kind:` prefix"),
            })?;
            let bad = |message: String| CatalogError::Malformed { line, message };
            let action = match kind {
                "tag" => Action::Tag(arg.parse().map_err(bad)?),
                "ctor" => Action::Ctor(arg.parse().map_err(bad)?),
                "strop" => Action::StrOp(
                    StrOp::parse(arg).ok_or_else(|| bad(format!("unknown string op `{arg}`")))?,
                ),
                "cmp" if !arg.is_empty() => Action::Cmp(arg.to_string()),
                _ => return Err(bad(format!("unknown action `{action}`"))),
            };
            if sig.is_empty() {
                return Err(bad("empty signature".into()));
            }
            if entries.insert(sig.clone(), action).is_some() {
                return Err(CatalogError::Duplicate { line, signature: sig });
            }
        }
        Ok(ModelCatalog { entries })
    }

    pub fn get(&self, signature: &str) -> Option<&Action> {
        self.entries.get(signature)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Action)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

// ---------------------------------------------------------------------------
// Concrete string semantics

fn substring_chars(s: &str, begin: i64, end: Option<i64>) -> Option<String> {
    let n = s.chars().count() as i64;
    let end = end.unwrap_or(n);
    if begin < 0 || end > n || begin > end {
        return None;
    }
    Some(s.chars().skip(begin as usize).take((end - begin) as usize).collect())
}

/// Supports `%s`, `%d` and `%%`; anything else (positional or other
/// conversions) is not modeled.
fn format_template(template: &str, args: &[SymValue]) -> Option<String> {
    let mut out = String::new();
    let mut chars = template.chars();
    let mut next = args.iter();
    while let Some(c) = chars.next() {
        if c != '%' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '%' => out.push('%'),
            's' => out.push_str(&next.next()?.concat_text()?),
            'd' => out.push_str(&next.next()?.as_int()?.to_string()),
            _ => return None,
        }
    }
    next.next().is_none().then_some(out)
}

fn java_trim(s: &str) -> String {
    s.trim_matches(|c: char| c <= ' ').to_string()
}

/// Evaluates a string operation on fully concrete inputs. `recv` is the
/// receiver (or the template / converted value for static forms).
pub fn eval_concrete_strop(op: StrOp, recv: Option<&SymValue>, args: &[SymValue]) -> Option<SymValue> {
    use SymValue as V;
    let s = || match recv {
        Some(V::Str(s)) => Some(s.as_str()),
        _ => None,
    };
    let arg_str = |i: usize| match args.get(i) {
        Some(V::Str(s)) => Some(s.as_str()),
        _ => None,
    };
    let v = match op {
        StrOp::Init => match (recv, args) {
            (None, []) => V::Str(String::new()),
            (None, [a]) => V::Str(a.concat_text()?),
            _ => return None,
        },
        StrOp::Append | StrOp::Concat => {
            if args.len() != 1 {
                return None;
            }
            let mut r = s()?.to_string();
            r.push_str(&args[0].concat_text()?);
            V::Str(r)
        }
        StrOp::Format => V::Str(format_template(s()?, args)?),
        StrOp::Substring => match args {
            [b] => V::Str(substring_chars(s()?, b.as_int()?, None)?),
            [b, e] => V::Str(substring_chars(s()?, b.as_int()?, Some(e.as_int()?))?),
            _ => return None,
        },
        StrOp::StartsWith => V::Bool(s()?.starts_with(arg_str(0)?)),
        StrOp::EndsWith => V::Bool(s()?.ends_with(arg_str(0)?)),
        StrOp::Contains => V::Bool(s()?.contains(arg_str(0)?)),
        StrOp::Matches => {
            let re = regex::Regex::new(&format!("^(?:{})$", arg_str(0)?)).ok()?;
            V::Bool(re.is_match(s()?))
        }
        StrOp::Equals => V::Bool(args.len() == 1 && recv.is_some() && recv == args.first()),
        StrOp::EqualsIgnoreCase => V::Bool(match arg_str(0) {
            Some(a) => s()?.to_lowercase() == a.to_lowercase(),
            None => false,
        }),
        StrOp::Length => V::Int(s()?.chars().count() as i64),
        StrOp::ToLowerCase => V::Str(s()?.to_lowercase()),
        StrOp::ToUpperCase => V::Str(s()?.to_uppercase()),
        StrOp::Trim => V::Str(java_trim(s()?)),
        StrOp::ValueOf | StrOp::ToString => match recv? {
            V::Object { .. } | V::Tagged { .. } | V::Opaque(_) => return None,
            r => V::Str(r.concat_text()?),
        },
    };
    if !args.is_empty() && matches!(op, StrOp::Length | StrOp::ToLowerCase | StrOp::ToUpperCase | StrOp::Trim) {
        return None;
    }
    Some(v)
}

// ---------------------------------------------------------------------------
// Engine

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum OpaqueKey {
    Site(StmtId),
    Join(StmtId, String),
    Slot(String),
    Unassigned(MethodId, String),
}

#[derive(Debug, Default)]
struct OpaqueAlloc {
    ids: BTreeMap<OpaqueKey, u32>,
}

impl OpaqueAlloc {
    fn get(&mut self, key: OpaqueKey) -> SymValue {
        let next = self.ids.len() as u32;
        SymValue::Opaque(*self.ids.entry(key).or_insert(next))
    }
}

/// A branch condition with both operands resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicCondition {
    pub id: StmtId,
    pub lhs: SymValue,
    pub op: RelOp,
    pub rhs: SymValue,
    /// Field an operand was loaded from, if any (switch tracking).
    pub lhs_field: Option<FieldRef>,
    pub rhs_field: Option<FieldRef>,
    /// Rendering of the tagged operand, when one exists.
    pub semantic_tag: Option<String>,
}

impl AtomicCondition {
    pub fn fields(&self) -> impl Iterator<Item = &FieldRef> {
        self.lhs_field.iter().chain(self.rhs_field.iter())
    }
}

impl fmt::Display for AtomicCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op.symbol(), self.rhs)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SymexOutput {
    /// One entry per reachable non-opaque branch.
    pub conditions: BTreeMap<StmtId, AtomicCondition>,
    /// Values of the locals each reachable statement reads.
    pub reads: BTreeMap<StmtId, BTreeMap<String, SymValue>>,
    pub fields: BTreeMap<FieldRef, Slot>,
    /// Set when the deadline interrupted the fixpoint.
    pub truncated: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Val {
    v: SymValue,
    origin: Option<FieldRef>,
}

type Env = BTreeMap<String, Val>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum SlotKey {
    This(MethodId),
    Param(MethodId, usize),
    Return(MethodId),
}

struct Engine<'a, 'p> {
    scene: &'a Scene<'p>,
    icfg: &'a Icfg,
    cg: &'a CallGraph,
    catalog: &'a ModelCatalog,
    deadline: &'a Deadline,
    alloc: OpaqueAlloc,
    fields: BTreeMap<FieldRef, Slot>,
    slots: BTreeMap<SlotKey, Slot>,
    changed: bool,
    out: SymexOutput,
}

const MAX_GLOBAL_ROUNDS: usize = 64;

pub fn run_symbolic_execution(
    scene: &Scene<'_>,
    icfg: &Icfg,
    callgraph: &CallGraph,
    catalog: &ModelCatalog,
    deadline: &Deadline,
) -> SymexOutput {
    let mut e = Engine {
        scene,
        icfg,
        cg: callgraph,
        catalog,
        deadline,
        alloc: OpaqueAlloc::default(),
        fields: BTreeMap::new(),
        slots: BTreeMap::new(),
        changed: false,
        out: SymexOutput::default(),
    };
    let order = method_order(icfg, callgraph);
    for round in 0..MAX_GLOBAL_ROUNDS {
        e.changed = false;
        e.out.conditions.clear();
        e.out.reads.clear();
        e.out.iterations = round + 1;
        for &m in &order {
            if e.deadline.expired() {
                e.out.truncated = true;
                break;
            }
            e.analyze_method(m);
        }
        if !e.changed || e.out.truncated {
            break;
        }
    }
    e.out.fields = e.fields;
    e.out
}

/// Breadth-first from the dummy main so callers usually precede callees.
fn method_order(icfg: &Icfg, cg: &CallGraph) -> Vec<MethodId> {
    let callers_first: BTreeMap<MethodId, BTreeSet<MethodId>> = {
        let mut m: BTreeMap<MethodId, BTreeSet<MethodId>> = BTreeMap::new();
        for (site, ts) in &cg.edges {
            m.entry(site.method).or_default().extend(ts.iter().copied());
        }
        m
    };
    let mut seen = BTreeSet::from([MethodId::DummyMain]);
    let mut order = vec![MethodId::DummyMain];
    let mut i = 0;
    while i < order.len() {
        if let Some(next) = callers_first.get(&order[i]) {
            for &n in next {
                if seen.insert(n) {
                    order.push(n);
                }
            }
        }
        i += 1;
    }
    order.retain(|m| icfg.cfg(*m).is_some());
    order
}

impl Engine<'_, '_> {
    fn read_slot(&mut self, key: SlotKey) -> SymValue {
        match self.slots.get(&key) {
            Some(Slot::Value(v)) => v.clone(),
            _ => self.alloc.get(OpaqueKey::Slot(format!("{key:?}"))),
        }
    }

    fn write_slot(&mut self, key: SlotKey, v: &SymValue) {
        let slot = self.slots.entry(key).or_insert(Slot::Bottom);
        if slot.write(v) {
            self.changed = true;
        }
    }

    fn read_field(&mut self, f: &FieldRef) -> SymValue {
        match self.fields.get(f) {
            Some(Slot::Value(v)) => v.clone(),
            _ => self.alloc.get(OpaqueKey::Slot(format!("field {f}"))),
        }
    }

    fn write_field(&mut self, f: &FieldRef, v: &SymValue) {
        let slot = self.fields.entry(f.clone()).or_insert(Slot::Bottom);
        let before = slot.height();
        if slot.write(v) {
            debug_assert!(slot.height() >= before);
            self.changed = true;
        }
    }

    fn entry_env(&mut self, m: MethodId) -> Env {
        let mut env = Env::new();
        let def = self.scene.method(m);
        if m != MethodId::DummyMain && !def.is_static {
            let v = self.read_slot(SlotKey::This(m));
            env.insert("this".into(), Val { v, origin: None });
        }
        for (i, p) in def.params.iter().enumerate() {
            let v = self.read_slot(SlotKey::Param(m, i));
            env.insert(p.name.clone(), Val { v, origin: None });
        }
        env
    }

    fn join_envs(&mut self, at: StmtId, envs: &[&Env]) -> Env {
        let mut out = Env::new();
        let keys: BTreeSet<&String> = envs.iter().flat_map(|e| e.keys()).collect();
        for k in keys {
            let vals: Vec<&Val> = envs.iter().filter_map(|e| e.get(k)).collect();
            let first = vals[0];
            if vals.iter().all(|v| *v == first) {
                out.insert(k.clone(), first.clone());
            } else {
                let origin = if vals.iter().all(|v| v.origin == first.origin) {
                    first.origin.clone()
                } else {
                    None
                };
                let v = self.alloc.get(OpaqueKey::Join(at, k.clone()));
                out.insert(k.clone(), Val { v, origin });
            }
        }
        out
    }

    fn analyze_method(&mut self, m: MethodId) {
        let icfg = self.icfg;
        let Some(cfg) = icfg.cfg(m) else { return };
        let Some(entry) = cfg.entry else { return };
        let rpo = cfg.reverse_postorder();
        let init = self.entry_env(m);

        // local fixpoint without side effects
        let mut outs: BTreeMap<usize, Env> = BTreeMap::new();
        let mut ins: BTreeMap<usize, Env> = BTreeMap::new();
        let mut guard = 0usize;
        loop {
            let mut moved = false;
            for &n in &rpo {
                let preds = cfg.predecessors(n);
                let mut incoming: Vec<&Env> = preds.iter().filter_map(|p| outs.get(p)).collect();
                if n == entry {
                    incoming.push(&init);
                }
                let incoming: Vec<Env> = incoming.into_iter().cloned().collect();
                let refs: Vec<&Env> = incoming.iter().collect();
                let env_in = self.join_envs(StmtId::new(m, n), &refs);
                let env_out = self.transfer(StmtId::new(m, n), env_in.clone(), false);
                ins.insert(n, env_in);
                if outs.get(&n) != Some(&env_out) {
                    outs.insert(n, env_out);
                    moved = true;
                }
            }
            guard += 1;
            if !moved || guard > 4 * rpo.len() + 8 {
                break;
            }
            if self.deadline.expired() {
                self.out.truncated = true;
                return;
            }
        }
        // one sweep with side effects and recording
        for &n in &rpo {
            if let Some(env) = ins.get(&n).cloned() {
                self.transfer(StmtId::new(m, n), env, true);
            }
        }
    }

    fn operand(&mut self, m: MethodId, env: &Env, o: &Operand) -> Val {
        match o {
            Operand::Const(c) => Val {
                v: SymValue::from_constant(c),
                origin: None,
            },
            Operand::Local(name) => match env.get(name) {
                Some(v) => v.clone(),
                None => Val {
                    v: self.alloc.get(OpaqueKey::Unassigned(m, name.clone())),
                    origin: None,
                },
            },
        }
    }

    fn assign(&mut self, env: &mut Env, dest: &Place, val: Val, effects: bool) {
        match dest {
            Place::Local(n) => {
                env.insert(n.clone(), val);
            }
            Place::Field(f) => {
                if effects {
                    self.write_field(f, &val.v);
                }
            }
        }
    }

    fn transfer(&mut self, site: StmtId, mut env: Env, effects: bool) -> Env {
        let m = site.method;
        let scene = self.scene;
        let stmt = scene.stmt(site);
        if effects {
            let mut reads = BTreeMap::new();
            for name in stmt.reads() {
                let v = self.operand(m, &env, &Operand::Local(name.to_string())).v;
                reads.insert(name.to_string(), v);
            }
            self.out.reads.insert(site, reads);
        }
        match &stmt.kind {
            StmtKind::Assign { dest, rhs } => {
                let val = match rhs {
                    Rhs::Operand(o) => self.operand(m, &env, o),
                    Rhs::Field(f) => Val {
                        v: self.read_field(f),
                        origin: Some(f.clone()),
                    },
                    Rhs::Binary(op, a, b) => {
                        let a = self.operand(m, &env, a).v;
                        let b = self.operand(m, &env, b).v;
                        Val {
                            v: self.binary(site, *op, &a, &b),
                            origin: None,
                        }
                    }
                };
                self.assign(&mut env, dest, val, effects);
            }
            StmtKind::IfGoto { lhs, op, rhs, .. } => {
                if effects && !scene.entry.is_opaque(site) {
                    let l = self.operand(m, &env, lhs);
                    let r = self.operand(m, &env, rhs);
                    let semantic_tag = [&l.v, &r.v].into_iter().find(|v| v.is_tagged()).map(|v| v.to_string());
                    self.out.conditions.insert(
                        site,
                        AtomicCondition {
                            id: site,
                            lhs: l.v,
                            op: *op,
                            rhs: r.v,
                            lhs_field: l.origin,
                            rhs_field: r.origin,
                            semantic_tag,
                        },
                    );
                }
            }
            StmtKind::Goto(_) => {}
            StmtKind::Return(o) => {
                if let (true, Some(o)) = (effects, o) {
                    let v = self.operand(m, &env, o).v;
                    self.write_slot(SlotKey::Return(m), &v);
                }
            }
            StmtKind::Invoke { dest, args, .. } => {
                let vals: Vec<SymValue> = args.iter().map(|a| self.operand(m, &env, a).v).collect();
                let result = self.invoke(site, &vals, effects);
                // StringBuilder-style mutation of the receiver local
                if let (Some(Callee::External(sig)), Some(Operand::Local(recv))) =
                    (scene.callee(site), args.first())
                {
                    if matches!(self.catalog.get(sig), Some(Action::StrOp(StrOp::Append))) {
                        env.insert(recv.clone(), Val { v: result.clone(), origin: None });
                    }
                }
                if let Some(d) = dest {
                    self.assign(&mut env, d, Val { v: result, origin: None }, effects);
                }
            }
        }
        env
    }

    fn binary(&mut self, site: StmtId, op: BinOp, a: &SymValue, b: &SymValue) -> SymValue {
        use SymValue as V;
        if a.is_tagged() {
            return a.clone();
        }
        if b.is_tagged() {
            return b.clone();
        }
        let r = match (op, a, b) {
            (BinOp::Concat, x, y) => match (x.concat_text(), y.concat_text()) {
                (Some(p), Some(q)) => Some(V::Str(p + &q)),
                _ => None,
            },
            (_, V::Int(x), V::Int(y)) => Some(V::Int(int_op(op, *x, *y))),
            (_, V::Int(x) | V::Long(x), V::Int(y) | V::Long(y)) => Some(V::Long(int_op(op, *x, *y))),
            _ => None,
        };
        r.unwrap_or_else(|| self.alloc.get(OpaqueKey::Site(site)))
    }

    fn invoke(&mut self, site: StmtId, args: &[SymValue], effects: bool) -> SymValue {
        let scene = self.scene;
        match scene.callee(site) {
            Some(Callee::Internal { method, .. }) => {
                let targets: Vec<MethodId> = self.cg.targets(site).collect();
                if targets.is_empty() {
                    return self.alloc.get(OpaqueKey::Site(site));
                }
                let is_ctor = method == "<init>";
                if effects {
                    for &t in &targets {
                        let def = scene.method(t);
                        let mut rest = args;
                        if !def.is_static && !is_ctor {
                            if let Some((recv, tail)) = args.split_first() {
                                self.write_slot(SlotKey::This(t), recv);
                                rest = tail;
                            }
                        }
                        for (i, v) in rest.iter().enumerate().take(def.params.len()) {
                            self.write_slot(SlotKey::Param(t, i), v);
                        }
                    }
                }
                if is_ctor {
                    return self.alloc.get(OpaqueKey::Site(site));
                }
                let rets: Vec<SymValue> = targets.iter().map(|&t| self.read_slot(SlotKey::Return(t))).collect();
                if rets.iter().all(|r| *r == rets[0]) {
                    rets[0].clone()
                } else {
                    self.alloc.get(OpaqueKey::Site(site))
                }
            }
            Some(Callee::External(sig)) => {
                let sig = sig.clone();
                self.external(site, &sig, args)
                    .unwrap_or_else(|| self.alloc.get(OpaqueKey::Site(site)))
            }
            None => self.alloc.get(OpaqueKey::Site(site)),
        }
    }

    fn external(&mut self, _site: StmtId, sig: &str, args: &[SymValue]) -> Option<SymValue> {
        let class = sig.rsplit_once('.').map(|(c, _)| c).unwrap_or(sig);
        match self.catalog.get(sig) {
            Some(Action::Tag(t)) => Some(SymValue::tagged(*t)),
            Some(Action::Ctor(t)) => {
                if args.is_empty() || args.iter().any(SymValue::is_tagged) {
                    Some(SymValue::tagged(*t))
                } else if args.iter().all(SymValue::is_concrete) {
                    Some(SymValue::Object {
                        class: class.to_string(),
                        args: args.to_vec(),
                    })
                } else {
                    None
                }
            }
            Some(Action::StrOp(op)) => model_strop(*op, args),
            Some(Action::Cmp(name)) => {
                let i = args.iter().position(SymValue::is_tagged)?;
                let others: Vec<SymValue> =
                    args.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v.clone()).collect();
                Some(args[i].with_op(name, others))
            }
            None if sig.ends_with(".<init>") && args.iter().all(SymValue::is_concrete) => Some(SymValue::Object {
                class: class.to_string(),
                args: args.to_vec(),
            }),
            None => None,
        }
    }
}

fn int_op(op: BinOp, x: i64, y: i64) -> i64 {
    match op {
        BinOp::Add => x.wrapping_add(y),
        BinOp::Sub => x.wrapping_sub(y),
        BinOp::Mul => x.wrapping_mul(y),
        BinOp::Concat => unreachable!("concat handled by caller"),
    }
}

/// String-op modeling over symbolic inputs. The first argument is the
/// receiver, except for `init` whose arguments are all constructor inputs.
pub fn model_strop(op: StrOp, args: &[SymValue]) -> Option<SymValue> {
    let (recv, rest) = match op {
        StrOp::Init => (None, args),
        _ => {
            let (r, t) = args.split_first()?;
            (Some(r), t)
        }
    };
    let all: Vec<&SymValue> = recv.into_iter().chain(rest.iter()).collect();
    if let Some(i) = all.iter().position(|v| v.is_tagged()) {
        let tagged = all[i];
        if op.is_identity() {
            return Some(tagged.clone());
        }
        let others: Vec<SymValue> = all
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| (*v).clone())
            .collect();
        return Some(tagged.with_op(op.name(), others));
    }
    if all.iter().all(|v| v.is_scalar()) {
        return eval_concrete_strop(op, recv, rest);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_call_graph, build_icfg, CallGraphAlgorithm};
    use crate::ir::parse_program;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(src: &str) -> (crate::ir::Program, SymexOutput) {
        let p = parse_program(src, "t").unwrap();
        let out = {
            let scene = Scene::new(&p);
            let cg = build_call_graph(&scene, CallGraphAlgorithm::Cha);
            let icfg = build_icfg(&scene, &cg);
            run_symbolic_execution(&scene, &icfg, &cg, &ModelCatalog::builtin(), &Deadline::none())
        };
        (p, out)
    }

    fn only_condition(out: &SymexOutput) -> &AtomicCondition {
        assert_eq!(out.conditions.len(), 1, "{:?}", out.conditions);
        out.conditions.values().next().unwrap()
    }

    #[test]
    fn date_after_constant_date_is_tagged_now() {
        let (_, out) = run(r#"
class a.M kind Activity {
  method onStart() {
    local d : java.util.Date
    local k : java.util.Date
    local c : boolean
    d = invoke java.util.Date.<init>()
    k = invoke java.util.Date.<init>(2011, 4, 21)
    c = invoke java.util.Date.after(d, k)
    if c == 0 goto Lend
    invoke android.telephony.SmsManager.sendTextMessage(d)
  Lend: return
  }
}
"#);
        let c = only_condition(&out);
        assert_eq!(c.lhs.to_string(), "#now.after(new java.util.Date(2011, 4, 21))");
        assert!(c.lhs.is_predicate());
        assert_eq!(c.rhs, SymValue::Int(0));
    }

    #[test]
    fn concat_of_constants_is_concrete() {
        let (_, out) = run(r#"
class a.M kind Activity {
  method onCreate() {
    local s : String
    local t : String
    s = "!CMD:"
    t = invoke java.lang.String.concat(s, "x")
    if t == "y" goto L
  L: return
  }
}
"#);
        assert_eq!(only_condition(&out).lhs, SymValue::Str("!CMD:x".into()));
    }

    #[test]
    fn sms_body_starts_with_records_predicate() {
        let (_, out) = run(r#"
class a.R kind BroadcastReceiver {
  method onReceive(ctx: ref, intent: ref) {
    local m : ref
    local b : String
    local r : boolean
    m = invoke android.telephony.SmsMessage.createFromPdu(intent)
    b = invoke android.telephony.SmsMessage.getMessageBody(m)
    r = invoke java.lang.String.startsWith(b, "GETPOS")
    if r == false goto L
    return
  L: return
  }
}
"#);
        let c = only_condition(&out);
        assert_eq!(c.lhs.to_string(), "#sms/#body.startsWith(\"GETPOS\")");
        assert_eq!(c.semantic_tag.as_deref(), Some("#sms/#body.startsWith(\"GETPOS\")"));
    }

    #[test]
    fn unknown_external_gives_distinct_opaques() {
        let (_, out) = run(r#"
class a.M kind Activity {
  method onCreate() {
    local x : int
    local y : int
    x = invoke com.other.Lib.f()
    y = invoke com.other.Lib.f()
    if x == y goto L
  L: return
  }
}
"#);
        let c = only_condition(&out);
        assert!(c.lhs.is_opaque() && c.rhs.is_opaque());
        assert_ne!(c.lhs, c.rhs);
    }

    #[test]
    fn differing_strings_join_to_opaque() {
        let (_, out) = run(r#"
class a.M kind Activity {
  method onCreate(p: int) {
    local s : String
    if p == 0 goto Lb
    s = "a"
    goto Lj
  Lb: s = "b"
  Lj: if s == "a" goto Lend
  Lend: return
  }
}
"#);
        let c = &out.conditions.values().nth(1).unwrap();
        assert!(c.lhs.is_opaque());
    }

    #[test]
    fn tag_survives_field_round_trip_and_marks_origin() {
        let (_, out) = run(r#"
class a.M kind Activity {
  field stamp : long
  method onCreate() {
    local t : long
    t = invoke java.lang.System.currentTimeMillis()
    @stamp = t
    return
  }
  method onStart() {
    local u : long
    u = @stamp
    if u > 15L goto L
  L: return
  }
}
"#);
        let c = only_condition(&out);
        assert_eq!(c.lhs, SymValue::tagged(Tag::Now));
        assert_eq!(c.lhs_field.as_ref().unwrap().to_string(), "a.M.stamp");
        assert_eq!(out.fields.len(), 1);
    }

    #[test]
    fn conflicting_field_writes_go_top() {
        let (_, out) = run(r#"
class a.M kind Activity {
  field n : int
  method onCreate() {
    @n = 1
    return
  }
  method onStart() {
    @n = 2
    return
  }
}
"#);
        assert_eq!(out.fields.values().next(), Some(&Slot::Top));
    }

    #[test]
    fn parameters_and_returns_flow_between_methods() {
        let (_, out) = run(r#"
class a.M kind Activity {
  method onCreate() {
    local b : String
    local r : boolean
    b = invoke android.telephony.SmsMessage.getMessageBody(this)
    r = invoke a.M.check(this, b)
    if r == true goto L
  L: return
  }
  method check(s: String) {
    local k : boolean
    k = invoke java.lang.String.equals(s, "zebinjo")
    return k
  }
}
"#);
        let c = only_condition(&out);
        assert_eq!(c.lhs.to_string(), "#sms/#body.equals(\"zebinjo\")");
    }

    #[test]
    fn catalog_rejects_duplicates_and_garbage() {
        assert!(matches!(
            ModelCatalog::parse("a.B.c -> tag:#now\na.B.c -> tag:#here\n"),
            Err(CatalogError::Duplicate { line: 2, .. })
        ));
        assert!(ModelCatalog::parse("a.B.c tag:#now\n").is_err());
        assert!(ModelCatalog::parse("a.B.c -> tag:#moon\n").is_err());
        assert!(ModelCatalog::parse("a.B.c -> strop:reverse\n").is_err());
        let ok = ModelCatalog::parse("# comment\n\na.B.c -> cmp:after\n").unwrap();
        assert_eq!(ok.len(), 1);
        assert!(!ModelCatalog::builtin().is_empty());
    }

    #[test]
    fn format_handles_simple_templates_only() {
        let s = |x: &str| SymValue::Str(x.into());
        assert_eq!(
            model_strop(StrOp::Format, &[s("%s-%d%%"), s("a"), SymValue::Int(7)]),
            Some(s("a-7%"))
        );
        assert_eq!(model_strop(StrOp::Format, &[s("%1$s"), s("a")]), None);
        assert_eq!(model_strop(StrOp::Format, &[s("%s %s"), s("a")]), None);
    }

    // Independent evaluation of the concrete string operations, written
    // against byte offsets on ASCII input.
    fn oracle(op: StrOp, r: &str, a: &str, i: i64, j: i64) -> Option<SymValue> {
        use SymValue as V;
        Some(match op {
            StrOp::Append | StrOp::Concat => V::Str(format!("{r}{a}")),
            StrOp::Substring => {
                if i < 0 || j > r.len() as i64 || i > j {
                    return None;
                }
                V::Str(r[i as usize..j as usize].to_string())
            }
            StrOp::StartsWith => V::Bool(r.len() >= a.len() && &r[..a.len()] == a),
            StrOp::EndsWith => V::Bool(r.len() >= a.len() && &r[r.len() - a.len()..] == a),
            StrOp::Contains => V::Bool((0..=r.len()).any(|k| r[k..].starts_with(a))),
            StrOp::Equals => V::Bool(r == a),
            StrOp::EqualsIgnoreCase => V::Bool(r.eq_ignore_ascii_case(a)),
            StrOp::Length => V::Int(r.len() as i64),
            StrOp::ToLowerCase => V::Str(r.to_ascii_lowercase()),
            StrOp::ToUpperCase => V::Str(r.to_ascii_uppercase()),
            StrOp::Trim => V::Str(r.trim_matches(' ').to_string()),
            StrOp::Matches => V::Bool(r == a),
            _ => unreachable!(),
        })
    }

    #[test]
    fn concrete_string_ops_match_oracle_on_generated_table() {
        let ops = [
            StrOp::Append,
            StrOp::Concat,
            StrOp::Substring,
            StrOp::StartsWith,
            StrOp::EndsWith,
            StrOp::Contains,
            StrOp::Equals,
            StrOp::EqualsIgnoreCase,
            StrOp::Length,
            StrOp::ToLowerCase,
            StrOp::ToUpperCase,
            StrOp::Trim,
            StrOp::Matches,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alphabet = b"abAB !x";
        let gen = |rng: &mut ChaCha8Rng, max: usize| -> String {
            let n = rng.gen_range(0..=max);
            (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
        };
        for case in 0..200 {
            let op = ops[case % ops.len()];
            let r = gen(&mut rng, 8);
            // bias the argument toward substrings of the receiver
            let a = if rng.gen_bool(0.5) && !r.is_empty() {
                let s = rng.gen_range(0..r.len());
                let e = rng.gen_range(s..=r.len());
                r[s..e].to_string()
            } else {
                gen(&mut rng, 3)
            };
            let i = rng.gen_range(-1..=9i64);
            let j = rng.gen_range(-1..=9i64);
            let recv = SymValue::Str(r.clone());
            let args: Vec<SymValue> = match op {
                StrOp::Substring => vec![SymValue::Int(i), SymValue::Int(j)],
                StrOp::Length | StrOp::ToLowerCase | StrOp::ToUpperCase | StrOp::Trim => vec![],
                // literal patterns only: escape so the regex is a plain match
                StrOp::Matches => vec![SymValue::Str(regex::escape(&a))],
                _ => vec![SymValue::Str(a.clone())],
            };
            let got = eval_concrete_strop(op, Some(&recv), &args);
            let want = oracle(op, &r, &a, i, j);
            assert_eq!(got, want, "case {case}: {op:?} {r:?} {a:?} {i} {j}");
        }
    }
}
