//! The textual three-address representation (TBIR) of component-structured
//! programs, its parser, pretty-printer and callee resolution.
//!
//! A program is a list of class units. Each unit has a component kind, an
//! optional superclass, marker interfaces, fields and methods. Method bodies
//! are flat statement lists, one statement per line, optionally prefixed by
//! `Label:`.
//!
//! ```text
//! class com.example.Main kind Activity extends android.app.Activity {
//!   field armed : boolean
//!   method onStart() {
//!     local d : java.util.Date
//!     d = invoke java.util.Date.<init>()
//!     ...
//!   }
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    Activity,
    Service,
    BroadcastReceiver,
    ContentProvider,
    BasicClass,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::Activity,
        ComponentKind::Service,
        ComponentKind::BroadcastReceiver,
        ComponentKind::ContentProvider,
        ComponentKind::BasicClass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Activity => "Activity",
            ComponentKind::Service => "Service",
            ComponentKind::BroadcastReceiver => "BroadcastReceiver",
            ComponentKind::ContentProvider => "ContentProvider",
            ComponentKind::BasicClass => "BasicClass",
        }
    }

    /// Short label used in histograms (A, S, BR, CP, BC).
    pub fn short(self) -> &'static str {
        match self {
            ComponentKind::Activity => "A",
            ComponentKind::Service => "S",
            ComponentKind::BroadcastReceiver => "BR",
            ComponentKind::ContentProvider => "CP",
            ComponentKind::BasicClass => "BC",
        }
    }

    pub fn is_component(self) -> bool {
        self != ComponentKind::BasicClass
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown component kind `{s}`"))
    }
}

/// Source position of a statement or declaration (1-based).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: usize,
    pub column: usize,
}

/// Identity of a method: either the synthetic entry method or a declared one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    DummyMain,
    Declared { unit: usize, method: usize },
}

impl MethodId {
    pub fn declared(unit: usize, method: usize) -> Self {
        MethodId::Declared { unit, method }
    }
}

/// A statement: method plus dense statement index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StmtId {
    pub method: MethodId,
    pub index: usize,
}

impl StmtId {
    pub fn new(method: MethodId, index: usize) -> Self {
        StmtId { method, index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FieldRef {
    pub class: String,
    pub name: String,
}

impl fmt::Display for FieldRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.class, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decl {
    pub name: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constant {
    Int(i64),
    Long(i64),
    Str(String),
    Bool(bool),
    Null,
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constant::Int(v) => write!(f, "{v}"),
            Constant::Long(v) => write!(f, "{v}L"),
            Constant::Str(s) => write_quoted(f, s),
            Constant::Bool(b) => write!(f, "{b}"),
            Constant::Null => f.write_str("null"),
        }
    }
}

/// Writes a string literal with the escapes the lexer understands.
pub(crate) fn write_quoted(f: &mut impl fmt::Write, s: &str) -> fmt::Result {
    f.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => f.write_char(c)?,
        }
    }
    f.write_char('"')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Local(String),
    Const(Constant),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Local(n) => f.write_str(n),
            Operand::Const(c) => c.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Place {
    Local(String),
    Field(FieldRef),
}

impl fmt::Display for Place {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Place::Local(n) => f.write_str(n),
            Place::Field(r) => write!(f, "@{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Concat,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Concat => "++",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl RelOp {
    pub fn symbol(self) -> &'static str {
        match self {
            RelOp::Eq => "==",
            RelOp::Ne => "!=",
            RelOp::Lt => "<",
            RelOp::Le => "<=",
            RelOp::Gt => ">",
            RelOp::Ge => ">=",
        }
    }

    pub fn is_ordered(self) -> bool {
        !matches!(self, RelOp::Eq | RelOp::Ne)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rhs {
    Operand(Operand),
    Field(FieldRef),
    Binary(BinOp, Operand, Operand),
}

/// A branch target: the label text plus the statement index it resolves to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub label: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StmtKind {
    Assign {
        dest: Place,
        rhs: Rhs,
    },
    IfGoto {
        lhs: Operand,
        op: RelOp,
        rhs: Operand,
        target: Target,
    },
    Goto(Target),
    Return(Option<Operand>),
    Invoke {
        dest: Option<Place>,
        callee: String,
        args: Vec<Operand>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stmt {
    pub labels: Vec<String>,
    pub kind: StmtKind,
    pub pos: Pos,
}

impl Stmt {
    pub fn new(kind: StmtKind) -> Self {
        Stmt {
            labels: Vec::new(),
            kind,
            pos: Pos::default(),
        }
    }

    pub fn is_branch(&self) -> bool {
        matches!(self.kind, StmtKind::IfGoto { .. })
    }

    /// Locals read by this statement, in operand order.
    pub fn reads(&self) -> Vec<&str> {
        let ops: Vec<&Operand> = match &self.kind {
            StmtKind::Assign { rhs, .. } => match rhs {
                Rhs::Operand(o) => vec![o],
                Rhs::Field(_) => vec![],
                Rhs::Binary(_, a, b) => vec![a, b],
            },
            StmtKind::IfGoto { lhs, rhs, .. } => vec![lhs, rhs],
            StmtKind::Goto(_) => vec![],
            StmtKind::Return(o) => o.iter().collect(),
            StmtKind::Invoke { args, .. } => args.iter().collect(),
        };
        ops.into_iter()
            .filter_map(|o| match o {
                Operand::Local(n) => Some(n.as_str()),
                Operand::Const(_) => None,
            })
            .collect()
    }
}

impl fmt::Display for StmtKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StmtKind::Assign { dest, rhs } => {
                write!(f, "{dest} = ")?;
                match rhs {
                    Rhs::Operand(o) => write!(f, "{o}"),
                    Rhs::Field(r) => write!(f, "@{r}"),
                    Rhs::Binary(op, a, b) => write!(f, "{a} {} {b}", op.symbol()),
                }
            }
            StmtKind::IfGoto {
                lhs,
                op,
                rhs,
                target,
            } => write!(f, "if {lhs} {} {rhs} goto {}", op.symbol(), target.label),
            StmtKind::Goto(t) => write!(f, "goto {}", t.label),
            StmtKind::Return(None) => f.write_str("return"),
            StmtKind::Return(Some(o)) => write!(f, "return {o}"),
            StmtKind::Invoke { dest, callee, args } => {
                if let Some(d) = dest {
                    write!(f, "{d} = ")?;
                }
                write!(f, "invoke {callee}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_char(')')
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodDef {
    pub name: String,
    pub params: Vec<Decl>,
    pub locals: Vec<Decl>,
    pub body: Vec<Stmt>,
    pub is_static: bool,
    pub is_abstract: bool,
    pub pos: Pos,
}

impl MethodDef {
    pub fn new(name: impl Into<String>) -> Self {
        MethodDef {
            name: name.into(),
            params: Vec::new(),
            locals: Vec::new(),
            body: Vec::new(),
            is_static: false,
            is_abstract: false,
            pos: Pos::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassUnit {
    pub qualified_name: String,
    pub package: String,
    pub kind: ComponentKind,
    pub extends: Option<String>,
    pub implements: Vec<String>,
    pub fields: Vec<Decl>,
    pub methods: Vec<MethodDef>,
    pub pos: Pos,
}

impl ClassUnit {
    /// Superclass followed by marker interfaces.
    pub fn supers(&self) -> impl Iterator<Item = &str> {
        self.extends
            .iter()
            .chain(self.implements.iter())
            .map(String::as_str)
    }

    pub fn method_index(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&Decl> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub source_id: String,
    pub units: Vec<ClassUnit>,
}

pub fn package_of(qualified_name: &str) -> &str {
    qualified_name
        .rsplit_once('.')
        .map(|(p, _)| p)
        .unwrap_or("")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{column}: expected {expected}, found {found}")]
    Syntax {
        line: usize,
        column: usize,
        expected: String,
        found: String,
    },
    #[error("{line}: duplicate {what} `{name}`")]
    DuplicateName {
        what: &'static str,
        name: String,
        line: usize,
    },
    #[error("{line}: unresolved label `{label}` in method `{method}`")]
    UnresolvedLabel {
        label: String,
        method: String,
        line: usize,
    },
}

impl ParseError {
    pub fn line(&self) -> usize {
        match self {
            ParseError::Syntax { line, .. }
            | ParseError::DuplicateName { line, .. }
            | ParseError::UnresolvedLabel { line, .. } => *line,
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Long(i64),
    Str(String),
    At,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Colon,
    Assign,
    Rel(RelOp),
    Plus,
    Minus,
    Star,
    Concat,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Long(v) => write!(f, "`{v}L`"),
            Tok::Str(s) => write!(f, "string {s:?}"),
            Tok::At => f.write_str("`@`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::Assign => f.write_str("`=`"),
            Tok::Rel(op) => write!(f, "`{}`", op.symbol()),
            Tok::Plus => f.write_str("`+`"),
            Tok::Minus => f.write_str("`-`"),
            Tok::Star => f.write_str("`*`"),
            Tok::Concat => f.write_str("`++`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

fn syntax(line: usize, column: usize, expected: impl Into<String>, found: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        column,
        expected: expected.into(),
        found: found.into(),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$'
}

fn lex_line(line_no: usize, text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            break;
        }
        let simple = match c {
            '@' => Some(Tok::At),
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            ':' => Some(Tok::Colon),
            '*' => Some(Tok::Star),
            '-' => Some(Tok::Minus),
            _ => None,
        };
        if let Some(tok) = simple {
            out.push(Token { tok, col });
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied();
        match c {
            '+' => {
                if next == Some('+') {
                    out.push(Token { tok: Tok::Concat, col });
                    i += 2;
                } else {
                    out.push(Token { tok: Tok::Plus, col });
                    i += 1;
                }
                continue;
            }
            '=' => {
                if next == Some('=') {
                    out.push(Token { tok: Tok::Rel(RelOp::Eq), col });
                    i += 2;
                } else {
                    out.push(Token { tok: Tok::Assign, col });
                    i += 1;
                }
                continue;
            }
            '!' => {
                if next == Some('=') {
                    out.push(Token { tok: Tok::Rel(RelOp::Ne), col });
                    i += 2;
                    continue;
                }
                return Err(syntax(line_no, col, "`!=`", "`!`"));
            }
            '<' | '>' => {
                let (op, len) = match (c, next) {
                    ('<', Some('=')) => (RelOp::Le, 2),
                    ('<', _) => (RelOp::Lt, 1),
                    ('>', Some('=')) => (RelOp::Ge, 2),
                    _ => (RelOp::Gt, 1),
                };
                out.push(Token { tok: Tok::Rel(op), col });
                i += len;
                continue;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(syntax(line_no, col, "closing `\"`", "end of line")),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            let esc = chars.get(i + 1).copied();
                            match esc {
                                Some('n') => s.push('\n'),
                                Some('t') => s.push('\t'),
                                Some('"') => s.push('"'),
                                Some('\\') => s.push('\\'),
                                other => {
                                    return Err(syntax(
                                        line_no,
                                        i + 1,
                                        "escape sequence",
                                        format!("{other:?}"),
                                    ))
                                }
                            }
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Token { tok: Tok::Str(s), col });
                continue;
            }
            _ => {}
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let digits: String = chars[start..i].iter().collect();
            let value: i64 = digits
                .parse()
                .map_err(|_| syntax(line_no, col, "integer literal", digits.clone()))?;
            if matches!(chars.get(i), Some('L') | Some('l')) {
                i += 1;
                out.push(Token { tok: Tok::Long(value), col });
            } else {
                out.push(Token { tok: Tok::Int(value), col });
            }
            if chars.get(i).is_some_and(|&c| is_ident_char(c)) {
                return Err(syntax(line_no, i + 1, "separator after number", chars[i].to_string()));
            }
            continue;
        }
        if is_ident_start(c) {
            let mut s = String::new();
            loop {
                while i < chars.len() && is_ident_char(chars[i]) {
                    s.push(chars[i]);
                    i += 1;
                }
                if chars.get(i) != Some(&'.') {
                    break;
                }
                let rest: String = chars[i + 1..].iter().take(8).collect();
                if rest.starts_with("<init>") {
                    s.push_str(".<init>");
                    i += 7;
                    break;
                }
                if rest.starts_with("<clinit>") {
                    s.push_str(".<clinit>");
                    i += 9;
                    break;
                }
                if chars.get(i + 1).is_some_and(|&c| is_ident_start(c)) {
                    s.push('.');
                    i += 1;
                } else {
                    return Err(syntax(line_no, i + 2, "identifier after `.`", rest));
                }
            }
            out.push(Token { tok: Tok::Ident(s), col });
            continue;
        }
        return Err(syntax(line_no, col, "token", c.to_string()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

struct Line<'a> {
    no: usize,
    toks: &'a [Token],
    at: usize,
    len: usize,
}

impl<'a> Line<'a> {
    fn new(no: usize, toks: &'a [Token], len: usize) -> Self {
        Line { no, toks, at: 0, len }
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.at).map(|t| &t.tok)
    }

    fn peek2(&self) -> Option<&'a Tok> {
        self.toks.get(self.at + 1).map(|t| &t.tok)
    }

    fn col(&self) -> usize {
        self.toks.get(self.at).map(|t| t.col).unwrap_or(self.len + 1)
    }

    fn found(&self) -> String {
        self.peek()
            .map(|t| t.to_string())
            .unwrap_or_else(|| "end of line".to_string())
    }

    fn err(&self, expected: &str) -> ParseError {
        syntax(self.no, self.col(), expected, self.found())
    }

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.peek();
        if t.is_some() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, tok: &Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(tok) {
            self.at += 1;
            Ok(())
        } else {
            Err(self.err(what))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                self.at += 1;
                Ok(s.clone())
            }
            _ => Err(self.err(what)),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.at += 1;
                Ok(())
            }
            _ => Err(self.err(&format!("`{kw}`"))),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == kw)
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.peek().is_none() {
            Ok(())
        } else {
            Err(self.err("end of line"))
        }
    }

    fn simple_name(&mut self, what: &str) -> Result<String, ParseError> {
        let col = self.col();
        let name = self.ident(what)?;
        if name.contains('.') {
            return Err(syntax(self.no, col, what, format!("`{name}`")));
        }
        Ok(name)
    }
}

const KEYWORDS: &[&str] = &[
    "class", "kind", "extends", "implements", "field", "method", "static", "abstract", "local",
    "if", "goto", "return", "invoke", "true", "false", "null",
];

struct MethodBuilder {
    def: MethodDef,
    pending_labels: Vec<(String, usize)>,
    raw_targets: Vec<(usize, String, usize)>,
}

/// Parses TBIR source text into a [`Program`].
pub fn parse_program(text: &str, source_id: &str) -> Result<Program, ParseError> {
    let mut units: Vec<ClassUnit> = Vec::new();
    let mut unit: Option<ClassUnit> = None;
    let mut method: Option<MethodBuilder> = None;

    for (idx, raw) in text.lines().enumerate() {
        let no = idx + 1;
        let toks = lex_line(no, raw)?;
        if toks.is_empty() {
            continue;
        }
        let mut line = Line::new(no, &toks, raw.chars().count());

        if let Some(mb) = method.as_mut() {
            if line.peek() == Some(&Tok::RBrace) {
                line.next();
                line.end()?;
                let mb = method.take().expect("method in progress");
                let def = finish_method(mb, no)?;
                let u = unit.as_mut().expect("unit in progress");
                if u.method_index(&def.name).is_some() {
                    return Err(ParseError::DuplicateName {
                        what: "method",
                        name: def.name,
                        line: def.pos.line,
                    });
                }
                u.methods.push(def);
                continue;
            }
            parse_method_line(&mut line, mb, unit.as_ref().expect("unit"))?;
            continue;
        }

        if let Some(u) = unit.as_mut() {
            if line.peek() == Some(&Tok::RBrace) {
                line.next();
                line.end()?;
                let done = unit.take().expect("unit in progress");
                if units.iter().any(|x| x.qualified_name == done.qualified_name) {
                    return Err(ParseError::DuplicateName {
                        what: "class",
                        name: done.qualified_name,
                        line: done.pos.line,
                    });
                }
                units.push(done);
                continue;
            }
            if line.is_keyword("field") {
                line.next();
                let name = line.simple_name("field name")?;
                line.expect(&Tok::Colon, "`:`")?;
                let kind = line.ident("field type")?;
                line.end()?;
                if u.field(&name).is_some() {
                    return Err(ParseError::DuplicateName {
                        what: "field",
                        name,
                        line: no,
                    });
                }
                u.fields.push(Decl { name, kind });
                continue;
            }
            let mut is_static = false;
            let mut is_abstract = false;
            let col = line.col();
            loop {
                if line.is_keyword("static") {
                    line.next();
                    is_static = true;
                } else if line.is_keyword("abstract") {
                    line.next();
                    is_abstract = true;
                } else {
                    break;
                }
            }
            if !line.is_keyword("method") {
                return Err(line.err("`field`, `method` or `}`"));
            }
            line.next();
            let name = line.ident("method name")?;
            if name.contains('.') && name != "<init>" {
                return Err(syntax(no, col, "method name", format!("`{name}`")));
            }
            let params = parse_params(&mut line)?;
            let mut def = MethodDef::new(name);
            def.params = params;
            def.is_static = is_static;
            def.is_abstract = is_abstract;
            def.pos = Pos { line: no, column: col };
            if is_abstract {
                line.end()?;
                if u.method_index(&def.name).is_some() {
                    return Err(ParseError::DuplicateName {
                        what: "method",
                        name: def.name,
                        line: no,
                    });
                }
                u.methods.push(def);
            } else {
                line.expect(&Tok::LBrace, "`{`")?;
                line.end()?;
                method = Some(MethodBuilder {
                    def,
                    pending_labels: Vec::new(),
                    raw_targets: Vec::new(),
                });
            }
            continue;
        }

        // top level
        let col = line.col();
        line.keyword("class")?;
        let qualified_name = line.ident("class name")?;
        line.keyword("kind")?;
        let kcol = line.col();
        let kind_name = line.ident("component kind")?;
        let kind: ComponentKind = kind_name
            .parse()
            .map_err(|_| syntax(no, kcol, "component kind", format!("`{kind_name}`")))?;
        let mut extends = None;
        let mut implements = Vec::new();
        if line.is_keyword("extends") {
            line.next();
            extends = Some(line.ident("superclass name")?);
        }
        if line.is_keyword("implements") {
            line.next();
            implements.push(line.ident("interface name")?);
            while line.peek() == Some(&Tok::Comma) {
                line.next();
                implements.push(line.ident("interface name")?);
            }
        }
        line.expect(&Tok::LBrace, "`{`")?;
        line.end()?;
        unit = Some(ClassUnit {
            package: package_of(&qualified_name).to_string(),
            qualified_name,
            kind,
            extends,
            implements,
            fields: Vec::new(),
            methods: Vec::new(),
            pos: Pos { line: no, column: col },
        });
    }

    let last = text.lines().count();
    if method.is_some() || unit.is_some() {
        return Err(syntax(last + 1, 1, "`}`", "end of input"));
    }
    Ok(Program {
        source_id: source_id.to_string(),
        units,
    })
}

fn parse_params(line: &mut Line<'_>) -> Result<Vec<Decl>, ParseError> {
    line.expect(&Tok::LParen, "`(`")?;
    let mut params = Vec::new();
    if line.peek() == Some(&Tok::RParen) {
        line.next();
        return Ok(params);
    }
    loop {
        let name = line.simple_name("parameter name")?;
        line.expect(&Tok::Colon, "`:`")?;
        let kind = line.ident("parameter type")?;
        if params.iter().any(|p: &Decl| p.name == name) {
            return Err(ParseError::DuplicateName {
                what: "parameter",
                name,
                line: line.no,
            });
        }
        params.push(Decl { name, kind });
        match line.next() {
            Some(Tok::Comma) => continue,
            Some(Tok::RParen) => break,
            _ => {
                line.at = line.at.saturating_sub(1);
                return Err(line.err("`,` or `)`"));
            }
        }
    }
    Ok(params)
}

fn parse_method_line(
    line: &mut Line<'_>,
    mb: &mut MethodBuilder,
    unit: &ClassUnit,
) -> Result<(), ParseError> {
    if line.is_keyword("local") {
        line.next();
        let name = line.simple_name("local name")?;
        line.expect(&Tok::Colon, "`:`")?;
        let kind = line.ident("local type")?;
        line.end()?;
        let def = &mb.def;
        if def.locals.iter().chain(def.params.iter()).any(|d| d.name == name) || name == "this" {
            return Err(ParseError::DuplicateName {
                what: "local",
                name,
                line: line.no,
            });
        }
        mb.def.locals.push(Decl { name, kind });
        return Ok(());
    }

    // label prefixes
    while let (Some(Tok::Ident(name)), Some(Tok::Colon)) = (line.peek(), line.peek2()) {
        if name.contains('.') || KEYWORDS.contains(&name.as_str()) {
            return Err(line.err("label or statement"));
        }
        let index = mb.def.body.len();
        let dup = mb.pending_labels.iter().any(|(l, _)| l == name)
            || mb.def.body.iter().any(|s| s.labels.contains(name));
        if dup {
            return Err(ParseError::DuplicateName {
                what: "label",
                name: name.clone(),
                line: line.no,
            });
        }
        mb.pending_labels.push((name.clone(), index));
        line.next();
        line.next();
    }
    if line.peek().is_none() {
        return Ok(());
    }

    let col = line.col();
    let kind = parse_stmt(line, mb, unit)?;
    line.end()?;
    let labels = mb.pending_labels.drain(..).map(|(l, _)| l).collect();
    mb.def.body.push(Stmt {
        labels,
        kind,
        pos: Pos { line: line.no, column: col },
    });
    Ok(())
}

fn parse_stmt(
    line: &mut Line<'_>,
    mb: &mut MethodBuilder,
    unit: &ClassUnit,
) -> Result<StmtKind, ParseError> {
    let index = mb.def.body.len();
    if line.is_keyword("goto") {
        line.next();
        let label = line.simple_name("label")?;
        mb.raw_targets.push((index, label.clone(), line.no));
        return Ok(StmtKind::Goto(Target { label, index: 0 }));
    }
    if line.is_keyword("return") {
        line.next();
        if line.peek().is_none() {
            return Ok(StmtKind::Return(None));
        }
        let o = parse_operand(line, mb)?;
        return Ok(StmtKind::Return(Some(o)));
    }
    if line.is_keyword("if") {
        line.next();
        let lhs = parse_operand(line, mb)?;
        let op = match line.next() {
            Some(Tok::Rel(op)) => *op,
            _ => {
                line.at -= 1;
                return Err(line.err("relational operator"));
            }
        };
        let rhs = parse_operand(line, mb)?;
        line.keyword("goto")?;
        let label = line.simple_name("label")?;
        mb.raw_targets.push((index, label.clone(), line.no));
        return Ok(StmtKind::IfGoto {
            lhs,
            op,
            rhs,
            target: Target { label, index: 0 },
        });
    }
    if line.is_keyword("invoke") {
        let (callee, args) = parse_invoke(line, mb)?;
        return Ok(StmtKind::Invoke {
            dest: None,
            callee,
            args,
        });
    }

    let dest = parse_place(line, mb, unit)?;
    line.expect(&Tok::Assign, "`=`")?;
    if line.is_keyword("invoke") {
        let (callee, args) = parse_invoke(line, mb)?;
        return Ok(StmtKind::Invoke {
            dest: Some(dest),
            callee,
            args,
        });
    }
    if line.peek() == Some(&Tok::At) {
        let field = parse_field_ref(line, unit)?;
        return Ok(StmtKind::Assign {
            dest,
            rhs: Rhs::Field(field),
        });
    }
    let a = parse_operand(line, mb)?;
    let op = match line.peek() {
        Some(Tok::Plus) => Some(BinOp::Add),
        Some(Tok::Minus) => Some(BinOp::Sub),
        Some(Tok::Star) => Some(BinOp::Mul),
        Some(Tok::Concat) => Some(BinOp::Concat),
        _ => None,
    };
    let rhs = match op {
        Some(op) => {
            line.next();
            let b = parse_operand(line, mb)?;
            Rhs::Binary(op, a, b)
        }
        None => Rhs::Operand(a),
    };
    Ok(StmtKind::Assign { dest, rhs })
}

fn parse_place(line: &mut Line<'_>, mb: &MethodBuilder, unit: &ClassUnit) -> Result<Place, ParseError> {
    if line.peek() == Some(&Tok::At) {
        return Ok(Place::Field(parse_field_ref(line, unit)?));
    }
    let col = line.col();
    let name = line.simple_name("statement")?;
    if KEYWORDS.contains(&name.as_str()) {
        return Err(syntax(line.no, col, "statement", format!("`{name}`")));
    }
    check_local(line.no, col, &name, &mb.def)?;
    Ok(Place::Local(name))
}

fn parse_field_ref(line: &mut Line<'_>, unit: &ClassUnit) -> Result<FieldRef, ParseError> {
    line.expect(&Tok::At, "`@`")?;
    let col = line.col();
    let path = line.ident("field reference")?;
    match path.rsplit_once('.') {
        Some((class, name)) => Ok(FieldRef {
            class: class.to_string(),
            name: name.to_string(),
        }),
        None => {
            if unit.field(&path).is_none() {
                return Err(syntax(line.no, col, "declared field", format!("`{path}`")));
            }
            Ok(FieldRef {
                class: unit.qualified_name.clone(),
                name: path,
            })
        }
    }
}

fn parse_invoke(line: &mut Line<'_>, mb: &MethodBuilder) -> Result<(String, Vec<Operand>), ParseError> {
    line.keyword("invoke")?;
    let col = line.col();
    let callee = line.ident("method signature")?;
    if !callee.contains('.') {
        return Err(syntax(line.no, col, "qualified method signature", format!("`{callee}`")));
    }
    line.expect(&Tok::LParen, "`(`")?;
    let mut args = Vec::new();
    if line.peek() == Some(&Tok::RParen) {
        line.next();
        return Ok((callee, args));
    }
    loop {
        args.push(parse_operand(line, mb)?);
        match line.next() {
            Some(Tok::Comma) => continue,
            Some(Tok::RParen) => break,
            _ => {
                line.at = line.at.saturating_sub(1);
                return Err(line.err("`,` or `)`"));
            }
        }
    }
    Ok((callee, args))
}

fn parse_operand(line: &mut Line<'_>, mb: &MethodBuilder) -> Result<Operand, ParseError> {
    let col = line.col();
    let negative = if line.peek() == Some(&Tok::Minus) {
        line.next();
        true
    } else {
        false
    };
    let sign = if negative { -1 } else { 1 };
    match line.peek() {
        Some(Tok::Int(v)) => {
            line.next();
            Ok(Operand::Const(Constant::Int(sign * v)))
        }
        Some(Tok::Long(v)) => {
            line.next();
            Ok(Operand::Const(Constant::Long(sign * v)))
        }
        _ if negative => Err(line.err("numeric literal")),
        Some(Tok::Str(s)) => {
            line.next();
            Ok(Operand::Const(Constant::Str(s.clone())))
        }
        Some(Tok::Ident(s)) => {
            let s = s.clone();
            match s.as_str() {
                "true" => {
                    line.next();
                    Ok(Operand::Const(Constant::Bool(true)))
                }
                "false" => {
                    line.next();
                    Ok(Operand::Const(Constant::Bool(false)))
                }
                "null" => {
                    line.next();
                    Ok(Operand::Const(Constant::Null))
                }
                _ if s.contains('.') || KEYWORDS.contains(&s.as_str()) => Err(line.err("operand")),
                _ => {
                    line.next();
                    check_local(line.no, col, &s, &mb.def)?;
                    Ok(Operand::Local(s))
                }
            }
        }
        _ => Err(line.err("operand")),
    }
}

fn check_local(line: usize, col: usize, name: &str, def: &MethodDef) -> Result<(), ParseError> {
    let declared = (name == "this" && !def.is_static)
        || def.params.iter().chain(def.locals.iter()).any(|d| d.name == name);
    if declared {
        Ok(())
    } else {
        Err(syntax(line, col, "declared local", format!("`{name}`")))
    }
}

fn finish_method(mut mb: MethodBuilder, close_line: usize) -> Result<MethodDef, ParseError> {
    if let Some((label, _)) = mb.pending_labels.first() {
        return Err(syntax(close_line, 1, format!("statement after label `{label}`"), "`}`"));
    }
    let mut labels: HashMap<String, usize> = HashMap::new();
    for (i, s) in mb.def.body.iter().enumerate() {
        for l in &s.labels {
            labels.insert(l.clone(), i);
        }
    }
    for (index, label, line) in mb.raw_targets.drain(..) {
        let Some(&target) = labels.get(&label) else {
            return Err(ParseError::UnresolvedLabel {
                label,
                method: mb.def.name.clone(),
                line,
            });
        };
        match &mut mb.def.body[index].kind {
            StmtKind::IfGoto { target: t, .. } | StmtKind::Goto(t) => t.index = target,
            _ => unreachable!("target recorded for non-branch"),
        }
    }
    if let Some(last) = mb.def.body.last() {
        if last.is_branch() {
            return Err(syntax(
                last.pos.line,
                last.pos.column,
                "a statement after the conditional branch (fall-through target)",
                "end of method",
            ));
        }
    }
    Ok(mb.def)
}

// ---------------------------------------------------------------------------
// Pretty printing

impl fmt::Display for MethodDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("  ")?;
        if self.is_static {
            f.write_str("static ")?;
        }
        if self.is_abstract {
            f.write_str("abstract ")?;
        }
        write!(f, "method {}(", self.name)?;
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}: {}", p.name, p.kind)?;
        }
        f.write_char(')')?;
        if self.is_abstract {
            return f.write_char('\n');
        }
        f.write_str(" {\n")?;
        for l in &self.locals {
            writeln!(f, "    local {} : {}", l.name, l.kind)?;
        }
        for s in &self.body {
            f.write_str("    ")?;
            for l in &s.labels {
                write!(f, "{l}: ")?;
            }
            writeln!(f, "{}", s.kind)?;
        }
        f.write_str("  }\n")
    }
}

impl fmt::Display for ClassUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class {} kind {}", self.qualified_name, self.kind)?;
        if let Some(e) = &self.extends {
            write!(f, " extends {e}")?;
        }
        if !self.implements.is_empty() {
            write!(f, " implements {}", self.implements.join(", "))?;
        }
        f.write_str(" {\n")?;
        for fd in &self.fields {
            writeln!(f, "  field {} : {}", fd.name, fd.kind)?;
        }
        for m in &self.methods {
            m.fmt(f)?;
        }
        f.write_str("}\n")
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, u) in self.units.iter().enumerate() {
            if i > 0 {
                f.write_char('\n')?;
            }
            u.fmt(f)?;
        }
        Ok(())
    }
}

impl Program {
    /// Copy of the program with all source positions cleared, for structural
    /// comparison.
    pub fn without_positions(&self) -> Program {
        let mut p = self.clone();
        for u in &mut p.units {
            u.pos = Pos::default();
            for m in &mut u.methods {
                m.pos = Pos::default();
                for s in &mut m.body {
                    s.pos = Pos::default();
                }
            }
        }
        p
    }

    pub fn unit_index(&self, qualified_name: &str) -> Option<usize> {
        self.units.iter().position(|u| u.qualified_name == qualified_name)
    }

    pub fn method(&self, unit: usize, method: usize) -> &MethodDef {
        &self.units[unit].methods[method]
    }

    /// Declared kind of a field, when the owning class is declared here.
    pub fn field_kind(&self, field: &FieldRef) -> Option<&str> {
        let u = self.unit_index(&field.class)?;
        self.units[u].field(&field.name).map(|d| d.kind.as_str())
    }

    /// Application package implied by the component units: their longest
    /// common dotted prefix, or the first component's package when they share
    /// none. `None` without components.
    pub fn application_package(&self) -> Option<String> {
        let mut comps = self
            .units
            .iter()
            .filter(|u| u.kind.is_component() && !u.package.is_empty())
            .map(|u| u.package.as_str());
        let first = comps.next()?;
        let mut common: Vec<&str> = first.split('.').collect();
        for p in comps {
            let n = common.iter().zip(p.split('.')).take_while(|(a, b)| *a == b).count();
            common.truncate(n);
        }
        if common.is_empty() {
            Some(first.to_string())
        } else {
            Some(common.join("."))
        }
    }
}

// ---------------------------------------------------------------------------
// Callee resolution

/// Resolution of one invoke signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Callee {
    /// The class is declared in the program. `dispatch` lists, for every
    /// declared subtype of the static class, the concrete method a call on an
    /// instance of that subtype runs. An empty list means no body exists
    /// (e.g. an implicit constructor).
    Internal {
        class: String,
        method: String,
        is_static: bool,
        dispatch: Vec<(usize, MethodId)>,
    },
    /// Framework or library method, identified by its dotted signature.
    External(String),
}

impl Callee {
    /// Class-hierarchy candidate targets (deduplicated, sorted).
    pub fn targets(&self) -> Vec<MethodId> {
        match self {
            Callee::Internal { dispatch, .. } => {
                let set: BTreeSet<MethodId> = dispatch.iter().map(|(_, m)| *m).collect();
                set.into_iter().collect()
            }
            Callee::External(_) => Vec::new(),
        }
    }

    pub fn is_constructor(&self) -> bool {
        matches!(self, Callee::Internal { method, .. } if method == "<init>")
    }
}

/// Declared type hierarchy of a program.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    index: HashMap<String, usize>,
    subtypes: Vec<BTreeSet<usize>>,
}

impl Hierarchy {
    pub fn new(program: &Program) -> Self {
        let index: HashMap<String, usize> = program
            .units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.qualified_name.clone(), i))
            .collect();
        let n = program.units.len();
        let mut direct_subs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, u) in program.units.iter().enumerate() {
            for s in u.supers() {
                if let Some(&p) = index.get(s) {
                    direct_subs[p].push(i);
                }
            }
        }
        let mut subtypes = Vec::with_capacity(n);
        for root in 0..n {
            let mut seen = BTreeSet::new();
            let mut queue = VecDeque::from([root]);
            while let Some(x) = queue.pop_front() {
                if seen.insert(x) {
                    queue.extend(direct_subs[x].iter().copied());
                }
            }
            subtypes.push(seen);
        }
        Hierarchy { index, subtypes }
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Declared subtypes of `unit`, itself included.
    pub fn subtypes(&self, unit: usize) -> &BTreeSet<usize> {
        &self.subtypes[unit]
    }

    /// The concrete method an instance of `unit` runs for `name`, following
    /// the superclass chain through declared classes.
    pub fn dispatch(&self, program: &Program, unit: usize, name: &str) -> Option<MethodId> {
        let mut cur = Some(unit);
        let mut guard = 0;
        while let Some(u) = cur {
            let cu = &program.units[u];
            if let Some(m) = cu.method_index(name) {
                if !cu.methods[m].is_abstract {
                    return Some(MethodId::declared(u, m));
                }
            }
            cur = cu.extends.as_deref().and_then(|e| self.unit_index(e));
            guard += 1;
            if guard > program.units.len() {
                break;
            }
        }
        None
    }

    /// Static lookup of a method declaration through the class and its
    /// declared supertypes.
    fn declaration(&self, program: &Program, unit: usize, name: &str) -> Option<(usize, usize)> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([unit]);
        while let Some(u) = queue.pop_front() {
            if !seen.insert(u) {
                continue;
            }
            let cu = &program.units[u];
            if let Some(m) = cu.method_index(name) {
                return Some((u, m));
            }
            for s in cu.supers() {
                if let Some(p) = self.unit_index(s) {
                    queue.push_back(p);
                }
            }
        }
        None
    }

    /// First undeclared class on the superclass chain.
    fn external_super<'p>(&self, program: &'p Program, unit: usize) -> Option<&'p str> {
        let mut cur = unit;
        for _ in 0..=program.units.len() {
            let e = program.units[cur].extends.as_deref()?;
            match self.unit_index(e) {
                Some(p) => cur = p,
                None => return Some(e),
            }
        }
        None
    }

    /// Resolves a dotted `pkg.Class.method` signature.
    pub fn resolve(&self, program: &Program, signature: &str) -> Callee {
        let Some((class, method)) = signature.rsplit_once('.') else {
            return Callee::External(signature.to_string());
        };
        let Some(unit) = self.unit_index(class) else {
            return Callee::External(signature.to_string());
        };
        if method == "<init>" {
            let dispatch = program.units[unit]
                .method_index("<init>")
                .map(|m| vec![(unit, MethodId::declared(unit, m))])
                .unwrap_or_default();
            return Callee::Internal {
                class: class.to_string(),
                method: method.to_string(),
                is_static: false,
                dispatch,
            };
        }
        match self.declaration(program, unit, method) {
            Some((du, dm)) => {
                let decl = &program.units[du].methods[dm];
                let dispatch = if decl.is_static {
                    vec![(du, MethodId::declared(du, dm))]
                } else {
                    self.subtypes(unit)
                        .iter()
                        .filter_map(|&s| self.dispatch(program, s, method).map(|m| (s, m)))
                        .collect()
                };
                Callee::Internal {
                    class: class.to_string(),
                    method: method.to_string(),
                    is_static: decl.is_static,
                    dispatch,
                }
            }
            None => match self.external_super(program, unit) {
                Some(sup) => Callee::External(format!("{sup}.{method}")),
                None => Callee::External(signature.to_string()),
            },
        }
    }
}

/// Maps every invoke site of declared methods to its resolution.
pub fn resolve_callees(program: &Program) -> BTreeMap<StmtId, Callee> {
    let h = Hierarchy::new(program);
    let mut out = BTreeMap::new();
    for (ui, u) in program.units.iter().enumerate() {
        for (mi, m) in u.methods.iter().enumerate() {
            for (si, s) in m.body.iter().enumerate() {
                if let StmtKind::Invoke { callee, .. } = &s.kind {
                    out.insert(
                        StmtId::new(MethodId::declared(ui, mi), si),
                        h.resolve(program, callee),
                    );
                }
            }
        }
    }
    out
}

/// Renders a program back to TBIR text.
pub fn pretty(program: &Program) -> String {
    let mut s = String::new();
    let _ = write!(s, "{program}");
    s
}
