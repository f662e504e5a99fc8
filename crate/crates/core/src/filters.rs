//! Post-detection filters: symbolic triggers, out-of-package code, libraries.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::controldep::LogicBombFinding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Symbolic,
    Package,
    Library,
}

impl FilterKind {
    /// Application order; it only decides attribution.
    pub const ORDER: [FilterKind; 3] = [FilterKind::Symbolic, FilterKind::Package, FilterKind::Library];

    pub fn short(self) -> &'static str {
        match self {
            FilterKind::Symbolic => "sym",
            FilterKind::Package => "pkg",
            FilterKind::Library => "lib",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "sym" | "symbolic" => Ok(FilterKind::Symbolic),
            "pkg" | "package" => Ok(FilterKind::Package),
            "lib" | "library" => Ok(FilterKind::Library),
            other => Err(format!("unknown filter `{other}` (expected sym, pkg or lib)")),
        }
    }
}

/// Parses a comma-separated filter list such as `sym,pkg`.
pub fn parse_filter_list(s: &str) -> Result<BTreeSet<FilterKind>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

const LIBRARY_PREFIXES: &str = include_str!("../data/library_prefixes.txt");

/// One package prefix per line, `#` comments.
pub fn parse_prefixes(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn builtin_library_prefixes() -> Vec<String> {
    parse_prefixes(LIBRARY_PREFIXES)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterConfig {
    pub library_prefixes: Vec<String>,
    pub enable_library: bool,
    pub enable_package: bool,
    pub enable_symbolic: bool,
    pub app_package: Option<String>,
}

impl FilterConfig {
    pub fn enabled(&self) -> BTreeSet<FilterKind> {
        let mut s = BTreeSet::new();
        if self.enable_symbolic {
            s.insert(FilterKind::Symbolic);
        }
        if self.enable_package {
            s.insert(FilterKind::Package);
        }
        if self.enable_library {
            s.insert(FilterKind::Library);
        }
        s
    }

    pub fn with(mut self, kinds: &BTreeSet<FilterKind>) -> Self {
        self.enable_symbolic = kinds.contains(&FilterKind::Symbolic);
        self.enable_package = kinds.contains(&FilterKind::Package);
        self.enable_library = kinds.contains(&FilterKind::Library);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.enable_package && self.app_package.as_deref().is_none_or(str::is_empty) {
            return Err("the package filter needs an application package".into());
        }
        Ok(())
    }
}

/// Dotted-segment prefix test: `io.card` matches `io.card.payment`, not
/// `io.cardboard`.
pub fn package_has_prefix(package: &str, prefix: &str) -> bool {
    package == prefix || package.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.'))
}

fn removes(kind: FilterKind, f: &LogicBombFinding, config: &FilterConfig) -> bool {
    match kind {
        FilterKind::Symbolic => f.check.symbolic,
        FilterKind::Package => match &config.app_package {
            Some(app) => !package_has_prefix(&f.package, app),
            None => false,
        },
        FilterKind::Library => config.library_prefixes.iter().any(|p| package_has_prefix(&f.package, p)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedFinding {
    pub finding: LogicBombFinding,
    pub filter: FilterKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<LogicBombFinding>,
    pub removed: Vec<RemovedFinding>,
}

/// Partitions findings; a removed finding is attributed to the first
/// enabled filter (symbolic, package, library) that rejects it.
pub fn apply_filters(findings: Vec<LogicBombFinding>, config: &FilterConfig) -> FilterOutcome {
    let enabled = config.enabled();
    let mut out = FilterOutcome::default();
    for f in findings {
        match FilterKind::ORDER
            .into_iter()
            .find(|k| enabled.contains(k) && removes(*k, &f, config))
        {
            Some(filter) => out.removed.push(RemovedFinding { finding: f, filter }),
            None => out.kept.push(f),
        }
    }
    out
}
