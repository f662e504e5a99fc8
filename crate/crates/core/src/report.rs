//! Per-program analysis reports and their JSON/text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classify::RemovedCheck;
use crate::controldep::LogicBombFinding;
use crate::filters::RemovedFinding;
use crate::ir::ComponentKind;
use crate::symex::TriggerKind;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Timeout,
    Error,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Timeout => "timeout",
            Status::Error => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseDurations {
    pub parse: f64,
    pub graphs: f64,
    pub symex: f64,
    pub predicate_recovery: f64,
    pub classification: f64,
    pub controldep: f64,
    pub filters: f64,
}

/// Configuration echoed into every report.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub callgraph: String,
    pub filters: Vec<String>,
    pub app_package: Option<String>,
    pub library_prefixes: usize,
    pub sensitive_list: String,
    pub sensitive_entries: usize,
    pub catalog_entries: usize,
    pub atom_cap: usize,
    pub formula_cap: usize,
    pub max_depth: usize,
    pub switch_depth: usize,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnalysisStats {
    pub units: usize,
    pub reachable_methods: usize,
    pub instructions: usize,
    pub conditions: usize,
    pub callgraph_edges: usize,
    pub suspicious_checks: usize,
    pub unknown_predicates: usize,
    pub partial_predicates: usize,
    pub symex_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub source_id: String,
    pub status: Status,
    pub error: Option<String>,
    pub duration_ms: f64,
    pub phase_durations: PhaseDurations,
    pub findings: Vec<LogicBombFinding>,
    pub removed_findings: Vec<RemovedFinding>,
    /// Checks dropped by the obvious-check post-filter, with reasons.
    pub removed_checks: Vec<RemovedCheck>,
    pub counts_by_trigger: BTreeMap<String, usize>,
    pub component_histogram: BTreeMap<String, usize>,
    pub starting_component_histogram: BTreeMap<String, usize>,
    pub formula_size_histogram: BTreeMap<usize, usize>,
    pub guarded_count_histogram: BTreeMap<usize, usize>,
    pub nested_findings: usize,
    pub stats: AnalysisStats,
    pub diagnostics: Vec<String>,
    pub config: ConfigEcho,
}

fn zeroed_components() -> BTreeMap<String, usize> {
    ComponentKind::ALL.iter().map(|k| (k.short().to_string(), 0)).collect()
}

impl AnalysisReport {
    pub fn new(source_id: &str, config: ConfigEcho) -> Self {
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            source_id: source_id.to_string(),
            status: Status::Ok,
            error: None,
            duration_ms: 0.0,
            phase_durations: PhaseDurations::default(),
            findings: Vec::new(),
            removed_findings: Vec::new(),
            removed_checks: Vec::new(),
            counts_by_trigger: TriggerKind::ALL.iter().map(|k| (k.as_str().to_string(), 0)).collect(),
            component_histogram: zeroed_components(),
            starting_component_histogram: zeroed_components(),
            formula_size_histogram: BTreeMap::new(),
            guarded_count_histogram: BTreeMap::new(),
            nested_findings: 0,
            stats: AnalysisStats::default(),
            diagnostics: Vec::new(),
            config,
        }
    }

    pub fn error(source_id: &str, config: ConfigEcho, message: String) -> Self {
        let mut r = Self::new(source_id, config);
        r.status = Status::Error;
        r.error = Some(message);
        r
    }

    /// Recomputes every count and histogram from `findings`.
    pub fn recount(&mut self) {
        for v in self.counts_by_trigger.values_mut() {
            *v = 0;
        }
        self.component_histogram = zeroed_components();
        self.starting_component_histogram = zeroed_components();
        self.formula_size_histogram.clear();
        self.guarded_count_histogram.clear();
        self.nested_findings = 0;
        for f in &self.findings {
            *self
                .counts_by_trigger
                .entry(f.check.trigger_kind.as_str().to_string())
                .or_default() += 1;
            *self.component_histogram.entry(f.component.short().to_string()).or_default() += 1;
            *self
                .starting_component_histogram
                .entry(f.starting_component.short().to_string())
                .or_default() += 1;
            *self.formula_size_histogram.entry(f.formula_size).or_default() += 1;
            *self.guarded_count_histogram.entry(f.guarded_count).or_default() += 1;
            self.nested_findings += usize::from(f.nested);
        }
    }

    pub fn has_findings(&self) -> bool {
        !self.findings.is_empty()
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn canonical(&self) -> AnalysisReport {
        let mut r = self.clone();
        r.duration_ms = 0.0;
        r.phase_durations = PhaseDurations::default();
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Text,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "text" => Ok(Format::Text),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

pub fn render_report(report: &AnalysisReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let mut s = report.to_json();
            s.push('\n');
            s.into_bytes()
        }
        Format::Text => render_text(report).into_bytes(),
    }
}

fn render_text(r: &AnalysisReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{}: {} ({} finding{}, {:.1} ms)",
        r.source_id,
        r.status.as_str(),
        r.findings.len(),
        if r.findings.len() == 1 { "" } else { "s" },
        r.duration_ms
    );
    if let Some(e) = &r.error {
        let _ = writeln!(s, "  error: {e}");
    }
    for (i, f) in r.findings.iter().enumerate() {
        let _ = writeln!(s, "  [{}] {} trigger `{}`", i + 1, f.check.trigger_kind, f.descriptor);
        let _ = writeln!(s, "      at {} line {} ({})", f.method, f.line, f.component);
        let _ = writeln!(
            s,
            "      formula {} (size {}), {} guarded statement{}",
            f.formula,
            f.formula_size,
            f.guarded_count,
            if f.guarded_count == 1 { "" } else { "s" }
        );
        if let Some(sw) = &f.via_switch {
            let _ = writeln!(s, "      via boolean switch `{sw}`");
        }
        if f.nested {
            let _ = writeln!(s, "      nested under another trigger");
        }
        for call in &f.sensitive_calls {
            let _ = writeln!(s, "      calls {}", call.signature);
            for fr in &call.stack {
                let _ = writeln!(s, "        {fr}");
            }
        }
    }
    for rf in &r.removed_findings {
        let _ = writeln!(s, "  removed by {} filter: `{}` in {}", rf.filter, rf.finding.descriptor, rf.finding.method);
    }
    for rc in &r.removed_checks {
        let _ = writeln!(s, "  ignored check `{}`: {}", rc.check.descriptor, rc.reason);
    }
    for d in &r.diagnostics {
        let _ = writeln!(s, "  note: {d}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_has_zeroed_histograms() {
        let r = AnalysisReport::new("x", ConfigEcho::default());
        let v: serde_json::Value = serde_json::from_slice(&render_report(&r, Format::Json)).unwrap();
        assert_eq!(v["findings"], serde_json::json!([]));
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["component_histogram"]["BR"], 0);
        assert_eq!(v["counts_by_trigger"]["SMS"], 0);
        assert_eq!(AnalysisReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn text_mentions_status() {
        let r = AnalysisReport::error("bad", ConfigEcho::default(), "line 3: boom".into());
        let t = String::from_utf8(render_report(&r, Format::Text)).unwrap();
        assert!(t.starts_with("bad: error"));
        assert!(t.contains("line 3: boom"));
    }
}
