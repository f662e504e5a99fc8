//! Corpus-scale driver: manifests, parallel runs under deadlines, FP/FN
//! accounting, correlation summaries and sensitive-list sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controldep::SensitiveList;
use crate::filters::apply_filters;
use crate::ir::parse_program;
use crate::pipeline::{analyze_file, detect, prepare, resolve_config, AnalysisConfig, PreparedProgram};
use crate::report::{AnalysisReport, Status};
use crate::stats::{pearson, spearman};
use crate::symex::TriggerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "benign" => Ok(Label::Benign),
            "malicious" => Ok(Label::Malicious),
            other => Err(format!("unknown label `{other}` (expected benign or malicious)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    /// Expected finding descriptors; `None` when the manifest does not say.
    pub expected: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("manifest line {line}: {path} does not exist")]
    Missing { line: usize, path: PathBuf },
}

impl Manifest {
    /// Tab-separated `path label [expected...]`; `#` starts a comment line.
    /// A single `-` in the expected column means "no findings". Relative
    /// paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ManifestError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() < 2 {
                return Err(ManifestError::Syntax {
                    line,
                    message: "expected `path<TAB>label`".into(),
                });
            }
            let label = cols[1]
                .trim()
                .parse()
                .map_err(|message| ManifestError::Syntax { line, message })?;
            let expected = match &cols[2..] {
                [] => None,
                ["-"] => Some(Vec::new()),
                rest => Some(rest.iter().map(|s| s.to_string()).collect()),
            };
            let path = base.join(cols[0].trim());
            if !path.exists() {
                return Err(ManifestError::Missing { line, path });
            }
            entries.push(ManifestEntry { path, label, expected });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes entries back in the manifest syntax, paths relative to `base`
    /// when possible.
    pub fn render(&self, base: &Path) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            s.push_str(&p.display().to_string());
            s.push('\t');
            s.push_str(e.label.as_str());
            match &e.expected {
                Some(v) if v.is_empty() => s.push_str("\t-"),
                Some(v) => {
                    for d in v {
                        s.push('\t');
                        s.push_str(d);
                    }
                }
                None => {}
            }
            s.push('\n');
        }
        s
    }
}

/// Descriptors of kept findings, sorted, for comparison with a manifest.
pub fn finding_descriptors(report: &AnalysisReport) -> Vec<String> {
    let mut v: Vec<String> = report.findings.iter().map(|f| f.descriptor.clone()).collect();
    v.sort();
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub source_id: String,
    pub expected: Vec<String>,
    pub actual: Vec<String>,
}

/// One correlation of analysis duration against a program feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub feature: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Pearson of (x, ln y), for exponential-looking relations.
    pub pearson_log: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub programs: usize,
    pub ok: usize,
    pub timeouts: usize,
    pub errors: usize,
    pub success_rate: f64,
    pub mean_duration_ms: f64,
    pub benign: usize,
    pub malicious: usize,
    pub flagged_benign: usize,
    pub flagged_malicious: usize,
    /// Flagged benign over benign; `None` without benign programs.
    pub fp_rate: Option<f64>,
    /// Unflagged malicious over malicious; `None` without malicious programs.
    pub fn_rate: Option<f64>,
    pub findings: usize,
    pub counts_by_trigger: BTreeMap<String, usize>,
    pub trigger_shares: BTreeMap<String, f64>,
    pub component_histogram: BTreeMap<String, usize>,
    pub starting_component_histogram: BTreeMap<String, usize>,
    pub formula_size_histogram: BTreeMap<usize, usize>,
    pub guarded_count_histogram: BTreeMap<usize, usize>,
    pub nested_findings: usize,
    pub nested_share: f64,
    pub removed_by_filter: BTreeMap<String, usize>,
    pub mismatches: Vec<Mismatch>,
    pub correlations: Vec<Correlation>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn summarize(entries: &[ManifestEntry], reports: &[AnalysisReport]) -> Summary {
    let n = reports.len();
    let count = |s: Status| reports.iter().filter(|r| r.status == s).count();
    let (ok, timeouts, errors) = (count(Status::Ok), count(Status::Timeout), count(Status::Error));
    let mut counts_by_trigger: BTreeMap<String, usize> =
        TriggerKind::ALL.iter().map(|k| (k.as_str().to_string(), 0)).collect();
    let mut component_histogram = BTreeMap::new();
    let mut starting_component_histogram = BTreeMap::new();
    let mut formula_size_histogram = BTreeMap::new();
    let mut guarded_count_histogram = BTreeMap::new();
    let mut removed_by_filter = BTreeMap::new();
    let mut nested = 0;
    let mut findings = 0;
    for r in reports {
        findings += r.findings.len();
        nested += r.nested_findings;
        for (k, v) in &r.counts_by_trigger {
            *counts_by_trigger.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &r.component_histogram {
            *component_histogram.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &r.starting_component_histogram {
            *starting_component_histogram.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &r.formula_size_histogram {
            *formula_size_histogram.entry(*k).or_default() += v;
        }
        for (k, v) in &r.guarded_count_histogram {
            *guarded_count_histogram.entry(*k).or_default() += v;
        }
        for rf in &r.removed_findings {
            *removed_by_filter.entry(rf.filter.short().to_string()).or_default() += 1;
        }
    }
    let trigger_shares = counts_by_trigger
        .iter()
        .map(|(k, v)| (k.clone(), ratio(*v, findings)))
        .collect();

    let mut benign = 0;
    let mut malicious = 0;
    let mut flagged_benign = 0;
    let mut flagged_malicious = 0;
    let mut mismatches = Vec::new();
    for (e, r) in entries.iter().zip(reports) {
        match e.label {
            Label::Benign => {
                benign += 1;
                flagged_benign += usize::from(r.has_findings());
            }
            Label::Malicious => {
                malicious += 1;
                flagged_malicious += usize::from(r.has_findings());
            }
        }
        if let Some(exp) = &e.expected {
            let mut expected = exp.clone();
            expected.sort();
            let actual = finding_descriptors(r);
            if expected != actual {
                mismatches.push(Mismatch {
                    source_id: r.source_id.clone(),
                    expected,
                    actual,
                });
            }
        }
    }

    Summary {
        programs: n,
        ok,
        timeouts,
        errors,
        success_rate: ratio(ok, n),
        mean_duration_ms: if n == 0 {
            0.0
        } else {
            reports.iter().map(|r| r.duration_ms).sum::<f64>() / n as f64
        },
        benign,
        malicious,
        flagged_benign,
        flagged_malicious,
        fp_rate: (benign > 0).then(|| ratio(flagged_benign, benign)),
        fn_rate: (malicious > 0).then(|| ratio(malicious - flagged_malicious, malicious)),
        findings,
        counts_by_trigger,
        trigger_shares,
        component_histogram,
        starting_component_histogram,
        formula_size_histogram,
        guarded_count_histogram,
        nested_findings: nested,
        nested_share: ratio(nested, findings),
        removed_by_filter,
        mismatches,
        correlations: correlations(reports),
    }
}

/// Duration against size features, over successfully analyzed programs.
fn correlations(reports: &[AnalysisReport]) -> Vec<Correlation> {
    let ok: Vec<&AnalysisReport> = reports.iter().filter(|r| r.status == Status::Ok).collect();
    let y: Vec<f64> = ok.iter().map(|r| r.duration_ms).collect();
    type Feature = (&'static str, fn(&AnalysisReport) -> usize);
    let features: [Feature; 4] = [
        ("units", |r| r.stats.units),
        ("reachable_methods", |r| r.stats.reachable_methods),
        ("instructions", |r| r.stats.instructions),
        ("branches", |r| r.stats.conditions),
    ];
    features
        .iter()
        .map(|(name, get)| {
            let x: Vec<f64> = ok.iter().map(|r| get(r) as f64).collect();
            let log_y: Vec<f64> = y.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
            Correlation {
                feature: name.to_string(),
                pearson: pearson(&x, &y).ok(),
                spearman: spearman(&x, &y).ok(),
                pearson_log: pearson(&x, &log_y).ok(),
            }
        })
        .collect()
}

impl Summary {
    /// Copy without wall-clock dependent fields.
    pub fn canonical(&self) -> Summary {
        let mut s = self.clone();
        s.mean_duration_ms = 0.0;
        for c in &mut s.correlations {
            c.pearson = None;
            c.spearman = None;
            c.pearson_log = None;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    /// One report per manifest entry, in manifest order.
    pub reports: Vec<AnalysisReport>,
    pub summary: Summary,
}

impl BatchResult {
    /// Timing-free aggregate, stable across runs and thread counts.
    pub fn canonical_json(&self) -> String {
        let c = BatchResult {
            reports: self.reports.iter().map(AnalysisReport::canonical).collect(),
            summary: self.summary.canonical(),
        };
        serde_json::to_string_pretty(&c).expect("batch results serialize")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("batch results serialize")
    }

    pub fn has_findings(&self) -> bool {
        self.reports.iter().any(AnalysisReport::has_findings)
    }

    pub fn has_failures(&self) -> bool {
        self.reports.iter().any(|r| r.status != Status::Ok)
    }
}

fn analyze_isolated(path: &Path, config: &AnalysisConfig) -> AnalysisReport {
    match catch_unwind(AssertUnwindSafe(|| analyze_file(path, config))) {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            AnalysisReport::error(&id, config.echo(), format!("analysis panicked: {msg}"))
        }
    }
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

/// Analyzes every entry independently, `jobs` at a time. Each program gets
/// its own deadline from `config.timeout`; failures stay in their report.
pub fn run_batch(manifest: &Manifest, config: &AnalysisConfig, jobs: usize) -> BatchResult {
    let reports: Vec<AnalysisReport> = pool(jobs).install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| analyze_isolated(&e.path, config))
            .collect()
    });
    let summary = summarize(&manifest.entries, &reports);
    BatchResult { reports, summary }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    Random,
    MostUsedFirst,
}

impl Ordering {
    pub fn as_str(self) -> &'static str {
        match self {
            Ordering::Random => "random",
            Ordering::MostUsedFirst => "most-used-first",
        }
    }
}

impl FromStr for Ordering {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Ordering::Random),
            "most-used-first" | "most-used" => Ok(Ordering::MostUsedFirst),
            other => Err(format!("unknown ordering `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepParams {
    pub ordering: Ordering,
    /// Number of removal steps after step 0; the last step removes everything.
    pub steps: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub removed: usize,
    pub remaining: usize,
    pub fp: f64,
    pub fn_rate: f64,
    pub flagged_benign: usize,
    pub flagged_malicious: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub ordering: Ordering,
    pub repeat: usize,
    pub seed: u64,
    pub list_size: usize,
    pub benign: usize,
    pub malicious: usize,
    pub points: Vec<SweepPoint>,
}

/// A labelled program with the configuration resolved for it.
pub type PreparedEntry = (Label, PreparedProgram, AnalysisConfig);

/// Programs of a manifest prepared once for repeated detection.
pub struct PreparedCorpus {
    pub programs: Vec<PreparedEntry>,
    /// Entries that failed to load or parse.
    pub skipped: Vec<(PathBuf, String)>,
}

pub fn prepare_corpus(manifest: &Manifest, config: &AnalysisConfig, jobs: usize) -> PreparedCorpus {
    let results: Vec<Result<PreparedEntry, (PathBuf, String)>> = pool(jobs).install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let text = std::fs::read_to_string(&e.path).map_err(|err| (e.path.clone(), err.to_string()))?;
                let id = e.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let program = parse_program(&text, &id).map_err(|err| (e.path.clone(), err.to_string()))?;
                let cfg = resolve_config(config, &program);
                let deadline = cfg.deadline();
                Ok((e.label, prepare(program, &cfg, &deadline), cfg))
            })
            .collect()
    });
    let mut corpus = PreparedCorpus {
        programs: Vec::new(),
        skipped: Vec::new(),
    };
    for r in results {
        match r {
            Ok(p) => corpus.programs.push(p),
            Err(e) => corpus.skipped.push(e),
        }
    }
    corpus
}

impl PreparedCorpus {
    /// Flagged (benign, malicious) counts under `list`, filters applied.
    pub fn flagged(&self, list: &SensitiveList) -> (usize, usize) {
        let (mut b, mut m) = (0, 0);
        for (label, prep, cfg) in &self.programs {
            let det = detect(prep, list, cfg, &cfg.deadline());
            if apply_filters(det.findings, &cfg.filters).kept.is_empty() {
                continue;
            }
            match label {
                Label::Benign => b += 1,
                Label::Malicious => m += 1,
            }
        }
        (b, m)
    }

    /// Occurrences of each sensitive signature in control-run findings.
    pub fn usage_counts(&self, list: &SensitiveList) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for (_, prep, cfg) in &self.programs {
            let det = detect(prep, list, cfg, &cfg.deadline());
            for f in apply_filters(det.findings, &cfg.filters).kept {
                for c in f.sensitive_calls {
                    *counts.entry(c.signature).or_default() += 1;
                }
            }
        }
        counts
    }

    fn count(&self, label: Label) -> usize {
        self.programs.iter().filter(|(l, _, _)| *l == label).count()
    }
}

/// Removal order of `base` items. Most-used-first sorts by control-run
/// usage, descending; the seed only shuffles ties.
pub fn removal_order(
    base: &SensitiveList,
    ordering: Ordering,
    usage: &BTreeMap<String, usize>,
    seed: u64,
) -> Vec<String> {
    let mut items = base.items();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    if ordering == Ordering::MostUsedFirst {
        let used = |s: &String| {
            let direct = usage.get(s).copied().unwrap_or(0);
            let prefixed = s
                .strip_suffix(".*")
                .map(|p| {
                    usage
                        .iter()
                        .filter(|(sig, _)| sig.rsplit_once('.').is_some_and(|(c, _)| c == p))
                        .map(|(_, n)| n)
                        .sum()
                })
                .unwrap_or(0);
            direct + prefixed
        };
        items.sort_by_key(|s| std::cmp::Reverse(used(s)));
    }
    items
}

/// Evenly spaced removal counts from 0 to `total`.
pub fn removal_schedule(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.max(1);
    let mut v: Vec<usize> = (0..=steps).map(|k| (k * total + steps / 2) / steps).collect();
    v.dedup();
    v
}

/// Removes sensitive methods step by step and records FP/FN per step.
pub fn sweep_sensitive_list(corpus: &PreparedCorpus, base: &SensitiveList, params: &SweepParams) -> Vec<SweepResult> {
    let benign = corpus.count(Label::Benign);
    let malicious = corpus.count(Label::Malicious);
    let usage = match params.ordering {
        Ordering::MostUsedFirst => corpus.usage_counts(base),
        Ordering::Random => BTreeMap::new(),
    };
    let total = base.items().len();
    let schedule = removal_schedule(total, params.steps);
    (0..params.repeats.max(1))
        .map(|repeat| {
            let seed = params.seed.wrapping_add(repeat as u64);
            let order = removal_order(base, params.ordering, &usage, seed);
            let points = schedule
                .iter()
                .map(|&k| {
                    let removed: BTreeSet<String> = order[..k].iter().cloned().collect();
                    let list = base.without(&removed);
                    let (fb, fm) = corpus.flagged(&list);
                    SweepPoint {
                        removed: k,
                        remaining: total - k,
                        fp: ratio(fb, benign),
                        fn_rate: if malicious == 0 { 0.0 } else { ratio(malicious - fm, malicious) },
                        flagged_benign: fb,
                        flagged_malicious: fm,
                    }
                })
                .collect();
            SweepResult {
                ordering: params.ordering,
                repeat,
                seed,
                list_size: total,
                benign,
                malicious,
                points,
            }
        })
        .collect()
}
