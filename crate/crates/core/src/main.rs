use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use trigscan::batch::{prepare_corpus, run_batch, sweep_sensitive_list, Manifest, Ordering, SweepParams};
use trigscan::controldep::SensitiveList;
use trigscan::filters::{builtin_library_prefixes, parse_filter_list, parse_prefixes, FilterConfig};
use trigscan::graphs::{build_call_graph, build_icfg, CallGraphAlgorithm};
use trigscan::ir::parse_program;
use trigscan::model::Scene;
use trigscan::pipeline::{analyze_file, AnalysisConfig};
use trigscan::report::{render_report, Format, Status};
use trigscan::symex::ModelCatalog;

const EXIT_CLEAN: u8 = 0;
const EXIT_FINDINGS: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "trigscan", version, about = "Static logic-bomb scanner for TBIR programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one program.
    Analyze {
        file: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Analyze every program of a manifest and summarize.
    Batch {
        manifest: PathBuf,
        #[command(flatten)]
        opts: Opts,
        /// Strip wall-clock fields from the output.
        #[arg(long)]
        canonical: bool,
    },
    /// Remove sensitive methods step by step and report FP/FN per step.
    Sweep {
        manifest: PathBuf,
        #[command(flatten)]
        opts: Opts,
        #[arg(long, value_enum, default_value = "random")]
        ordering: OrderingArg,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Print the interprocedural control-flow graph in DOT.
    DumpIcfg {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "cha")]
        callgraph: CallGraphArg,
    },
    /// Write a seeded synthetic corpus with a manifest.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CallGraphArg {
    Cha,
    Rta,
}

impl From<CallGraphArg> for CallGraphAlgorithm {
    fn from(a: CallGraphArg) -> Self {
        match a {
            CallGraphArg::Cha => CallGraphAlgorithm::Cha,
            CallGraphArg::Rta => CallGraphAlgorithm::Rta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderingArg {
    Random,
    MostUsedFirst,
}

#[derive(Args)]
struct Opts {
    /// Sensitive-method list: `large`, `small` or a file path.
    #[arg(long, default_value = "large")]
    sensitive_list: String,
    /// Also honor `Class.*` entries of the sensitive list.
    #[arg(long)]
    match_prefixes: bool,
    /// Model catalog file replacing the built-in one.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Comma-separated filters: sym, pkg, lib.
    #[arg(long, default_value = "")]
    filters: String,
    /// Application package for the package filter (inferred when absent).
    #[arg(long)]
    app_package: Option<String>,
    /// Library prefix list replacing the built-in one.
    #[arg(long)]
    lib_list: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cha")]
    callgraph: CallGraphArg,
    /// Per-program timeout in seconds; 0 disables it.
    #[arg(long, default_value_t = trigscan::DEFAULT_TIMEOUT_SECS)]
    timeout: u64,
    #[arg(long)]
    atom_cap: Option<usize>,
    #[arg(long)]
    formula_cap: Option<usize>,
    #[arg(long)]
    switch_depth: Option<usize>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Opts {
    fn config(&self) -> Result<AnalysisConfig> {
        let mut c = AnalysisConfig {
            callgraph: self.callgraph.into(),
            ..AnalysisConfig::default()
        };
        let mut list = match self.sensitive_list.as_str() {
            "large" => SensitiveList::large(),
            "small" => SensitiveList::small(),
            path => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading sensitive list {path}"))?;
                let name = Path::new(path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.to_string());
                SensitiveList::parse(&name, &text)
            }
        };
        list.match_prefixes = self.match_prefixes;
        c.sensitive = Arc::new(list);
        if let Some(p) = &self.catalog {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading catalog {}", p.display()))?;
            c.catalog = Arc::new(ModelCatalog::parse(&text).with_context(|| format!("in catalog {}", p.display()))?);
        }
        let kinds: BTreeSet<_> = parse_filter_list(&self.filters).map_err(anyhow::Error::msg)?;
        let library_prefixes = match &self.lib_list {
            Some(p) => parse_prefixes(
                &std::fs::read_to_string(p).with_context(|| format!("reading library list {}", p.display()))?,
            ),
            None => builtin_library_prefixes(),
        };
        c.filters = FilterConfig {
            library_prefixes,
            app_package: self.app_package.clone(),
            ..FilterConfig::default()
        }
        .with(&kinds);
        if matches!(self.app_package.as_deref(), Some("")) {
            bail!("--app-package must not be empty");
        }
        if let Some(n) = self.atom_cap {
            c.caps.atom_cap = n;
        }
        if let Some(n) = self.formula_cap {
            c.caps.formula_cap = n;
        }
        if let Some(n) = self.switch_depth {
            c.detect.switch_depth = n;
        }
        c.timeout = (self.timeout > 0).then(|| Duration::from_secs(self.timeout));
        if self.jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        Ok(c)
    }

    fn format(&self) -> Format {
        match self.format {
            FormatArg::Json => Format::Json,
            FormatArg::Text => Format::Text,
        }
    }

    fn emit(&self, bytes: &[u8]) -> Result<()> {
        match &self.report {
            Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(bytes)?;
                out.flush()?;
                Ok(())
            }
        }
    }
}

/// Setup problems (unreadable inputs, bad options) are usage errors.
struct Usage(anyhow::Error);

fn usage<T>(r: Result<T>) -> std::result::Result<T, Usage> {
    r.map_err(Usage)
}

fn run(cli: Cli) -> std::result::Result<u8, Usage> {
    match cli.command {
        Command::Analyze { file, opts } => {
            let config = usage(opts.config())?;
            let report = analyze_file(&file, &config);
            usage(opts.emit(&render_report(&report, opts.format())))?;
            Ok(match report.status {
                Status::Ok if report.has_findings() => EXIT_FINDINGS,
                Status::Ok => EXIT_CLEAN,
                _ => EXIT_FAILED,
            })
        }
        Command::Batch {
            manifest,
            opts,
            canonical,
        } => {
            let config = usage(opts.config())?;
            let m = usage(Manifest::load(&manifest).map_err(Into::into))?;
            let result = run_batch(&m, &config, opts.jobs);
            let bytes = match opts.format() {
                Format::Json if canonical => result.canonical_json() + "\n",
                Format::Json => result.to_json() + "\n",
                Format::Text => {
                    let mut s = String::new();
                    for r in &result.reports {
                        s.push_str(&String::from_utf8_lossy(&render_report(r, Format::Text)));
                    }
                    let sm = &result.summary;
                    s.push_str(&format!(
                        "{} programs, {} ok, {} timeout, {} error; {} findings; FP {} FN {}\n",
                        sm.programs,
                        sm.ok,
                        sm.timeouts,
                        sm.errors,
                        sm.findings,
                        sm.fp_rate.map_or("n/a".into(), |v| format!("{v:.3}")),
                        sm.fn_rate.map_or("n/a".into(), |v| format!("{v:.3}")),
                    ));
                    for mm in &sm.mismatches {
                        s.push_str(&format!(
                            "mismatch {}: expected {:?}, got {:?}\n",
                            mm.source_id, mm.expected, mm.actual
                        ));
                    }
                    s
                }
            };
            usage(opts.emit(bytes.as_bytes()))?;
            Ok(if result.has_failures() {
                EXIT_FAILED
            } else if result.has_findings() {
                EXIT_FINDINGS
            } else {
                EXIT_CLEAN
            })
        }
        Command::Sweep {
            manifest,
            opts,
            ordering,
            steps,
            repeats,
        } => {
            let config = usage(opts.config())?;
            let m = usage(Manifest::load(&manifest).map_err(Into::into))?;
            let corpus = prepare_corpus(&m, &config, opts.jobs);
            for (p, e) in &corpus.skipped {
                eprintln!("skipped {}: {e}", p.display());
            }
            let params = SweepParams {
                ordering: match ordering {
                    OrderingArg::Random => Ordering::Random,
                    OrderingArg::MostUsedFirst => Ordering::MostUsedFirst,
                },
                steps,
                repeats,
                seed: opts.seed,
            };
            let results = sweep_sensitive_list(&corpus, &config.sensitive, &params);
            let bytes = match opts.format() {
                Format::Json => serde_json::to_string_pretty(&results).expect("sweep results serialize") + "\n",
                Format::Text => {
                    let mut s = String::from("ordering\trepeat\tremoved\tfp\tfn\n");
                    for r in &results {
                        for p in &r.points {
                            s.push_str(&format!(
                                "{}\t{}\t{}\t{:.4}\t{:.4}\n",
                                r.ordering.as_str(),
                                r.repeat,
                                p.removed,
                                p.fp,
                                p.fn_rate
                            ));
                        }
                    }
                    s
                }
            };
            usage(opts.emit(bytes.as_bytes()))?;
            Ok(if corpus.skipped.is_empty() { EXIT_CLEAN } else { EXIT_FAILED })
        }
        Command::DumpIcfg { file, callgraph } => {
            let text = usage(std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display())))?;
            let program = match parse_program(&text, &file.display().to_string()) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("{}: {e}", file.display());
                    return Ok(EXIT_FAILED);
                }
            };
            let scene = Scene::new(&program);
            let cg = build_call_graph(&scene, callgraph.into());
            let icfg = build_icfg(&scene, &cg);
            print!("{}", icfg.to_dot(&scene));
            Ok(EXIT_CLEAN)
        }
        Command::Synth { dir, count, seed } => {
            let programs = trigscan::synth::generate(count, seed);
            let manifest = usage(trigscan::synth::write_corpus(&dir, &programs).map_err(Into::into))?;
            println!("{}", manifest.display());
            Ok(EXIT_CLEAN)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_CLEAN };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("usage: trigscan <analyze|batch|sweep|dump-icfg|synth> [OPTIONS] <INPUT>");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
