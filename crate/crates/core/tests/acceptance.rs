//! Acceptance gate: one PASS/FAIL line per criterion, then a single assert.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use trigscan::batch::{prepare_corpus, run_batch, sweep_sensitive_list, Label, Manifest, Ordering, SweepParams};
use trigscan::controldep::{LogicBombFinding, SensitiveList};
use trigscan::filters::{apply_filters, builtin_library_prefixes, FilterConfig, FilterKind};
use trigscan::graphs::{build_call_graph, CallGraphAlgorithm};
use trigscan::ir::parse_program;
use trigscan::model::Scene;
use trigscan::pipeline::{analyze_file, AnalysisConfig};
use trigscan::predicates::{minimize, Formula};
use trigscan::stats::{pearson, spearman};
use trigscan::synth;

const CORPUS_RUNTIME_LIMIT: Duration = Duration::from_secs(10);
const MINIMIZE_RUNTIME_LIMIT: Duration = Duration::from_secs(30);
const MINIMIZE_CASES: usize = 1000;
const MINIMIZE_MAX_ATOMS: usize = 8;
const RECOVERY_CASES: usize = 400;
const RECOVERY_MAX_NODES: usize = 12;
const CORRELATION_SAMPLES: usize = 100;
const CORRELATION_TOLERANCE: f64 = 1e-12;
const SYNTH_PROGRAMS: usize = 48;
const SYNTH_SEED: u64 = 2024;
const SWEEP_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SWEEP_STEPS: usize = 15;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus_manifest() -> Manifest {
    Manifest::load(&corpus_dir().join("manifest.tsv")).expect("corpus manifest")
}

fn synth_manifest(dir: &std::path::Path) -> Manifest {
    let programs = synth::generate(SYNTH_PROGRAMS, SYNTH_SEED);
    Manifest::load(&synth::write_corpus(dir, &programs).expect("write synthetic corpus")).expect("synthetic manifest")
}

fn only<'a>(reports: &'a [trigscan::report::AnalysisReport], id: &str) -> &'a trigscan::report::AnalysisReport {
    reports.iter().find(|r| r.source_id == id).unwrap_or_else(|| panic!("no report for {id}"))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let m = corpus_manifest();
    let batch = run_batch(&m, &AnalysisConfig::default(), 4);
    let elapsed = start.elapsed();
    let s = &batch.summary;
    ensure(s.errors == 0 && s.timeouts == 0, || format!("{} errors, {} timeouts", s.errors, s.timeouts))?;
    ensure(s.mismatches.is_empty(), || format!("mismatches: {:?}", s.mismatches))?;
    let r = &batch.reports;

    let tb = only(r, "time_bomb");
    ensure(
        tb.findings.len() == 1 && tb.findings[0].check.trigger_kind.as_str() == "Time",
        || "time_bomb: expected one Time finding".into(),
    )?;

    let sb = only(r, "sms_bomb");
    ensure(sb.findings.len() == 1, || "sms_bomb: expected one finding".into())?;
    let f = &sb.findings[0];
    ensure(f.descriptor == "#sms/#body.startsWith(\"!CMD:\")", || format!("sms_bomb: {}", f.descriptor))?;
    ensure(
        f.sensitive_calls
            .iter()
            .any(|c| c.stack.iter().any(|fr| fr.callee.ends_with(".processCmd"))),
        || "sms_bomb: stack does not pass through processCmd".into(),
    )?;

    let hc = only(r, "holy_colbert");
    let kinds: BTreeSet<&str> = hc.findings.iter().map(|f| f.check.trigger_kind.as_str()).collect();
    ensure(hc.findings.len() == 2 && kinds == BTreeSet::from(["Time", "SMS"]), || {
        "holy_colbert: expected one Time and one SMS finding".into()
    })?;
    let nested: Vec<&LogicBombFinding> = r.iter().flat_map(|x| &x.findings).filter(|f| f.nested).collect();
    ensure(
        nested.len() == 1
            && nested[0].check.trigger_kind.as_str() == "SMS"
            && nested[0].descriptor.contains("matches(\"")
            && nested[0].descriptor.contains("health"),
        || format!("nested findings corpus-wide: {:?}", nested.iter().map(|f| &f.descriptor).collect::<Vec<_>>()),
    )?;

    for (id, d) in [
        ("track_me", "#now cmp 15L"),
        ("my_car_tracks", "#sms/#body.startsWith(\"GETPOS\")"),
        ("exam_tool", "#sms/#body.equals(\"zebinjo\")"),
    ] {
        let rep = only(r, id);
        ensure(rep.findings.iter().any(|f| f.descriptor == d), || format!("{id}: missing `{d}`"))?;
    }
    ensure(only(r, "exam_tool").has_findings(), || "exam_tool must be flagged".into())?;

    let card = corpus_dir().join("card_io.tbir");
    let control = analyze_file(&card, &AnalysisConfig::default());
    let lib = AnalysisConfig {
        filters: FilterConfig {
            library_prefixes: builtin_library_prefixes(),
            enable_library: true,
            ..FilterConfig::default()
        },
        ..AnalysisConfig::default()
    };
    let filtered = analyze_file(&card, &lib);
    ensure(
        control.findings.len() == 1
            && control.findings[0].check.trigger_kind.as_str() == "Time"
            && filtered.findings.is_empty()
            && filtered.removed_findings.len() == 1
            && filtered.removed_findings[0].filter == FilterKind::Library,
        || "card_io: Time finding not removed by the library filter".into(),
    )?;
    ensure(elapsed < CORPUS_RUNTIME_LIMIT, || format!("corpus took {elapsed:?}"))?;
    Ok(format!("{} fixtures match the manifest in {:.2?}", m.entries.len(), elapsed))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (p, q) = (Formula::lit(atom(0), true), Formula::lit(atom(1), true));
    let textbook = Formula::or([
        Formula::and([p.clone(), q.clone()]),
        Formula::and([p.not(), q.clone()]),
    ]);
    let m = minimize(&textbook, 16).formula;
    ensure(m == q, || format!("(p & q) | (!p & q) minimized to {m}"))?;
    for case in 0..MINIMIZE_CASES {
        let atoms = rng.gen_range(1..=MINIMIZE_MAX_ATOMS);
        let f = random_formula(&mut rng, atoms, 4);
        let m = minimize(&f, 16);
        ensure(!m.partial, || format!("case {case}: partial result"))?;
        ensure(same_function(&f, &m.formula, atoms), || format!("case {case}: {f} vs {}", m.formula))?;
        for a in m.formula.atoms() {
            ensure(is_essential(&f, a.index, atoms), || format!("case {case}: atom c{} kept but inessential", a.index))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < MINIMIZE_RUNTIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("{MINIMIZE_CASES} formulas equivalent with essential atoms only, {elapsed:.2?}"))
}

fn criterion_3() -> Outcome {
    let mut graphs = vec![
        GenCfg::nested_diamonds(1),
        GenCfg::nested_diamonds(2),
        GenCfg::loop_with_branch(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    graphs.extend((0..RECOVERY_CASES).map(|_| GenCfg::random(&mut rng, RECOVERY_MAX_NODES)));
    let mut stmts = 0;
    for g in &graphs {
        ensure(g.nodes.len() <= RECOVERY_MAX_NODES, || "graph too large".into())?;
        stmts += check_recovery(g)?;
    }
    Ok(format!("{} graphs, {stmts} statements agree with the path oracle", graphs.len()))
}

fn criterion_4() -> Outcome {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let neg: Vec<f64> = x.iter().map(|v| 10.0 - v).collect();
    ensure(pearson(&x, &x) == Ok(1.0) && spearman(&x, &x) == Ok(1.0), || "identity is not exactly 1".into())?;
    ensure(pearson(&x, &neg) == Ok(-1.0) && spearman(&x, &neg) == Ok(-1.0), || "reversal is not exactly -1".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for case in 0..CORRELATION_SAMPLES {
        let n = rng.gen_range(3..60);
        let ties = case % 3 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            let v: f64 = rng.gen_range(0.0..100.0);
            if ties {
                v.round() / 10.0
            } else {
                v
            }
        };
        let xs: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|v| v * rng.gen_range(-1.0..1.0) + draw(&mut rng)).collect();
        let (p, s) = (pearson(&xs, &ys), spearman(&xs, &ys));
        let (p, s) = match (p, s) {
            (Ok(p), Ok(s)) => (p, s),
            _ => continue,
        };
        let dp = (p - pearson_direct(&xs, &ys)).abs();
        let ds = (s - spearman_direct(&xs, &ys)).abs();
        worst = worst.max(dp).max(ds);
        ensure(dp <= CORRELATION_TOLERANCE && ds <= CORRELATION_TOLERANCE, || {
            format!("case {case}: pearson off by {dp:e}, spearman off by {ds:e}")
        })?;
    }
    Ok(format!("{CORRELATION_SAMPLES} samples, worst deviation {worst:e}"))
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = synth_manifest(dir.path());
    let malicious = m.entries.iter().filter(|e| e.label == Label::Malicious).count();
    ensure(m.entries.len() >= 40 && malicious * 2 == m.entries.len(), || "synthetic corpus shape".into())?;
    let config = AnalysisConfig::default();
    let control = run_batch(&m, &config, 4).summary;
    let corpus = prepare_corpus(&m, &config, 4);
    ensure(corpus.skipped.is_empty(), || format!("skipped: {:?}", corpus.skipped))?;
    let mut runs = 0;
    for ordering in [Ordering::Random, Ordering::MostUsedFirst] {
        for seed in SWEEP_SEEDS {
            let params = SweepParams {
                ordering,
                steps: SWEEP_STEPS,
                repeats: 1,
                seed,
            };
            for r in sweep_sensitive_list(&corpus, &config.sensitive, &params) {
                let first = &r.points[0];
                ensure(
                    first.removed == 0
                        && Some(first.fp) == control.fp_rate
                        && Some(first.fn_rate) == control.fn_rate,
                    || "step 0 differs from the control run".into(),
                )?;
                for w in r.points.windows(2) {
                    ensure(w[1].fp <= w[0].fp && w[1].fn_rate >= w[0].fn_rate, || {
                        format!("{} seed {seed}: not monotone at {} removed", ordering.as_str(), w[1].removed)
                    })?;
                }
                let last = r.points.last().expect("points");
                ensure(last.remaining == 0 && last.fp == 0.0 && last.fn_rate == 1.0, || {
                    format!("full removal gives FP {} FN {}", last.fp, last.fn_rate)
                })?;
                runs += 1;
            }
        }
    }
    Ok(format!(
        "{runs} sweeps over {} programs monotone; control FP {:.3} FN {:.3}",
        m.entries.len(),
        control.fp_rate.unwrap_or(0.0),
        control.fn_rate.unwrap_or(0.0)
    ))
}

fn finding_keys(fs: &[LogicBombFinding]) -> Vec<String> {
    let mut v: Vec<String> = fs
        .iter()
        .map(|f| format!("{}|{}|{}|{:?}", f.method, f.line, f.descriptor, f.via_switch))
        .collect();
    v.sort();
    v
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = synth_manifest(dir.path());
    let base = run_batch(&m, &AnalysisConfig::default(), 4);
    let mut removed: BTreeMap<FilterKind, usize> = BTreeMap::new();
    for kind in FilterKind::ORDER {
        let mut total = 0;
        for r in &base.reports {
            let filters = FilterConfig {
                library_prefixes: builtin_library_prefixes(),
                app_package: trigscan::ir::parse_program(
                    &std::fs::read_to_string(dir.path().join(format!("{}.tbir", r.source_id))).unwrap(),
                    &r.source_id,
                )
                .unwrap()
                .application_package(),
                ..FilterConfig::default()
            }
            .with(&BTreeSet::from([kind]));
            let out = apply_filters(r.findings.clone(), &filters);
            let mut both: Vec<LogicBombFinding> = out.kept.clone();
            both.extend(out.removed.iter().map(|x| x.finding.clone()));
            ensure(finding_keys(&both) == finding_keys(&r.findings), || {
                format!("{}: kept and removed do not partition the findings", r.source_id)
            })?;
            let again = apply_filters(out.kept.clone(), &filters);
            ensure(again.removed.is_empty() && again.kept == out.kept, || {
                format!("{}: {kind} filter is not idempotent", r.source_id)
            })?;
            total += out.removed.len();
        }
        removed.insert(kind, total);
    }
    let (sym, pkg, lib) = (
        removed[&FilterKind::Symbolic],
        removed[&FilterKind::Package],
        removed[&FilterKind::Library],
    );
    ensure(pkg >= sym && sym >= lib, || format!("removals pkg {pkg}, sym {sym}, lib {lib}"))?;
    ensure(lib > 0, || "library filter removed nothing".into())?;
    Ok(format!("partition and idempotence hold; removed pkg {pkg} >= sym {sym} >= lib {lib}"))
}

fn criterion_7() -> Outcome {
    let text = std::fs::read_to_string(corpus_dir().join("polymorphic.tbir")).map_err(|e| e.to_string())?;
    let program = parse_program(&text, "polymorphic").map_err(|e| e.to_string())?;
    let scene = Scene::new(&program);
    let cha = build_call_graph(&scene, CallGraphAlgorithm::Cha).edge_pairs();
    let rta = build_call_graph(&scene, CallGraphAlgorithm::Rta).edge_pairs();
    let diff: Vec<(String, String)> = cha
        .difference(&rta)
        .map(|(s, t)| (scene.method_name(s.method), scene.method_name(*t)))
        .collect();
    ensure(rta.is_subset(&cha), || "RTA edges not within CHA".into())?;
    ensure(
        diff == vec![("com.example.poly.Main.onCreate".to_string(), "com.example.poly.Loud.run".to_string())],
        || format!("edge difference {diff:?}"),
    )?;

    let m = corpus_manifest();
    let cha_run = run_batch(&m, &AnalysisConfig::default(), 4);
    let rta_cfg = AnalysisConfig {
        callgraph: CallGraphAlgorithm::Rta,
        ..AnalysisConfig::default()
    };
    let rta_run = run_batch(&m, &rta_cfg, 4);
    for (c, r) in cha_run.reports.iter().zip(&rta_run.reports) {
        let ck: BTreeSet<String> = finding_keys(&c.findings).into_iter().collect();
        let rk: BTreeSet<String> = finding_keys(&r.findings).into_iter().collect();
        ensure(rk.is_subset(&ck), || format!("{}: RTA finds {:?} beyond CHA", r.source_id, rk.difference(&ck)))?;
    }
    let poly_cha = only(&cha_run.reports, "polymorphic").findings.len();
    let poly_rta = only(&rta_run.reports, "polymorphic").findings.len();
    ensure(poly_cha == 1 && poly_rta == 0, || format!("polymorphic: CHA {poly_cha}, RTA {poly_rta}"))?;
    Ok("CHA adds only Main.onCreate -> Loud.run; RTA findings within CHA".into())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth_m = synth_manifest(dir.path());
    for (name, m) in [("corpus", corpus_manifest()), ("synthetic", synth_m)] {
        let config = AnalysisConfig::default();
        let a = run_batch(&m, &config, 4).canonical_json();
        let b = run_batch(&m, &config, 4).canonical_json();
        let c = run_batch(&m, &config, 1).canonical_json();
        ensure(a == b, || format!("{name}: two runs differ"))?;
        ensure(a == c, || format!("{name}: jobs=1 and jobs=4 differ"))?;
    }
    let sweep = |seed| {
        let dir2 = tempfile::tempdir().unwrap();
        let m = synth_manifest(dir2.path());
        let corpus = prepare_corpus(&m, &AnalysisConfig::default(), 2);
        let params = SweepParams {
            ordering: Ordering::Random,
            steps: 5,
            repeats: 2,
            seed,
        };
        serde_json::to_string(&sweep_sensitive_list(&corpus, &SensitiveList::large(), &params)).unwrap()
    };
    ensure(sweep(9) == sweep(9), || "seeded sweeps differ".into())?;
    Ok("canonical batch JSON and seeded sweeps identical across runs".into())
}

#[test]
fn acceptance_criteria() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("corpus golden run", criterion_1),
        ("minimization oracle", criterion_2),
        ("predicate recovery vs path oracle", criterion_3),
        ("correlation functions", criterion_4),
        ("sweep shape", criterion_5),
        ("filter semantics", criterion_6),
        ("call-graph ablation", criterion_7),
        ("determinism", criterion_8),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        match run() {
            Ok(detail) => println!("PASS criterion {n}: {name}: {detail}"),
            Err(why) => {
                println!("FAIL criterion {n}: {name}: {why}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
