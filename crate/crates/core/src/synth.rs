//! Seeded generator of labelled TBIR programs for sweeps and filter
//! experiments.
//!
//! Program `i` is malicious when `i` is even. Malicious programs plant one
//! concrete trigger in the application package guarding a sensitive call,
//! sometimes through helper calls or a nested second trigger. Benign programs
//! cycle through shapes that exercise the filters: clean code, triggers in
//! third-party packages, purely symbolic triggers, triggers inside bundled
//! libraries and ordinary in-app triggers (false positives by convention).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{Label, Manifest, ManifestEntry};

/// Sensitive methods the generator draws from (all in the large list).
pub const SINKS: [&str; 12] = [
    "android.telephony.SmsManager.sendTextMessage",
    "android.telephony.TelephonyManager.getDeviceId",
    "java.net.URL.openConnection",
    "android.content.ContentResolver.delete",
    "java.lang.Runtime.exec",
    "android.hardware.Camera.open",
    "android.os.Vibrator.vibrate",
    "android.util.Log.d",
    "java.io.File.delete",
    "android.accounts.AccountManager.getAccounts",
    "android.location.LocationManager.requestLocationUpdates",
    "android.telephony.SmsManager.sendDataMessage",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenignShape {
    Clean,
    ThirdParty,
    Symbolic,
    Library,
    InApp,
}

/// Benign shapes in rotation; two third-party slots per library slot keep
/// the package filter the broadest and the library filter the narrowest.
const BENIGN_CYCLE: [BenignShape; 6] = [
    BenignShape::Clean,
    BenignShape::ThirdParty,
    BenignShape::Symbolic,
    BenignShape::Library,
    BenignShape::ThirdParty,
    BenignShape::InApp,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthProgram {
    pub name: String,
    pub label: Label,
    pub app_package: String,
    pub text: String,
}

#[derive(Clone, Copy)]
enum Trigger {
    Time,
    Sms,
    Location,
    Symbolic,
}

/// Straight-line method body builder with local declarations hoisted.
struct Body {
    locals: Vec<String>,
    lines: Vec<String>,
    next: usize,
}

impl Body {
    fn new() -> Self {
        Body {
            locals: Vec::new(),
            lines: Vec::new(),
            next: 0,
        }
    }

    fn local(&mut self, kind: &str) -> String {
        let name = format!("v{}", self.next);
        self.next += 1;
        self.locals.push(format!("    local {name} : {kind}"));
        name
    }

    fn line(&mut self, s: String) {
        self.lines.push(format!("    {s}"));
    }

    /// Emits a check that jumps to `skip` unless the trigger fires.
    fn trigger(&mut self, t: Trigger, rng: &mut ChaCha8Rng, skip: &str) {
        match t {
            Trigger::Time => {
                let now = self.local("long");
                self.line(format!("{now} = invoke java.lang.System.currentTimeMillis()"));
                let when: i64 = rng.gen_range(1_300_000_000_000..1_700_000_000_000);
                self.line(format!("if {now} < {when}L goto {skip}"));
            }
            Trigger::Sms => {
                let body = self.local("String");
                let hit = self.local("boolean");
                self.line(format!("{body} = invoke android.telephony.SmsMessage.getMessageBody()"));
                let word: String = (0..6).map(|_| rng.gen_range(b'A'..=b'Z') as char).collect();
                let op = ["startsWith", "equals", "contains"][rng.gen_range(0..3)];
                self.line(format!("{hit} = invoke java.lang.String.{op}({body}, \"{word}\")"));
                self.line(format!("if {hit} == false goto {skip}"));
            }
            Trigger::Location => {
                let loc = self.local("android.location.Location");
                let lat = self.local("int");
                self.line(format!(
                    "{loc} = invoke android.location.LocationManager.getLastKnownLocation(\"gps\")"
                ));
                self.line(format!("{lat} = invoke android.location.Location.getLatitude({loc})"));
                self.line(format!("if {lat} < {} goto {skip}", rng.gen_range(-80..80)));
            }
            Trigger::Symbolic => {
                let now = self.local("long");
                let limit = self.local("long");
                self.line(format!("{now} = invoke java.lang.System.currentTimeMillis()"));
                self.line(format!("{limit} = invoke org.remote.Config.fetchLimit()"));
                self.line(format!("if {now} < {limit} goto {skip}"));
            }
        }
    }

    fn sink(&mut self, sig: &str) {
        self.line(format!("invoke {sig}()"));
    }

    fn render(&self, header: &str, out: &mut String) {
        let _ = writeln!(out, "  {header} {{");
        for l in self.locals.iter().chain(&self.lines) {
            let _ = writeln!(out, "{l}");
        }
        let _ = writeln!(out, "  }}");
    }
}

fn any_concrete(rng: &mut ChaCha8Rng) -> Trigger {
    *[Trigger::Time, Trigger::Sms, Trigger::Location].choose(rng).expect("nonempty")
}

fn sink(rng: &mut ChaCha8Rng) -> &'static str {
    SINKS.choose(rng).expect("nonempty")
}

/// A unit `class` (BasicClass) with a static `run()` holding one trigger
/// that guards `sink`.
fn helper_unit(class: &str, t: Trigger, sink: &str, rng: &mut ChaCha8Rng, out: &mut String) {
    let _ = writeln!(out, "class {class} kind BasicClass {{");
    let mut b = Body::new();
    b.trigger(t, rng, "Lskip");
    b.sink(sink);
    b.line("Lskip: return".into());
    b.render("static method run()", out);
    let _ = writeln!(out, "}}");
}

/// Filler that gives programs varying size without triggers.
fn filler(b: &mut Body, rng: &mut ChaCha8Rng) {
    for _ in 0..rng.gen_range(0..6) {
        let x = b.local("int");
        b.line(format!("{x} = {}", rng.gen_range(0..100)));
    }
}

fn malicious(i: usize, pkg: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    let main = format!("{pkg}.MainActivity");
    let t = any_concrete(rng);
    let s = sink(rng);
    let shape = rng.gen_range(0..3);
    let _ = writeln!(out, "// synthetic program {i}: planted trigger");
    let _ = writeln!(out, "class {main} kind Activity extends android.app.Activity {{");
    let mut b = Body::new();
    filler(&mut b, rng);
    b.trigger(t, rng, "Lend");
    match shape {
        0 => b.sink(s),
        1 => b.line(format!("invoke {main}.payload(this)")),
        _ => {
            b.trigger(any_concrete(rng), rng, "Lend");
            b.sink(s);
        }
    }
    b.line("Lend: return".into());
    b.render("method onCreate()", &mut out);
    if shape == 1 {
        let mut p = Body::new();
        p.sink(s);
        p.line("return".into());
        p.render("method payload()", &mut out);
    }
    let _ = writeln!(out, "}}");
    out
}

fn benign(i: usize, pkg: &str, shape: BenignShape, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    let main = format!("{pkg}.MainActivity");
    let _ = writeln!(out, "// synthetic program {i}: benign ({shape:?})");
    let helper = match shape {
        BenignShape::ThirdParty => Some(format!("com.vendor{i}.sdk.Helper")),
        BenignShape::Library => Some("com.google.ads.internal.AdLoader".to_string()),
        _ => None,
    };
    let _ = writeln!(out, "class {main} kind Activity extends android.app.Activity {{");
    let mut b = Body::new();
    filler(&mut b, rng);
    match shape {
        BenignShape::Clean => {
            let loc = b.local("android.location.Location");
            b.line(format!(
                "{loc} = invoke android.location.LocationManager.getLastKnownLocation(\"gps\")"
            ));
            b.line(format!("if {loc} == null goto Lend"));
            b.sink(sink(rng));
        }
        BenignShape::Symbolic => {
            b.trigger(Trigger::Symbolic, rng, "Lend");
            b.sink(sink(rng));
        }
        BenignShape::InApp => {
            b.trigger(any_concrete(rng), rng, "Lend");
            b.sink(sink(rng));
        }
        BenignShape::ThirdParty | BenignShape::Library => {
            b.line(format!("invoke {}.run()", helper.as_deref().expect("helper")));
        }
    }
    b.line("Lend: return".into());
    b.render("method onCreate()", &mut out);
    let _ = writeln!(out, "}}");
    if let Some(h) = helper {
        helper_unit(&h, any_concrete(rng), sink(rng), rng, &mut out);
    }
    out
}

/// Generates `n` programs deterministically from `seed`.
pub fn generate(n: usize, seed: u64) -> Vec<SynthProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let app_package = format!("com.synth.app{i:03}");
            let (label, text) = if i % 2 == 0 {
                (Label::Malicious, malicious(i, &app_package, &mut rng))
            } else {
                let shape = BENIGN_CYCLE[(i / 2) % BENIGN_CYCLE.len()];
                (Label::Benign, benign(i, &app_package, shape, &mut rng))
            };
            SynthProgram {
                name: format!("synth_{i:03}"),
                label,
                app_package,
                text,
            }
        })
        .collect()
}

/// Writes the programs and a `manifest.tsv` into `dir`; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, programs: &[SynthProgram]) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for p in programs {
        let path = dir.join(format!("{}.tbir", p.name));
        std::fs::write(&path, &p.text)?;
        manifest.entries.push(ManifestEntry {
            path,
            label: p.label,
            expected: None,
        });
    }
    let mpath = dir.join("manifest.tsv");
    std::fs::write(&mpath, manifest.render(dir))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controldep::SensitiveList;
    use crate::ir::parse_program;

    #[test]
    fn generated_programs_parse_and_are_deterministic() {
        let a = generate(24, 3);
        assert_eq!(a, generate(24, 3));
        assert_ne!(a, generate(24, 4));
        for p in &a {
            let prog = parse_program(&p.text, &p.name).unwrap_or_else(|e| panic!("{}: {e}\n{}", p.name, p.text));
            assert_eq!(prog.application_package().as_deref(), Some(p.app_package.as_str()));
        }
        assert_eq!(a.iter().filter(|p| p.label == Label::Malicious).count(), 12);
    }

    #[test]
    fn sinks_are_in_the_large_list() {
        let large = SensitiveList::large();
        for s in SINKS {
            assert!(large.contains(s), "{s}");
        }
    }
}
