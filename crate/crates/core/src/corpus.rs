//! The test corpus: benign programs, adversarial binaries and attack
//! scenarios, described by a JSON-lines manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::SipbImage;
use crate::instrumenter::{assemble_raw, assemble_reference, instrument, InstrumentError, InstrumentOptions};
use crate::runtime::{FaultKind, LoadError, Monitor, MonitorReport, RuntimeOptions, SipStatus};
use crate::verifier::{verify, ViolationCode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Benign,
    Adversarial,
    Attack,
}

impl fmt::Display for CaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseKind::Benign => "benign",
            CaseKind::Adversarial => "adversarial",
            CaseKind::Attack => "attack",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceMode {
    #[default]
    Sasm,
    Raw,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: CaseKind,
    pub expected: String,
    pub source_path: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Further images in the spawn table (index 1, 2, ...).
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub mode: SourceMode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expectation {
    Accept,
    /// The exact set of codes, in verifier order.
    Reject(Vec<ViolationCode>),
    Fault(FaultKind),
    Exit(i64),
}

impl Expectation {
    pub fn parse(s: &str) -> Option<Expectation> {
        let s = s.trim();
        if s == "accept" {
            return Some(Expectation::Accept);
        }
        if let Some(k) = s.strip_prefix("fault:") {
            return fault_kind(k).map(Expectation::Fault);
        }
        if let Some(c) = s.strip_prefix("exit:") {
            return c.parse().ok().map(Expectation::Exit);
        }
        let codes: Option<Vec<_>> = s.split(',').map(|c| ViolationCode::parse(c.trim())).collect();
        codes.filter(|c| !c.is_empty()).map(Expectation::Reject)
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Accept => f.write_str("accept"),
            Expectation::Reject(codes) => f.write_str(&join_codes(codes)),
            Expectation::Fault(k) => write!(f, "fault:{}", k),
            Expectation::Exit(c) => write!(f, "exit:{}", c),
        }
    }
}

fn join_codes(codes: &[ViolationCode]) -> String {
    codes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(",")
}

fn fault_kind(s: &str) -> Option<FaultKind> {
    use FaultKind::*;
    [
        BoundLower,
        BoundUpper,
        UnmappedAccess,
        PermissionDenied,
        NonExecutableFetch,
        DangerousInstr,
        SyscallSanity,
        InvalidOpcode,
    ]
    .into_iter()
    .find(|k| k.to_string() == s)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("case `{case}`: bad expectation `{expected}`")]
    Expectation { case: String, expected: String },
    #[error("case `{case}`: {source}")]
    Build {
        case: String,
        source: InstrumentError,
    },
}

#[derive(Clone, Debug)]
pub struct CorpusCase {
    pub entry: ManifestEntry,
    pub expectation: Expectation,
    /// The entry image source followed by the extra images.
    pub sources: Vec<String>,
}

impl CorpusCase {
    pub fn name(&self) -> &str {
        &self.entry.name
    }

    pub fn kind(&self) -> CaseKind {
        self.entry.kind
    }

    /// Stdin vectors; a case without inputs runs once on empty input.
    pub fn inputs(&self) -> Vec<Vec<u8>> {
        if self.entry.inputs.is_empty() {
            vec![Vec::new()]
        } else {
            self.entry.inputs.iter().map(|s| s.as_bytes().to_vec()).collect()
        }
    }

    /// Builds the spawn table in the case's own mode.
    pub fn build(&self, opts: InstrumentOptions) -> Result<Vec<SipbImage>, CorpusError> {
        self.build_with(|src| match self.entry.mode {
            SourceMode::Sasm => instrument(src, opts).map(|i| i.assembled.image),
            SourceMode::Raw => assemble_raw(src, opts).map(|a| a.image),
        })
    }

    /// Uninstrumented builds for the permissive reference interpreter.
    pub fn build_reference(&self, opts: InstrumentOptions) -> Result<Vec<SipbImage>, CorpusError> {
        self.build_with(|src| assemble_reference(src, opts).map(|a| a.image))
    }

    fn build_with(
        &self,
        f: impl Fn(&str) -> Result<SipbImage, InstrumentError>,
    ) -> Result<Vec<SipbImage>, CorpusError> {
        self.sources
            .iter()
            .map(|s| {
                f(s).map_err(|source| CorpusError::Build {
                    case: self.entry.name.clone(),
                    source,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub cases: Vec<CorpusCase>,
}

impl Corpus {
    /// The corpus shipped with this crate.
    pub fn default_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
    }

    pub fn load_default() -> Result<Corpus, CorpusError> {
        Self::load(Self::default_dir())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read(&dir.join("manifest.jsonl"))?;
        let mut cases = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| CorpusError::Manifest {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let expectation =
                Expectation::parse(&entry.expected).ok_or_else(|| CorpusError::Expectation {
                    case: entry.name.clone(),
                    expected: entry.expected.clone(),
                })?;
            if cases.iter().any(|c: &CorpusCase| c.entry.name == entry.name) {
                return Err(CorpusError::Manifest {
                    line: i + 1,
                    msg: format!("duplicate case name `{}`", entry.name),
                });
            }
            let single_code = matches!(&expectation, Expectation::Reject(c) if c.len() == 1);
            if (entry.kind == CaseKind::Adversarial) != single_code {
                return Err(CorpusError::Expectation {
                    case: entry.name.clone(),
                    expected: entry.expected.clone(),
                });
            }
            let mut sources = vec![read(&dir.join(&entry.source_path))?];
            for p in &entry.images {
                sources.push(read(&dir.join(p))?);
            }
            cases.push(CorpusCase {
                entry,
                expectation,
                sources,
            });
        }
        Ok(Corpus { dir, cases })
    }

    pub fn get(&self, name: &str) -> Option<&CorpusCase> {
        self.cases.iter().find(|c| c.entry.name == name)
    }

    pub fn of_kind(&self, kind: CaseKind) -> impl Iterator<Item = &CorpusCase> {
        self.cases.iter().filter(move |c| c.entry.kind == kind)
    }

    /// Cases whose kind equals `filter` or whose name contains it.
    pub fn filter<'a>(&'a self, filter: &'a str) -> impl Iterator<Item = &'a CorpusCase> {
        self.cases
            .iter()
            .filter(move |c| c.entry.kind.to_string() == filter || c.entry.name.contains(filter))
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub kind: CaseKind,
    pub expected: String,
    pub observed: String,
    pub passed: bool,
}

/// Builds the case, verifies it and, for benign and attack cases, runs it
/// under the monitor.
pub fn run_case(case: &CorpusCase) -> CaseResult {
    let observed = observe(case).unwrap_or_else(|e| format!("error: {}", e));
    CaseResult {
        name: case.entry.name.clone(),
        kind: case.entry.kind,
        expected: case.expectation.to_string(),
        passed: observed == case.expectation.to_string(),
        observed,
    }
}

fn observe(case: &CorpusCase) -> Result<String, Box<dyn std::error::Error>> {
    let images = case.build(InstrumentOptions::default())?;
    for (i, img) in images.iter().enumerate() {
        let v = verify(img);
        if !v.accepted {
            let codes = join_codes(&v.codes());
            return Ok(if i == 0 {
                codes
            } else {
                format!("image {} rejected: {}", i, codes)
            });
        }
    }
    if case.entry.kind == CaseKind::Adversarial {
        return Ok("accept".into());
    }
    let monitor = Monitor::new(&images, RuntimeOptions::enforcing());
    let mut outcome = String::new();
    for input in case.inputs() {
        let report = monitor.run(0, &input)?;
        let o = outcome_of(&report, case.entry.kind)?;
        if outcome.is_empty() {
            outcome = o;
        } else if o != outcome {
            return Ok(format!("{} / {}", outcome, o));
        }
    }
    Ok(outcome)
}

fn outcome_of(report: &MonitorReport, kind: CaseKind) -> Result<String, LoadError> {
    if !report.clean() {
        let v = &report.violations[0];
        return Ok(format!("policy violation {:?} at {:#x}", v.kind, v.pc));
    }
    if report.run.deadlock {
        return Ok("deadlock".into());
    }
    if report.run.step_limit_hit {
        return Ok("step limit".into());
    }
    let entry = report.run.sip(1).map(|s| s.status.clone());
    Ok(match (kind, entry) {
        (CaseKind::Benign, _) if !report.run.faults().is_empty() => {
            let (pid, f) = report.run.faults()[0];
            format!("pid {} fault:{}", pid, f.kind)
        }
        (CaseKind::Benign, Some(SipStatus::Exited(_))) => "accept".into(),
        (_, Some(SipStatus::Exited(c))) => format!("exit:{}", c),
        (_, Some(SipStatus::Faulted(f))) => format!("fault:{}", f.kind),
        (_, other) => format!("unfinished: {:?}", other),
    })
}
