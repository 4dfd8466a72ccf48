use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::libos::Runtime;
use super::{LoadError, RunReport, RuntimeOptions, SipState, View};
use crate::analysis::FactMap;
use crate::image::SipbImage;
use crate::verifier::{analyze, VerifyOptions};

/// Violations stored per report; further ones are only counted.
const MAX_RECORDED: usize = 256;

/// What the verifier claims about one image: its reachable instruction
/// offsets and, optionally, the range facts at each of them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImageOracle {
    pub reachable: BTreeSet<u64>,
    pub facts: Option<FactMap>,
}

impl ImageOracle {
    /// Runs the verifier; `None` if it rejects the image.
    pub fn for_image(img: &SipbImage, opts: VerifyOptions) -> Option<ImageOracle> {
        let a = analyze(img, opts);
        if !a.verdict.accepted {
            return None;
        }
        Some(ImageOracle {
            reachable: a.reachable?.instrs.keys().copied().collect(),
            facts: a.facts,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Instruction fetched outside the SIP's own region C.
    FetchOutsideC,
    /// A completed data access landed outside the SIP's own region D.
    DataOutsideD,
    /// A completed indirect transfer did not land on one of the domain's
    /// cfi_labels.
    IndirectNotLabel,
    /// Fetched offset missing from the verifier's reachable set.
    FetchNotInR,
    /// A register violated its range fact.
    FactUnsound,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyViolation {
    pub pid: u32,
    pub pc: u64,
    pub kind: PolicyKind,
    pub detail: String,
    pub regs: [u64; 16],
}

pub(super) struct MonitorState<'a> {
    oracles: &'a [Option<ImageOracle>],
    violations: Vec<PolicyViolation>,
    count: usize,
    fetched: BTreeMap<usize, BTreeSet<u64>>,
}

impl MonitorState<'_> {
    pub(super) fn record(&mut self, s: &SipState, kind: PolicyKind, detail: String) {
        self.count += 1;
        if self.violations.len() < MAX_RECORDED {
            self.violations.push(PolicyViolation {
                pid: s.pid,
                pc: s.rip,
                kind,
                detail,
                regs: s.regs,
            });
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub run: RunReport,
    pub violations: Vec<PolicyViolation>,
    /// Total number of assertion failures, including unrecorded ones.
    pub violation_count: usize,
    /// Offsets fetched from each image's own code, keyed by image index.
    pub fetched: BTreeMap<usize, BTreeSet<u64>>,
}

impl MonitorReport {
    pub fn clean(&self) -> bool {
        self.violation_count == 0
    }
}

impl Runtime<'_> {
    pub(super) fn monitor_fetch(&mut self, si: usize, slot: usize, pc: u64) {
        let s = &self.sips[si];
        let Some(m) = self.monitor.as_mut() else {
            return;
        };
        if slot != s.slot {
            m.record(s, PolicyKind::FetchOutsideC, format!("fetch at {:#x}", pc));
            return;
        }
        let off = pc - s.layout.c_begin;
        if off >= s.layout.code_len {
            // The loader's trampoline.
            return;
        }
        m.fetched.entry(s.image_index).or_default().insert(off);
        let Some(oracle) = m.oracles.get(s.image_index).and_then(|o| o.as_ref()) else {
            return;
        };
        if !oracle.reachable.contains(&off) {
            m.record(s, PolicyKind::FetchNotInR, format!("offset {:#x}", off));
        }
        if let Some(fact) = oracle.facts.as_ref().and_then(|f| f.get(&off)) {
            for (r, range) in fact.known() {
                let v = s.regs[r.index() as usize];
                if !range.holds(v, s.layout.d_begin, s.layout.d_end) {
                    m.record(
                        s,
                        PolicyKind::FactUnsound,
                        format!("offset {:#x}: {} = {:#x} violates {}", off, r, v, range),
                    );
                }
            }
        }
    }
}

/// Reusable monitor over an image table: oracles are computed once and
/// shared by every run.
pub struct Monitor<'a> {
    images: &'a [SipbImage],
    oracles: Vec<Option<ImageOracle>>,
    opts: RuntimeOptions,
}

impl<'a> Monitor<'a> {
    /// Oracles come from the verifier for every image it accepts.
    pub fn new(images: &'a [SipbImage], opts: RuntimeOptions) -> Self {
        let vo = VerifyOptions {
            confine_loads: opts.confine_loads,
        };
        let oracles = images.iter().map(|i| ImageOracle::for_image(i, vo)).collect();
        Self::with_oracles(images, oracles, opts)
    }

    pub fn with_oracles(
        images: &'a [SipbImage],
        oracles: Vec<Option<ImageOracle>>,
        opts: RuntimeOptions,
    ) -> Self {
        Monitor {
            images,
            oracles,
            opts: RuntimeOptions {
                verify_on_load: false,
                view: View::Shared,
                ..opts
            },
        }
    }

    pub fn oracle(&self, index: usize) -> Option<&ImageOracle> {
        self.oracles.get(index)?.as_ref()
    }

    pub fn run(&self, entry: usize, stdin: &[u8]) -> Result<MonitorReport, LoadError> {
        let state = MonitorState {
            oracles: &self.oracles,
            violations: Vec::new(),
            count: 0,
            fetched: BTreeMap::new(),
        };
        let mut rt = Runtime::with_monitor(self.images, entry, stdin, self.opts, Some(state))?;
        rt.run_to_completion();
        let m = rt.take_monitor().expect("monitor state present");
        Ok(MonitorReport {
            run: rt.report(),
            violations: m.violations,
            violation_count: m.count,
            fetched: m.fetched,
        })
    }
}

/// One monitored run of `images[entry]`.
pub fn monitor_run(
    images: &[SipbImage],
    entry: usize,
    stdin: &[u8],
    opts: RuntimeOptions,
) -> Result<MonitorReport, LoadError> {
    Monitor::new(images, opts).run(entry, stdin)
}

/// Seeded stdin vectors for fuzzing: a mix of printable text, raw bytes and
/// empty input, each at most `max_len` bytes.
pub fn fuzz_inputs(seed: u64, count: usize, max_len: usize) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(0..=max_len);
            match rng.gen_range(0..4) {
                0 => Vec::new(),
                1 => (0..len).map(|_| rng.gen_range(0x20u8..0x7f)).collect(),
                _ => (0..len).map(|_| rng.gen()).collect(),
            }
        })
        .collect()
}
