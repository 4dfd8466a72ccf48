//! The static verifier.
//!
//! Stages run in order and stop at the first stage that reports violations:
//!
//! 1. complete disassembly from every cfi_label ([`stage1_disassemble`]),
//! 2. instruction-set blacklist ([`stage2_instruction_set`]),
//! 3. control-transfer rules ([`stage3_control`]),
//! 4. memory-access rules over the range analysis ([`stage4_memory`]).

mod control;
mod disasm;
mod memory;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analysis::{build_cfg, range_analysis, AnalysisOptions, FactMap, ReachableSet};
use crate::image::SipbImage;
use crate::isa::{DangerKind, Op, PseudoInstr};

pub use control::{adjusts_rsp, interior_set, stage3_control};
pub use disasm::{stage1_disassemble, stage1_partial};
pub use memory::{stage4_memory, Stage4Report};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationCode {
    AbortOutOfRange,
    AbortInvalidInstruction,
    AbortOverlap,
    AbortEntryNotLabel,
    #[serde(rename = "E_SGX")]
    Sgx,
    #[serde(rename = "E_MPX_MUT")]
    MpxMutation,
    #[serde(rename = "E_XSTATE")]
    XState,
    #[serde(rename = "E_SEGBASE")]
    SegBase,
    #[serde(rename = "E_SYSCALL_IN_USER")]
    SyscallInUser,
    #[serde(rename = "E_CT_TARGET")]
    CtTarget,
    #[serde(rename = "E_CT_UNGUARDED")]
    CtUnguarded,
    #[serde(rename = "E_CT_MEM")]
    CtMem,
    #[serde(rename = "E_CT_RET")]
    CtRet,
    #[serde(rename = "E_CT_INTERIOR")]
    CtInterior,
    #[serde(rename = "E_MEM_UNPROVEN")]
    MemUnproven,
    #[serde(rename = "E_MEM_DIRECT")]
    MemDirect,
    #[serde(rename = "E_MEM_VSIB")]
    MemVsib,
    #[serde(rename = "E_MEM_RSP")]
    MemRsp,
}

impl ViolationCode {
    pub const ALL: [ViolationCode; 18] = [
        ViolationCode::AbortOutOfRange,
        ViolationCode::AbortInvalidInstruction,
        ViolationCode::AbortOverlap,
        ViolationCode::AbortEntryNotLabel,
        ViolationCode::Sgx,
        ViolationCode::MpxMutation,
        ViolationCode::XState,
        ViolationCode::SegBase,
        ViolationCode::SyscallInUser,
        ViolationCode::CtTarget,
        ViolationCode::CtUnguarded,
        ViolationCode::CtMem,
        ViolationCode::CtRet,
        ViolationCode::CtInterior,
        ViolationCode::MemUnproven,
        ViolationCode::MemDirect,
        ViolationCode::MemVsib,
        ViolationCode::MemRsp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::AbortOutOfRange => "AbortOutOfRange",
            ViolationCode::AbortInvalidInstruction => "AbortInvalidInstruction",
            ViolationCode::AbortOverlap => "AbortOverlap",
            ViolationCode::AbortEntryNotLabel => "AbortEntryNotLabel",
            ViolationCode::Sgx => "E_SGX",
            ViolationCode::MpxMutation => "E_MPX_MUT",
            ViolationCode::XState => "E_XSTATE",
            ViolationCode::SegBase => "E_SEGBASE",
            ViolationCode::SyscallInUser => "E_SYSCALL_IN_USER",
            ViolationCode::CtTarget => "E_CT_TARGET",
            ViolationCode::CtUnguarded => "E_CT_UNGUARDED",
            ViolationCode::CtMem => "E_CT_MEM",
            ViolationCode::CtRet => "E_CT_RET",
            ViolationCode::CtInterior => "E_CT_INTERIOR",
            ViolationCode::MemUnproven => "E_MEM_UNPROVEN",
            ViolationCode::MemDirect => "E_MEM_DIRECT",
            ViolationCode::MemVsib => "E_MEM_VSIB",
            ViolationCode::MemRsp => "E_MEM_RSP",
        }
    }

    pub fn parse(s: &str) -> Option<ViolationCode> {
        ViolationCode::ALL.iter().copied().find(|c| c.as_str() == s)
    }

    pub fn stage(self) -> u8 {
        use ViolationCode::*;
        match self {
            AbortOutOfRange | AbortInvalidInstruction | AbortOverlap | AbortEntryNotLabel => 1,
            Sgx | MpxMutation | XState | SegBase | SyscallInUser => 2,
            CtTarget | CtUnguarded | CtMem | CtRet | CtInterior => 3,
            MemUnproven | MemDirect | MemVsib | MemRsp => 4,
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub stage: u8,
    pub offset: u64,
    pub code: ViolationCode,
    pub detail: String,
}

impl Violation {
    pub fn new(code: ViolationCode, offset: u64, detail: impl Into<String>) -> Self {
        Violation {
            stage: code.stage(),
            offset,
            code,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage {} {} at {:#x}: {}",
            self.stage, self.code, self.offset, self.detail
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub reachable_count: usize,
    pub cfi_label_count: usize,
    /// Static mem_guard count.
    pub guard_count: usize,
    pub cfi_guard_count: usize,
    /// Accesses justified by range facts rather than an adjacent guard.
    pub eliminated_guard_equiv: usize,
    pub confine_loads: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub violations: Vec<Violation>,
    pub stats: Stats,
}

impl Verdict {
    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    pub confine_loads: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            confine_loads: true,
        }
    }
}

impl From<VerifyOptions> for AnalysisOptions {
    fn from(o: VerifyOptions) -> Self {
        AnalysisOptions {
            confine_loads: o.confine_loads,
        }
    }
}

/// A verdict together with the intermediate results that produced it.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub verdict: Verdict,
    /// Present when Stage 1 succeeded.
    pub reachable: Option<ReachableSet>,
    /// Present when Stage 4 ran.
    pub facts: Option<FactMap>,
}

pub fn stage2_instruction_set(r: &ReachableSet) -> Vec<Violation> {
    r.instrs
        .values()
        .filter_map(|i| {
            let code = match &i.op {
                Op::Dangerous { kind, .. } => match kind {
                    DangerKind::SgxLeaf => ViolationCode::Sgx,
                    DangerKind::MpxMutation => ViolationCode::MpxMutation,
                    DangerKind::XStateRestore => ViolationCode::XState,
                    DangerKind::SegBaseWrite => ViolationCode::SegBase,
                },
                Op::SyscallGate => ViolationCode::SyscallInUser,
                _ => return None,
            };
            Some(Violation::new(
                code,
                i.address,
                format!("dangerous instruction `{}`", i),
            ))
        })
        .collect()
}

pub fn verify(img: &SipbImage) -> Verdict {
    verify_with(img, VerifyOptions::default())
}

pub fn verify_with(img: &SipbImage, opts: VerifyOptions) -> Verdict {
    analyze(img, opts).verdict
}

pub fn analyze(img: &SipbImage, opts: VerifyOptions) -> Analysis {
    let mut stats = Stats {
        confine_loads: opts.confine_loads,
        ..Stats::default()
    };
    let finish = |violations: Vec<Violation>,
                  stats: Stats,
                  reachable: Option<ReachableSet>,
                  facts: Option<FactMap>| Analysis {
        verdict: Verdict {
            accepted: violations.is_empty(),
            violations,
            stats,
        },
        reachable,
        facts,
    };

    let r = match stage1_disassemble(img) {
        Ok(r) => r,
        Err(v) => return finish(vec![v], stats, None, None),
    };
    stats.reachable_count = r.len();
    stats.cfi_label_count = r
        .instrs
        .values()
        .filter(|i| matches!(i.op, Op::CfiLabel { .. }))
        .count();
    for p in r.pseudos.values() {
        match p {
            PseudoInstr::MemGuard { .. } => stats.guard_count += 1,
            PseudoInstr::CfiGuard { .. } => stats.cfi_guard_count += 1,
            PseudoInstr::CfiLabel { .. } => {}
        }
    }

    let v2 = stage2_instruction_set(&r);
    if !v2.is_empty() {
        return finish(v2, stats, Some(r), None);
    }
    let v3 = stage3_control(&r);
    if !v3.is_empty() {
        return finish(v3, stats, Some(r), None);
    }
    let cfg = build_cfg(&r);
    let facts = range_analysis(&cfg, &r, opts.into()).facts;
    let report = stage4_memory(&r, &facts, opts);
    stats.eliminated_guard_equiv = report.fact_justified;
    finish(report.violations, stats, Some(r), Some(facts))
}
