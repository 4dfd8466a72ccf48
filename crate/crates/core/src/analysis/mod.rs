//! Control-flow graph construction and the interval range analysis shared by
//! the optimizer and the memory-access verifier.

mod cfg;
mod range;

use std::collections::{BTreeMap, BTreeSet};

use crate::isa::{recognize_pseudo, Instruction, MemOperand, PseudoInstr};

pub use cfg::{build_cfg, Cfg, EdgeKind};
pub use range::{
    range_analysis, range_analysis_ordered, transfer, AnalysisOptions, FactMap, RangeFact,
    RegRange, Solution, TransferContext,
};

/// The reachable-instruction set produced by complete disassembly.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReachableSet {
    pub instrs: BTreeMap<u64, Instruction>,
    /// Pseudo-instructions keyed by the address of their first component.
    pub pseudos: BTreeMap<u64, PseudoInstr>,
    pub entry_labels: BTreeSet<u64>,
}

impl ReachableSet {
    /// Builds the set from non-overlapping instructions and recognizes every
    /// pseudo-instruction whose components are all members.
    pub fn new(instrs: BTreeMap<u64, Instruction>, entry_labels: BTreeSet<u64>) -> Self {
        let ordered: Vec<Instruction> = instrs.values().cloned().collect();
        let mut pseudos = BTreeMap::new();
        for idx in 0..ordered.len() {
            if let Some(p) = recognize_pseudo(&ordered, idx) {
                pseudos.insert(p.start(), p);
            }
        }
        ReachableSet {
            instrs,
            pseudos,
            entry_labels,
        }
    }

    pub fn get(&self, addr: u64) -> Option<&Instruction> {
        self.instrs.get(&addr)
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.instrs.contains_key(&addr)
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// The member immediately following `instr` in the byte stream, if any.
    pub fn next_of(&self, instr: &Instruction) -> Option<&Instruction> {
        self.instrs.get(&instr.end())
    }

    /// The guard (MemGuard or CfiGuard) that ends exactly at `addr`.
    pub fn guard_ending_at(&self, addr: u64) -> Option<&PseudoInstr> {
        // Guards are at most three instructions long, so the start lies
        // within 3 * 15 bytes.
        let lo = addr.saturating_sub(45);
        self.pseudos
            .range(lo..addr)
            .map(|(_, p)| p)
            .find(|p| p.end() == addr && !matches!(p, PseudoInstr::CfiLabel { .. }))
    }

    /// Operand of the MemGuard whose upper check sits at `addr`.
    pub fn mem_guard_upper_at(&self, addr: u64) -> Option<&MemOperand> {
        self.instrs.get(&addr)?;
        match self.guard_ending_at(self.instrs[&addr].end()) {
            Some(PseudoInstr::MemGuard {
                upper,
                guarded_operand,
                ..
            }) if upper.address == addr => Some(guarded_operand),
            _ => None,
        }
    }

    /// Whether `addr` is the load that opens a CfiGuard.
    pub fn is_cfi_guard_load(&self, addr: u64) -> bool {
        matches!(self.pseudos.get(&addr), Some(PseudoInstr::CfiGuard { .. }))
    }

    pub fn mem_guards(&self) -> impl Iterator<Item = &PseudoInstr> {
        self.pseudos
            .values()
            .filter(|p| matches!(p, PseudoInstr::MemGuard { .. }))
    }
}
