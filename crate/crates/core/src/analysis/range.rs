use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cfg, ReachableSet};
use crate::isa::{AluImmOp, Instruction, MemOperand, Op, Reg, GUARD_SIZE};

/// Interval of a register relative to the data region.
///
/// `Dev { lo, hi }` asserts `D.begin + lo <= v <= (D.end - 1) + hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegRange {
    Top,
    Dev { lo: i64, hi: i64 },
}

impl RegRange {
    /// Builds a deviation interval, widening to `Top` outside one guard size.
    pub fn dev(lo: i64, hi: i64) -> RegRange {
        debug_assert!(lo <= hi);
        if lo < -GUARD_SIZE || hi > GUARD_SIZE {
            RegRange::Top
        } else {
            RegRange::Dev { lo, hi }
        }
    }

    pub fn shift(self, k: i64) -> RegRange {
        match self {
            RegRange::Top => RegRange::Top,
            RegRange::Dev { lo, hi } => match (lo.checked_add(k), hi.checked_add(k)) {
                (Some(lo), Some(hi)) => RegRange::dev(lo, hi),
                _ => RegRange::Top,
            },
        }
    }

    pub fn join(self, other: RegRange) -> RegRange {
        match (self, other) {
            (RegRange::Dev { lo: a, hi: b }, RegRange::Dev { lo: c, hi: d }) => {
                RegRange::dev(a.min(c), b.max(d))
            }
            _ => RegRange::Top,
        }
    }

    /// Lattice order.
    pub fn leq(self, other: RegRange) -> bool {
        match (self, other) {
            (_, RegRange::Top) => true,
            (RegRange::Top, _) => false,
            (RegRange::Dev { lo: a, hi: b }, RegRange::Dev { lo: c, hi: d }) => c <= a && b <= d,
        }
    }

    /// Whether an access at `reg + disp` provably starts within one guard
    /// size of the data region.
    pub fn admits(self, disp: i64) -> bool {
        match self {
            RegRange::Top => false,
            RegRange::Dev { lo, hi } => lo + disp >= -GUARD_SIZE && hi + disp <= GUARD_SIZE,
        }
    }

    /// Concrete soundness check against a domain's data bounds
    /// (`d_end` exclusive).
    pub fn holds(self, value: u64, d_begin: u64, d_end: u64) -> bool {
        match self {
            RegRange::Top => true,
            RegRange::Dev { lo, hi } => {
                let v = value as i128;
                v >= d_begin as i128 + lo as i128 && v <= d_end as i128 - 1 + hi as i128
            }
        }
    }
}

impl fmt::Display for RegRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegRange::Top => f.write_str("T"),
            RegRange::Dev { lo, hi } => write!(f, "[{},{}]", lo, hi),
        }
    }
}

/// Per-register facts at one program point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RangeFact {
    pub regs: [RegRange; 16],
}

impl RangeFact {
    pub fn top() -> RangeFact {
        RangeFact {
            regs: [RegRange::Top; 16],
        }
    }

    pub fn get(&self, r: Reg) -> RegRange {
        self.regs[r.index() as usize]
    }

    pub fn set(&mut self, r: Reg, v: RegRange) {
        self.regs[r.index() as usize] = v;
    }

    pub fn join(&self, other: &RangeFact) -> RangeFact {
        let mut out = *self;
        for (a, b) in out.regs.iter_mut().zip(other.regs.iter()) {
            *a = a.join(*b);
        }
        out
    }

    pub fn leq(&self, other: &RangeFact) -> bool {
        self.regs.iter().zip(other.regs.iter()).all(|(a, b)| a.leq(*b))
    }

    /// Registers with a non-Top fact.
    pub fn known(&self) -> impl Iterator<Item = (Reg, RegRange)> + '_ {
        Reg::ALL
            .iter()
            .map(|r| (*r, self.get(*r)))
            .filter(|(_, v)| *v != RegRange::Top)
    }
}

impl fmt::Display for RangeFact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (r, v) in self.known() {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            write!(f, "{}={}", r, v)?;
        }
        if first {
            f.write_str("T")?;
        }
        Ok(())
    }
}

/// Facts holding immediately before each reachable instruction.
pub type FactMap = BTreeMap<u64, RangeFact>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnalysisOptions {
    /// Whether loads are confined; only then does a completed load prove its
    /// address was in the data region.
    pub confine_loads: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            confine_loads: true,
        }
    }
}

/// Structural knowledge the transfer function needs about an instruction's
/// position inside pseudo-instructions.
#[derive(Clone, Copy, Debug, Default)]
pub struct TransferContext<'a> {
    /// Set when the instruction is the upper check of a MemGuard.
    pub completes_mem_guard: Option<&'a MemOperand>,
    /// Set when the instruction is the load opening a CfiGuard.
    pub cfi_guard_load: bool,
}

impl<'a> TransferContext<'a> {
    pub fn of(r: &'a ReachableSet, addr: u64) -> Self {
        TransferContext {
            completes_mem_guard: r.mem_guard_upper_at(addr),
            cfi_guard_load: r.is_cfi_guard_load(addr),
        }
    }
}

/// `base := Dev(-disp, -disp)` for an address `[base + disp]` known to lie in D.
fn confine_base(fact: &mut RangeFact, mem: &MemOperand) {
    if let MemOperand::BaseDisp { base, disp } = mem {
        let d = *disp as i64;
        if d.abs() <= GUARD_SIZE {
            fact.set(*base, RegRange::dev(-d, -d));
        }
    }
}

/// The fact holding after `instr`, given the fact before it.
pub fn transfer(
    instr: &Instruction,
    before: &RangeFact,
    ctx: TransferContext<'_>,
    opts: AnalysisOptions,
) -> RangeFact {
    let mut f = *before;
    match &instr.op {
        Op::CfiLabel { .. } => return RangeFact::top(),
        Op::MovRR { dst, src } => f.set(*dst, before.get(*src)),
        Op::Load { dst, mem } => {
            if opts.confine_loads && !ctx.cfi_guard_load {
                confine_base(&mut f, mem);
            }
            f.set(*dst, RegRange::Top);
        }
        Op::Store { mem, .. } => confine_base(&mut f, mem),
        Op::Lea { dst, mem } => {
            let v = match mem {
                MemOperand::BaseDisp { base, disp } => before.get(*base).shift(*disp as i64),
                _ => RegRange::Top,
            };
            f.set(*dst, v);
        }
        Op::AluImm { op, dst, imm } => {
            let k = match op {
                AluImmOp::Add => *imm as i64,
                AluImmOp::Sub => -(*imm as i64),
            };
            f.set(*dst, before.get(*dst).shift(k));
        }
        Op::BndCheck { .. } => {
            if let Some(mem) = ctx.completes_mem_guard {
                confine_base(&mut f, mem);
            }
        }
        op => {
            for r in op.written_regs() {
                f.set(r, RegRange::Top);
            }
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Solution {
    pub facts: FactMap,
    /// Number of node visits the worklist performed.
    pub iterations: usize,
}

pub fn range_analysis(cfg: &Cfg, r: &ReachableSet, opts: AnalysisOptions) -> Solution {
    range_analysis_ordered(cfg, r, opts, None)
}

/// Worklist solver. With a seed, the next node is drawn at random from the
/// worklist; without one, the lowest address goes first.
pub fn range_analysis_ordered(
    cfg: &Cfg,
    r: &ReachableSet,
    opts: AnalysisOptions,
    seed: Option<u64>,
) -> Solution {
    let mut facts_in: BTreeMap<u64, RangeFact> = BTreeMap::new();
    let mut pending: BTreeSet<u64> = BTreeSet::new();
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);

    for root in &cfg.roots {
        facts_in.insert(*root, RangeFact::top());
        pending.insert(*root);
    }

    let mut iterations = 0;
    while !pending.is_empty() {
        let n = match rng.as_mut() {
            Some(rng) => {
                let k = rng.gen_range(0..pending.len());
                let n = *pending.iter().nth(k).unwrap();
                pending.remove(&n);
                n
            }
            None => pending.pop_first().unwrap(),
        };
        iterations += 1;
        let instr = &r.instrs[&n];
        let out = transfer(instr, &facts_in[&n], TransferContext::of(r, n), opts);
        for (s, _) in cfg.successors(n) {
            let merged = match facts_in.get(s) {
                Some(old) => old.join(&out),
                None => out,
            };
            if facts_in.get(s) != Some(&merged) {
                facts_in.insert(*s, merged);
                pending.insert(*s);
            }
        }
    }
    Solution {
        facts: facts_in,
        iterations,
    }
}
