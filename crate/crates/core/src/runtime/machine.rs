use std::collections::BTreeMap;
use std::sync::Arc;

use super::layout::{load_code_with, DomainLayout, Region, SLOT_SIZE};
use super::libos::Runtime;
use super::monitor::PolicyKind;
use super::{
    Bound, Counters, Fault, FaultKind, Flags, LoadError, RuntimeOptions, SipState, SipStatus, View,
};
use crate::image::SipbImage;
use crate::isa::{
    decode_at, AluImmOp, AluOp, BndOperand, BoundSide, Cond, DecodeError, Instruction, MemOperand,
    Op, Reg, CFI_LABEL_LEN,
};

/// One loaded domain: region C (read-only after load) and region D.
pub(super) struct Domain {
    pub layout: DomainLayout,
    pub code: Vec<u8>,
    pub data: Vec<u8>,
    cache: Vec<Option<Arc<Instruction>>>,
}

impl Domain {
    fn fetch(&mut self, off: u64) -> Result<Arc<Instruction>, DecodeError> {
        let i = off as usize;
        if let Some(Some(instr)) = self.cache.get(i) {
            return Ok(instr.clone());
        }
        let instr = Arc::new(decode_at(&self.code, i, off)?);
        self.cache[i] = Some(instr.clone());
        Ok(instr)
    }

    /// Whether a cfi_label carrying this domain's ID starts at `addr`.
    pub fn has_label_at(&self, addr: u64) -> bool {
        if !self.layout.in_code(addr) {
            return false;
        }
        let off = (addr - self.layout.c_begin) as usize;
        let want = self.layout.label_value().to_le_bytes();
        self.code.get(off..off + CFI_LABEL_LEN) == Some(&want[..])
    }
}

/// Builds the domain and initial SIP state for `img`.
pub(super) fn load(
    img: &SipbImage,
    image_index: usize,
    domain_id: u32,
    slot: usize,
    opts: &RuntimeOptions,
) -> Result<(Domain, SipState), LoadError> {
    img.check_bounds()
        .map_err(|e| LoadError::Format(e.to_string()))?;
    if opts.verify_on_load {
        let v = crate::verifier::verify_with(
            img,
            crate::verifier::VerifyOptions {
                confine_loads: opts.confine_loads,
            },
        );
        if !v.accepted {
            return Err(LoadError::VerifyRejected { codes: v.codes() });
        }
    }
    let layout = DomainLayout::for_image(img, slot as u64, domain_id)
        .ok_or(LoadError::CapacityExceeded)?;
    if img.data.len() as u64 > img.d_capacity {
        return Err(LoadError::CapacityExceeded);
    }
    // Without the label check no ID is ever compared.
    let code = load_code_with(img, &layout, opts.syscall_label_check);
    let mut data = vec![0u8; img.d_capacity as usize];
    data[..img.data.len()].copy_from_slice(&img.data);
    let mut regs = [0u64; 16];
    regs[Reg::Rsp.index() as usize] = layout.d_end - 16;
    regs[Reg::R14.index() as usize] = layout.trampoline();
    let label = layout.label_value();
    let mut bnd = [Bound::default(); 4];
    bnd[0] = Bound {
        lb: layout.d_begin,
        ub: layout.d_end - 1,
    };
    bnd[1] = Bound {
        lb: label,
        ub: label,
    };
    let state = SipState {
        pid: domain_id,
        image_index,
        slot,
        layout,
        regs,
        rip: layout.c_begin + img.entry as u64,
        bnd,
        flags: Flags::default(),
        status: SipStatus::Running,
        fds: BTreeMap::new(),
        stdout: Vec::new(),
        counters: Counters::default(),
    };
    let cache = vec![None; code.len()];
    Ok((
        Domain {
            layout,
            code,
            data,
            cache,
        },
        state,
    ))
}

pub(super) enum StepOutcome {
    Continue,
    Fault(Fault),
    SyscallRequest,
}

enum Flow {
    Next,
    Jump(u64),
    /// Register- or memory-indirect transfer (checked by the monitor).
    Indirect(u64),
    Syscall,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Access {
    Read,
    Write,
    /// The load that opens a CfiGuard: fetch permission instead of data
    /// permission.
    GuardLoad,
}

fn reg(s: &SipState, r: Reg) -> u64 {
    s.regs[r.index() as usize]
}

fn set(s: &mut SipState, r: Reg, v: u64) {
    s.regs[r.index() as usize] = v;
}

fn add_flags(a: u64, b: u64) -> (u64, Flags) {
    let (res, cf) = a.overflowing_add(b);
    let of = ((a ^ res) & (b ^ res)) >> 63 == 1;
    (res, result_flags(res, cf, of))
}

fn sub_flags(a: u64, b: u64) -> (u64, Flags) {
    let (res, cf) = a.overflowing_sub(b);
    let of = ((a ^ b) & (a ^ res)) >> 63 == 1;
    (res, result_flags(res, cf, of))
}

fn result_flags(res: u64, cf: bool, of: bool) -> Flags {
    Flags {
        zf: res == 0,
        sf: (res as i64) < 0,
        of,
        cf,
    }
}

fn cond_holds(c: Cond, f: Flags) -> bool {
    match c {
        Cond::E => f.zf,
        Cond::Ne => !f.zf,
        Cond::L => f.sf != f.of,
        Cond::Ge => f.sf == f.of,
    }
}

impl Runtime<'_> {
    fn slot_of(&self, addr: u64) -> Option<usize> {
        let s = (addr / SLOT_SIZE).checked_sub(1)? as usize;
        (s < self.domains.len()).then_some(s)
    }

    fn region(&self, addr: u64) -> Option<(usize, Region)> {
        let s = self.slot_of(addr)?;
        Some((s, self.domains[s].layout.region_of(addr)?))
    }

    fn flag(&mut self, si: usize, kind: PolicyKind, detail: String) {
        let state = &self.sips[si];
        if let Some(m) = self.monitor.as_mut() {
            m.record(state, kind, detail);
        }
    }

    /// Resolves an 8-byte data access to (slot, offset in that slot's region).
    fn resolve(&mut self, si: usize, addr: u64, access: Access) -> Result<(usize, Region, usize), Fault> {
        let pc = self.sips[si].rip;
        let own = self.sips[si].slot;
        let fault = |k: FaultKind, d: &str| Err(Fault::new(k, pc, format!("{} {:#x}", d, addr)));
        let Some(last) = addr.checked_add(7) else {
            return fault(FaultKind::UnmappedAccess, "access wraps at");
        };
        let (first_r, last_r) = (self.region(addr), self.region(last));
        let Some((slot, region)) = first_r else {
            return fault(FaultKind::UnmappedAccess, "unmapped address");
        };
        if last_r != first_r {
            return fault(FaultKind::UnmappedAccess, "access straddles a region boundary at");
        }
        let foreign = slot != own;
        if foreign && self.opts.view == View::Isolated {
            return fault(FaultKind::UnmappedAccess, "foreign domain address");
        }
        let l = self.domains[slot].layout;
        match region {
            Region::Guard1 | Region::Guard2 => fault(FaultKind::UnmappedAccess, "guard region"),
            Region::Code => {
                if access == Access::GuardLoad {
                    Ok((slot, region, (addr - l.c_begin) as usize))
                } else {
                    fault(FaultKind::PermissionDenied, "data access to code region")
                }
            }
            Region::Data => {
                if foreign {
                    self.flag(
                        si,
                        PolicyKind::DataOutsideD,
                        format!("access to {:#x} in domain {}", addr, l.domain_id),
                    );
                }
                Ok((slot, region, (addr - l.d_begin) as usize))
            }
        }
    }

    fn read64(&mut self, si: usize, addr: u64, access: Access) -> Result<u64, Fault> {
        let (slot, region, off) = self.resolve(si, addr, access)?;
        let d = &self.domains[slot];
        let bytes = match region {
            Region::Code => &d.code[off..off + 8],
            _ => &d.data[off..off + 8],
        };
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    fn write64(&mut self, si: usize, addr: u64, v: u64) -> Result<(), Fault> {
        let (slot, _, off) = self.resolve(si, addr, Access::Write)?;
        self.domains[slot].data[off..off + 8].copy_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn push(&mut self, si: usize, v: u64) -> Result<(), Fault> {
        let a = reg(&self.sips[si], Reg::Rsp).wrapping_sub(8);
        self.write64(si, a, v)?;
        set(&mut self.sips[si], Reg::Rsp, a);
        Ok(())
    }

    fn pop(&mut self, si: usize) -> Result<u64, Fault> {
        let a = reg(&self.sips[si], Reg::Rsp);
        let v = self.read64(si, a, Access::Read)?;
        set(&mut self.sips[si], Reg::Rsp, a.wrapping_add(8));
        Ok(v)
    }

    fn ea(&self, si: usize, m: &MemOperand, next: u64) -> Result<u64, Fault> {
        let s = &self.sips[si];
        Ok(match m {
            MemOperand::BaseDisp { base, disp } => reg(s, *base).wrapping_add(*disp as i64 as u64),
            MemOperand::BaseIndexDisp {
                base,
                index,
                scale,
                disp,
            } => reg(s, *base)
                .wrapping_add(reg(s, *index).wrapping_mul(*scale as u64))
                .wrapping_add(*disp as i64 as u64),
            MemOperand::RipRelative { disp } => next.wrapping_add(*disp as i64 as u64),
            MemOperand::DirectOffset { addr } => *addr,
            MemOperand::Vsib { .. } => {
                return Err(Fault::new(
                    FaultKind::DangerousInstr,
                    s.rip,
                    "vector-indexed addressing",
                ))
            }
        })
    }

    /// Whether the load at `off` in `slot` is structurally the first
    /// instruction of a CfiGuard triple.
    fn is_guard_load(&mut self, slot: usize, instr: &Instruction) -> bool {
        let Op::Load {
            dst,
            mem: MemOperand::BaseDisp { base, disp: 0 },
        } = instr.op
        else {
            return false;
        };
        if dst == base {
            return false;
        }
        let d = &mut self.domains[slot];
        let Ok(lower) = d.fetch(instr.end()) else {
            return false;
        };
        let Ok(upper) = d.fetch(lower.end()) else {
            return false;
        };
        let check = |i: &Instruction, side| {
            i.op == Op::BndCheck {
                side,
                bnd: 1,
                operand: BndOperand::Reg(dst),
            }
        };
        check(&lower, BoundSide::Lower) && check(&upper, BoundSide::Upper)
    }

    /// Locates the instruction at `pc`: (slot, offset within C).
    fn locate_fetch(&mut self, si: usize, pc: u64) -> Result<(usize, u64), Fault> {
        let own = self.sips[si].slot;
        let Some((slot, region)) = self.region(pc) else {
            return Err(Fault::new(FaultKind::UnmappedAccess, pc, "fetch from unmapped memory"));
        };
        if slot != own && self.opts.view == View::Isolated {
            return Err(Fault::new(FaultKind::UnmappedAccess, pc, "fetch from foreign domain"));
        }
        match region {
            Region::Code => Ok((slot, pc - self.domains[slot].layout.c_begin)),
            Region::Data => Err(Fault::new(FaultKind::NonExecutableFetch, pc, "fetch from data region")),
            Region::Guard1 | Region::Guard2 => {
                Err(Fault::new(FaultKind::UnmappedAccess, pc, "fetch from guard region"))
            }
        }
    }

    /// Fetch, decode and execute one instruction of SIP `si`.
    pub(super) fn step(&mut self, si: usize) -> StepOutcome {
        let pc = self.sips[si].rip;
        self.sips[si].counters.steps += 1;
        self.total_steps += 1;
        let fetched = self.locate_fetch(si, pc).and_then(|(slot, off)| {
            self.domains[slot]
                .fetch(off)
                .map(|i| (slot, i))
                .map_err(|e| match e {
                    DecodeError::TruncatedInstruction(_) => {
                        Fault::new(FaultKind::UnmappedAccess, pc, "instruction runs past region C")
                    }
                    DecodeError::UnknownOpcode(_) => {
                        Fault::new(FaultKind::InvalidOpcode, pc, "undecodable bytes")
                    }
                })
        });
        let (slot, instr) = match fetched {
            Ok(x) => x,
            Err(f) => {
                self.trace_line(pc, "?", Some(f.kind));
                return StepOutcome::Fault(f);
            }
        };
        if self.monitor.is_some() {
            self.monitor_fetch(si, slot, pc);
        }
        match self.exec(si, slot, &instr) {
            Ok(Flow::Next) => {
                self.trace_line(pc, instr.mnemonic(), None);
                self.sips[si].rip = self.domains[slot].layout.c_begin + instr.end();
                StepOutcome::Continue
            }
            Ok(Flow::Jump(t)) => {
                self.trace_line(pc, instr.mnemonic(), None);
                self.sips[si].rip = t;
                StepOutcome::Continue
            }
            Ok(Flow::Indirect(t)) => {
                self.trace_line(pc, instr.mnemonic(), None);
                // A target outside every region C faults on the next fetch,
                // so that transfer never completes.
                let fetchable = matches!(self.region(t), Some((_, Region::Code)));
                if self.monitor.is_some() && fetchable {
                    let own = self.sips[si].slot;
                    if !self.domains[own].has_label_at(t) {
                        self.flag(
                            si,
                            PolicyKind::IndirectNotLabel,
                            format!("{} to {:#x}", instr.mnemonic(), t),
                        );
                    }
                }
                self.sips[si].rip = t;
                StepOutcome::Continue
            }
            Ok(Flow::Syscall) => {
                self.trace_line(pc, instr.mnemonic(), None);
                StepOutcome::SyscallRequest
            }
            Err(f) => {
                self.trace_line(pc, instr.mnemonic(), Some(f.kind));
                StepOutcome::Fault(f)
            }
        }
    }

    fn trace_line(&mut self, pc: u64, mnemonic: &str, fault: Option<FaultKind>) {
        if !self.opts.trace {
            return;
        }
        let line = match fault {
            Some(k) => format!("pc={:#x} op={} fault={}", pc, mnemonic, k),
            None => format!("pc={:#x} op={}", pc, mnemonic),
        };
        self.trace.push(line);
    }

    fn exec(&mut self, si: usize, slot: usize, instr: &Instruction) -> Result<Flow, Fault> {
        let base = self.domains[slot].layout.c_begin;
        let next = base + instr.end();
        let pc = self.sips[si].rip;
        let s = &mut self.sips[si];
        match &instr.op {
            Op::MovImm { dst, imm } => set(s, *dst, *imm as u64),
            Op::MovRR { dst, src } => {
                let v = reg(s, *src);
                set(s, *dst, v);
            }
            Op::Lea { dst, mem } => {
                let a = self.ea(si, mem, next)?;
                set(&mut self.sips[si], *dst, a);
            }
            Op::AluImm { op, dst, imm } => {
                let a = reg(s, *dst);
                let (res, f) = match op {
                    AluImmOp::Add => add_flags(a, *imm as i64 as u64),
                    AluImmOp::Sub => sub_flags(a, *imm as i64 as u64),
                };
                set(s, *dst, res);
                s.flags = f;
            }
            Op::Alu { op, dst, src } => {
                let (a, b) = (reg(s, *dst), reg(s, *src));
                let (res, f) = match op {
                    AluOp::Add => add_flags(a, b),
                    AluOp::Sub | AluOp::Cmp => sub_flags(a, b),
                    AluOp::And => (a & b, result_flags(a & b, false, false)),
                    AluOp::Or => (a | b, result_flags(a | b, false, false)),
                    AluOp::Xor => (a ^ b, result_flags(a ^ b, false, false)),
                };
                if op.writes_dst() {
                    set(s, *dst, res);
                }
                s.flags = f;
            }
            Op::Load { dst, mem } => {
                let a = self.ea(si, mem, next)?;
                let access = if self.is_guard_load(slot, instr) {
                    Access::GuardLoad
                } else {
                    Access::Read
                };
                let v = self.read64(si, a, access)?;
                set(&mut self.sips[si], *dst, v);
            }
            Op::Store { mem, src } => {
                let a = self.ea(si, mem, next)?;
                let v = reg(&self.sips[si], *src);
                self.write64(si, a, v)?;
            }
            Op::LoadAbs { addr } => {
                let v = self.read64(si, *addr, Access::Read)?;
                set(&mut self.sips[si], Reg::Rax, v);
            }
            Op::StoreAbs { addr } => {
                let v = reg(s, Reg::Rax);
                self.write64(si, *addr, v)?;
            }
            Op::Push(r) => {
                let v = reg(s, *r);
                self.push(si, v)?;
            }
            Op::Pop(r) => {
                let v = self.pop(si)?;
                set(&mut self.sips[si], *r, v);
            }
            Op::Jmp { target, .. } => return Ok(Flow::Jump(base.wrapping_add(*target as u64))),
            Op::Jcc { cond, target } => {
                if cond_holds(*cond, s.flags) {
                    return Ok(Flow::Jump(base.wrapping_add(*target as u64)));
                }
            }
            Op::Call { target } => {
                self.push(si, next)?;
                return Ok(Flow::Jump(base.wrapping_add(*target as u64)));
            }
            Op::JmpReg(r) => return Ok(Flow::Indirect(reg(s, *r))),
            Op::CallReg(r) => {
                let t = reg(s, *r);
                self.push(si, next)?;
                return Ok(Flow::Indirect(t));
            }
            Op::JmpMem(m) => {
                let a = self.ea(si, m, next)?;
                return Ok(Flow::Indirect(self.read64(si, a, Access::Read)?));
            }
            Op::CallMem(m) => {
                let a = self.ea(si, m, next)?;
                let t = self.read64(si, a, Access::Read)?;
                self.push(si, next)?;
                return Ok(Flow::Indirect(t));
            }
            Op::Ret => return Ok(Flow::Indirect(self.pop(si)?)),
            Op::Nop | Op::NopLong { .. } | Op::CfiLabel { .. } => {}
            Op::BndCheck { side, bnd, operand } => {
                let v = match operand {
                    BndOperand::Reg(r) => reg(s, *r),
                    BndOperand::Mem(m) => self.ea(si, m, next)?,
                };
                let s = &mut self.sips[si];
                let Some(b) = s.bnd.get(*bnd as usize).copied() else {
                    return Err(Fault::new(FaultKind::InvalidOpcode, pc, "bound register"));
                };
                if *side == BoundSide::Lower {
                    match bnd {
                        0 => s.counters.mem_guard += 1,
                        1 => s.counters.cfi_guard += 1,
                        _ => {}
                    }
                }
                match side {
                    BoundSide::Lower if v < b.lb => {
                        return Err(Fault::new(
                            FaultKind::BoundLower,
                            pc,
                            format!("bndcl bnd{}: {:#x} < {:#x}", bnd, v, b.lb),
                        ))
                    }
                    BoundSide::Upper if v > b.ub => {
                        return Err(Fault::new(
                            FaultKind::BoundUpper,
                            pc,
                            format!("bndcu bnd{}: {:#x} > {:#x}", bnd, v, b.ub),
                        ))
                    }
                    _ => {}
                }
            }
            Op::SyscallGate => {
                if slot == s.slot && pc == s.layout.gate() {
                    return Ok(Flow::Syscall);
                }
                return Err(Fault::new(
                    FaultKind::DangerousInstr,
                    pc,
                    "syscall outside the trampoline",
                ));
            }
            Op::Dangerous { .. } | Op::VectorGather { .. } => {
                return Err(Fault::new(
                    FaultKind::DangerousInstr,
                    pc,
                    instr.mnemonic().to_string(),
                ))
            }
        }
        Ok(Flow::Next)
    }

    /// Copies `len` bytes out of SIP `si`'s data region.
    pub(super) fn read_user(&self, si: usize, addr: u64, len: u64) -> Vec<u8> {
        let s = &self.sips[si];
        let off = (addr - s.layout.d_begin) as usize;
        self.domains[s.slot].data[off..off + len as usize].to_vec()
    }

    pub(super) fn write_user(&mut self, si: usize, addr: u64, bytes: &[u8]) {
        let s = &self.sips[si];
        let off = (addr - s.layout.d_begin) as usize;
        let slot = s.slot;
        self.domains[slot].data[off..off + bytes.len()].copy_from_slice(bytes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_follow_x86() {
        let (r, f) = sub_flags(1, 2);
        assert_eq!(r, u64::MAX);
        assert!(f.cf && f.sf && !f.zf && !f.of);
        let (_, f) = sub_flags(i64::MIN as u64, 1);
        assert!(f.of && !f.sf);
        assert!(cond_holds(Cond::L, f) && !cond_holds(Cond::Ge, f));
        let (_, f) = add_flags(i64::MAX as u64, 1);
        assert!(f.of && f.sf);
        let (r, f) = add_flags(u64::MAX, 1);
        assert_eq!(r, 0);
        assert!(f.zf && f.cf && !f.of);
    }

    #[test]
    fn signed_less_uses_sf_xor_of() {
        let (_, f) = sub_flags(-5i64 as u64, 3);
        assert!(cond_holds(Cond::L, f));
        let (_, f) = sub_flags(3, -5i64 as u64);
        assert!(!cond_holds(Cond::L, f));
        assert!(cond_holds(Cond::Ge, f));
    }
}
