use std::collections::BTreeSet;

use super::{Violation, ViolationCode};
use crate::analysis::ReachableSet;
use crate::isa::{Instruction, MemOperand, Op, PseudoInstr, Reg};

/// Whether `op` writes rsp other than through a push/pop-class access.
pub fn adjusts_rsp(op: &Op) -> bool {
    match op {
        Op::Pop(Reg::Rsp) => true,
        op if op.is_stack_access() => false,
        // Gathers write vector registers only; the clobber-all summary is
        // for range analysis.
        Op::VectorGather { .. } => false,
        op => op.written_regs().contains(&Reg::Rsp),
    }
}

pub(crate) fn rsp_operand() -> MemOperand {
    MemOperand::base(Reg::Rsp, 0)
}

/// Data access operand of `op`, for matching against a preceding guard.
fn accessed_operand(op: &Op) -> Option<&MemOperand> {
    match op {
        Op::Load { mem, .. } | Op::Store { mem, .. } | Op::JmpMem(mem) | Op::CallMem(mem) => {
            Some(mem)
        }
        _ => None,
    }
}

fn predecessor(r: &ReachableSet, addr: u64) -> Option<&Instruction> {
    r.instrs
        .range(..addr)
        .next_back()
        .map(|(_, i)| i)
        .filter(|i| i.end() == addr)
}

/// Offsets no control transfer may target.
pub fn interior_set(r: &ReachableSet) -> BTreeSet<u64> {
    let mut interior = BTreeSet::new();
    for p in r.pseudos.values() {
        match p {
            PseudoInstr::MemGuard {
                lower,
                upper,
                guarded_operand,
            } => {
                interior.insert(upper.address);
                if let Some(next) = r.next_of(upper) {
                    if accessed_operand(&next.op) == Some(guarded_operand) {
                        interior.insert(next.address);
                    }
                }
                if *guarded_operand == rsp_operand() {
                    if let Some(prev) = predecessor(r, lower.address) {
                        if adjusts_rsp(&prev.op) {
                            interior.insert(lower.address);
                        }
                    }
                }
            }
            PseudoInstr::CfiGuard {
                lower,
                upper,
                target_reg,
                ..
            } => {
                interior.insert(lower.address);
                interior.insert(upper.address);
                if let Some(next) = r.next_of(upper) {
                    if matches!(next.op, Op::JmpReg(t) | Op::CallReg(t) if t == *target_reg) {
                        interior.insert(next.address);
                    }
                }
            }
            PseudoInstr::CfiLabel { .. } => {}
        }
    }
    // Indirect transfers must be entered through their cfi_guard.
    interior.extend(
        r.instrs
            .values()
            .filter(|i| i.op.is_register_indirect())
            .map(|i| i.address),
    );
    interior
}

pub fn stage3_control(r: &ReachableSet) -> Vec<Violation> {
    let interior = interior_set(r);
    let mut out = Vec::new();
    for instr in r.instrs.values() {
        let a = instr.address;
        match &instr.op {
            Op::Jmp { target, .. } | Op::Jcc { target, .. } | Op::Call { target } => {
                let t = *target;
                let member = if t >= 0 { r.get(t as u64) } else { None };
                match member {
                    None => out.push(Violation::new(
                        ViolationCode::CtTarget,
                        a,
                        format!("direct target {:#x} is not a reachable instruction", t),
                    )),
                    Some(_) if interior.contains(&(t as u64)) => out.push(Violation::new(
                        ViolationCode::CtInterior,
                        a,
                        format!("direct target {:#x} is inside a guarded sequence", t),
                    )),
                    Some(ti) if ti.op.is_register_indirect() => out.push(Violation::new(
                        ViolationCode::CtTarget,
                        a,
                        format!("direct target {:#x} is a register-based indirect transfer", t),
                    )),
                    Some(_) => {}
                }
            }
            Op::JmpReg(reg) | Op::CallReg(reg) => {
                let guarded = matches!(
                    r.guard_ending_at(a),
                    Some(PseudoInstr::CfiGuard { target_reg, .. }) if target_reg == reg
                );
                if !guarded {
                    out.push(Violation::new(
                        ViolationCode::CtUnguarded,
                        a,
                        format!("`{}` is not immediately preceded by cfi_guard {}", instr, reg),
                    ));
                }
            }
            Op::JmpMem(_) | Op::CallMem(_) => out.push(Violation::new(
                ViolationCode::CtMem,
                a,
                format!("memory-based indirect transfer `{}`", instr),
            )),
            Op::Ret => out.push(Violation::new(
                ViolationCode::CtRet,
                a,
                "return-based indirect transfer",
            )),
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrumenter::{assemble_raw, InstrumentOptions};
    use crate::verifier::stage1_disassemble;

    fn stage3(src: &str, drop_target: bool) -> Vec<ViolationCode> {
        let img = assemble_raw(src, InstrumentOptions::default()).unwrap().image;
        let mut r = stage1_disassemble(&img).unwrap();
        if drop_target {
            // Stage 1 always decodes direct targets; remove one by hand.
            let t = r
                .instrs
                .values()
                .find_map(|i| match i.op {
                    Op::Jmp { target, .. } if target > 0 => Some(target as u64),
                    _ => None,
                })
                .unwrap();
            r.instrs.remove(&t);
        }
        stage3_control(&r).into_iter().map(|v| v.code).collect()
    }

    #[test]
    fn direct_target_outside_r() {
        let src = "func main:\n cfi_label\n jmp next\nnext:\n cfi_label\n jmp main\n";
        assert!(stage3(src, false).is_empty());
        assert_eq!(stage3(src, true), vec![ViolationCode::CtTarget]);
    }

    #[test]
    fn unguarded_indirect_is_interior_too() {
        let src = "func main:\n cfi_label\n jmp t\nt:\n jmp r8\n";
        assert_eq!(
            stage3(src, false),
            vec![ViolationCode::CtInterior, ViolationCode::CtUnguarded]
        );
    }
}
