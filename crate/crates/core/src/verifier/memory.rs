use super::control::{adjusts_rsp, rsp_operand};
use super::{Violation, ViolationCode, VerifyOptions};
use crate::analysis::{FactMap, ReachableSet};
use crate::isa::{AluImmOp, Instruction, MemOperand, Op, PseudoInstr, Reg, GUARD_SIZE};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stage4Report {
    pub violations: Vec<Violation>,
    pub guard_adjacent: usize,
    pub fact_justified: usize,
    pub stack_accesses: usize,
}

fn is_push_class(op: &Op) -> bool {
    matches!(op, Op::Push(_) | Op::Call { .. } | Op::CallReg(_))
        || matches!(op, Op::Pop(r) if *r != Reg::Rsp)
}

fn starts_rsp_guard(r: &ReachableSet, addr: u64) -> bool {
    matches!(
        r.pseudos.get(&addr),
        Some(PseudoInstr::MemGuard { guarded_operand, .. }) if *guarded_operand == rsp_operand()
    )
}

/// Every rsp mutation must be re-checked before rsp is used again.
fn check_rsp_discipline(r: &ReachableSet, instr: &Instruction, out: &mut Vec<Violation>) {
    if !adjusts_rsp(&instr.op) {
        return;
    }
    let next = r.next_of(instr);
    let guarded_next = starts_rsp_guard(r, instr.end());
    let push_next = next.map(|n| is_push_class(&n.op)).unwrap_or(false);
    match &instr.op {
        Op::AluImm {
            op: AluImmOp::Add | AluImmOp::Sub,
            dst: Reg::Rsp,
            imm,
        } => {
            if (*imm as i64).abs() > GUARD_SIZE {
                out.push(Violation::new(
                    ViolationCode::MemRsp,
                    instr.address,
                    format!("rsp adjusted by {} (more than one guard size)", imm),
                ));
            } else if !(guarded_next || push_next) {
                out.push(Violation::new(
                    ViolationCode::MemRsp,
                    instr.address,
                    "rsp adjustment not followed by mem_guard [rsp] or a push/pop",
                ));
            }
        }
        _ => {
            if !guarded_next {
                out.push(Violation::new(
                    ViolationCode::MemRsp,
                    instr.address,
                    format!("`{}` sets rsp without a following mem_guard [rsp]", instr),
                ));
            }
        }
    }
}

enum Access<'a> {
    Operand(&'a MemOperand),
    Direct,
    Vsib,
    Stack,
}

fn access_of(op: &Op, confine_loads: bool) -> Option<Access<'_>> {
    match op {
        Op::Store { mem, .. } => Some(Access::Operand(mem)),
        Op::Load { mem, .. } if confine_loads => Some(Access::Operand(mem)),
        Op::StoreAbs { .. } => Some(Access::Direct),
        Op::LoadAbs { .. } if confine_loads => Some(Access::Direct),
        Op::VectorGather { .. } => Some(Access::Vsib),
        op if op.is_stack_access() => Some(Access::Stack),
        _ => None,
    }
}

pub fn stage4_memory(r: &ReachableSet, facts: &FactMap, opts: VerifyOptions) -> Stage4Report {
    let mut rep = Stage4Report::default();
    for instr in r.instrs.values() {
        check_rsp_discipline(r, instr, &mut rep.violations);
        let a = instr.address;
        // The CfiGuard's own load is exempt: the runtime gives it fetch
        // permission semantics and the following checks validate its value.
        if r.is_cfi_guard_load(a) {
            continue;
        }
        let Some(access) = access_of(&instr.op, opts.confine_loads) else {
            continue;
        };
        match access {
            Access::Stack => rep.stack_accesses += 1,
            Access::Direct => rep.violations.push(Violation::new(
                ViolationCode::MemDirect,
                a,
                format!("direct memory offset in `{}`", instr),
            )),
            Access::Vsib => rep.violations.push(Violation::new(
                ViolationCode::MemVsib,
                a,
                "vector SIB access",
            )),
            Access::Operand(MemOperand::RipRelative { .. } | MemOperand::DirectOffset { .. }) => {
                rep.violations.push(Violation::new(
                    ViolationCode::MemDirect,
                    a,
                    format!("fixed-address access `{}`", instr),
                ))
            }
            Access::Operand(MemOperand::Vsib { .. }) => rep.violations.push(Violation::new(
                ViolationCode::MemVsib,
                a,
                "vector SIB access",
            )),
            Access::Operand(mem) => {
                let adjacent = matches!(
                    r.guard_ending_at(a),
                    Some(PseudoInstr::MemGuard { guarded_operand, .. }) if guarded_operand == mem
                );
                if adjacent {
                    rep.guard_adjacent += 1;
                    continue;
                }
                let justified = match mem {
                    MemOperand::BaseDisp { base, disp } => facts
                        .get(&a)
                        .map(|f| f.get(*base).admits(*disp as i64))
                        .unwrap_or(false),
                    _ => false,
                };
                if justified {
                    rep.fact_justified += 1;
                } else {
                    let fact = facts
                        .get(&a)
                        .and_then(|f| mem.base_reg().map(|b| f.get(b).to_string()))
                        .unwrap_or_else(|| "T".into());
                    rep.violations.push(Violation::new(
                        ViolationCode::MemUnproven,
                        a,
                        format!("`{}` is neither guarded nor covered (base fact {})", instr, fact),
                    ));
                }
            }
        }
    }
    rep
}
