use std::collections::BTreeSet;

use super::{InstrumentError, Item, SInstr, SasmProgram};
use crate::isa::{AluImmOp, MemOperand, Op, Reg, GUARD_SIZE};
use crate::verifier::adjusts_rsp;

const R10: Reg = Reg::R10;
const R11: Reg = Reg::R11;

fn op(o: Op) -> Item {
    Item::Instr(SInstr::Op(o))
}

fn needs_return_label(item: &Item) -> bool {
    matches!(item, Item::Syscall) || matches!(item, Item::Instr(i) if i.is_call())
}

/// Places a cfi_label at every function entry, after every address-taken
/// code label, and after every call-class instruction.
pub fn insert_cfi_labels(mut p: SasmProgram) -> SasmProgram {
    let code_labels = p.code_labels();
    let taken: BTreeSet<String> = p
        .functions
        .iter()
        .flat_map(|f| &f.body)
        .filter_map(|i| match i {
            Item::Instr(SInstr::AddrOf { label, .. }) if code_labels.contains(label) => {
                Some(label.clone())
            }
            _ => None,
        })
        .collect();
    for f in &mut p.functions {
        let mut body = vec![Item::CfiLabel { domain_id: 0 }];
        for item in f.body.drain(..) {
            let label = matches!(&item, Item::Label(l) if taken.contains(l));
            let call = needs_return_label(&item);
            body.push(item);
            if label || call {
                body.push(Item::CfiLabel { domain_id: 0 });
            }
        }
        f.body = body;
    }
    p
}

struct Fresh(usize);

impl Fresh {
    fn next(&mut self) -> String {
        self.0 += 1;
        format!("@ret{}", self.0)
    }
}

/// Appends the return-site label, reusing a following cfi_label if present.
fn return_site(out: &mut Vec<Item>, label: String, next: Option<&Item>) {
    out.push(Item::Label(label));
    if !matches!(next, Some(Item::CfiLabel { .. })) {
        out.push(Item::CfiLabel { domain_id: 0 });
    }
}

/// Rewrites `ret`, memory-indirect and register-indirect transfers and
/// system calls into cfi_guard-protected register jumps.
pub fn lower_unsafe_transfers(mut p: SasmProgram) -> SasmProgram {
    let mut fresh = Fresh(0);
    for f in &mut p.functions {
        let items = std::mem::take(&mut f.body);
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let next = items.get(i + 1);
            match item {
                Item::Instr(SInstr::Op(Op::Ret)) => {
                    out.push(op(Op::Pop(R10)));
                    out.push(Item::CfiGuard {
                        target: R10,
                        scratch: R11,
                    });
                    out.push(op(Op::JmpReg(R10)));
                }
                Item::Instr(SInstr::Op(Op::JmpMem(m))) => {
                    out.push(Item::MemGuard(m.clone()));
                    out.push(op(Op::Load {
                        dst: R10,
                        mem: m.clone(),
                    }));
                    out.push(Item::CfiGuard {
                        target: R10,
                        scratch: R11,
                    });
                    out.push(op(Op::JmpReg(R10)));
                }
                Item::Instr(SInstr::Op(Op::JmpReg(r))) => {
                    out.push(Item::CfiGuard {
                        target: *r,
                        scratch: R11,
                    });
                    out.push(op(Op::JmpReg(*r)));
                }
                Item::Instr(SInstr::Op(Op::CallReg(r))) => {
                    let ret = fresh.next();
                    out.push(Item::Instr(SInstr::AddrOf {
                        dst: R10,
                        label: ret.clone(),
                    }));
                    out.push(op(Op::Push(R10)));
                    out.push(Item::CfiGuard {
                        target: *r,
                        scratch: R11,
                    });
                    out.push(op(Op::JmpReg(*r)));
                    return_site(&mut out, ret, next);
                }
                Item::Instr(SInstr::Op(Op::CallMem(m))) => {
                    let ret = fresh.next();
                    out.push(Item::MemGuard(m.clone()));
                    out.push(op(Op::Load {
                        dst: R10,
                        mem: m.clone(),
                    }));
                    out.push(Item::Instr(SInstr::AddrOf {
                        dst: R11,
                        label: ret.clone(),
                    }));
                    out.push(op(Op::Push(R11)));
                    out.push(Item::CfiGuard {
                        target: R10,
                        scratch: R11,
                    });
                    out.push(op(Op::JmpReg(R10)));
                    return_site(&mut out, ret, next);
                }
                Item::Syscall => {
                    let ret = fresh.next();
                    out.extend(syscall_sequence(ret.clone()));
                    return_site(&mut out, ret, next);
                }
                other => out.push(other.clone()),
            }
        }
        f.body = out;
    }
    p
}

/// `lea r13, [rip+ret]; cfi_guard r14; jmp r14`.
fn syscall_sequence(ret: String) -> Vec<Item> {
    vec![
        Item::Instr(SInstr::AddrOf {
            dst: Reg::R13,
            label: ret,
        }),
        Item::CfiGuard {
            target: Reg::R14,
            scratch: R11,
        },
        op(Op::JmpReg(Reg::R14)),
    ]
}

fn item_adjusts_rsp(item: &Item) -> bool {
    match item {
        Item::Instr(SInstr::Op(o)) => adjusts_rsp(o),
        Item::Instr(SInstr::AddrOf { dst, .. }) => *dst == Reg::Rsp,
        _ => false,
    }
}

fn is_push_class(item: &Item) -> bool {
    match item {
        Item::Instr(SInstr::Call(_)) => true,
        Item::Instr(SInstr::Op(o)) => {
            matches!(o, Op::Push(_) | Op::Call { .. } | Op::CallReg(_))
                || matches!(o, Op::Pop(r) if *r != Reg::Rsp)
        }
        _ => false,
    }
}

fn push_guard(out: &mut Vec<Item>, m: &MemOperand) {
    if !matches!(out.last(), Some(Item::MemGuard(g)) if g == m) {
        out.push(Item::MemGuard(m.clone()));
    }
}

/// Guards every store (and every load when `confine_loads`) and enforces the
/// rsp discipline.
pub fn insert_mem_guards(
    mut p: SasmProgram,
    confine_loads: bool,
) -> Result<SasmProgram, InstrumentError> {
    let rsp = MemOperand::base(Reg::Rsp, 0);
    for f in &mut p.functions {
        let items = std::mem::take(&mut f.body);
        let mut out = Vec::with_capacity(items.len() * 2);
        for (i, item) in items.iter().enumerate() {
            match item.op() {
                Some(Op::Store { mem, .. }) => push_guard(&mut out, mem),
                Some(Op::Load { mem, .. }) if confine_loads => push_guard(&mut out, mem),
                _ => {}
            }
            out.push(item.clone());
            if !item_adjusts_rsp(item) {
                continue;
            }
            if let Some(Op::AluImm {
                op: AluImmOp::Add | AluImmOp::Sub,
                dst: Reg::Rsp,
                imm,
            }) = item.op()
            {
                if (*imm as i64).abs() > GUARD_SIZE {
                    return Err(InstrumentError::RspAdjustTooLarge {
                        function: f.name.clone(),
                        imm: *imm as i64,
                    });
                }
                let next = items[i + 1..].iter().find(|n| n.emits_code());
                if next.map(is_push_class).unwrap_or(false) {
                    continue;
                }
            }
            out.push(Item::MemGuard(rsp.clone()));
        }
        f.body = out;
    }
    Ok(p)
}

/// Raw mode: `syscall` expands to the complete guarded sequence.
pub(crate) fn expand_raw_syscalls(mut p: SasmProgram) -> SasmProgram {
    let mut fresh = Fresh(0);
    for f in &mut p.functions {
        let items = std::mem::take(&mut f.body);
        for item in items {
            if item == Item::Syscall {
                let ret = fresh.next();
                f.body.extend(syscall_sequence(ret.clone()));
                f.body.push(Item::Label(ret));
                f.body.push(Item::CfiLabel { domain_id: 0 });
            } else {
                f.body.push(item);
            }
        }
    }
    p
}

/// Reference mode: only an entry label and bare `lea r13; jmp r14` system
/// calls; all other code is left as written.
pub(crate) fn reference_lowering(mut p: SasmProgram) -> SasmProgram {
    let mut fresh = Fresh(0);
    let entry = p.entry.clone();
    for f in &mut p.functions {
        let items = std::mem::take(&mut f.body);
        if f.name == entry {
            f.body.push(Item::CfiLabel { domain_id: 0 });
        }
        for item in items {
            if item == Item::Syscall {
                let ret = fresh.next();
                f.body.push(Item::Instr(SInstr::AddrOf {
                    dst: Reg::R13,
                    label: ret.clone(),
                }));
                f.body.push(op(Op::JmpReg(Reg::R14)));
                f.body.push(Item::Label(ret));
            } else {
                f.body.push(item);
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrumenter::parse_sasm;

    fn labels(p: &SasmProgram) -> usize {
        p.functions
            .iter()
            .flat_map(|f| &f.body)
            .filter(|i| matches!(i, Item::CfiLabel { .. }))
            .count()
    }

    #[test]
    fn entry_label_only() {
        let p = insert_cfi_labels(parse_sasm("func main:\n mov rax, 0\n jmp end\nend:\n ret\n").unwrap());
        assert_eq!(labels(&p), 1);
        assert_eq!(p.functions[0].body[0], Item::CfiLabel { domain_id: 0 });
    }

    #[test]
    fn return_sites_are_labelled() {
        let src = "func main:\n call f\n call f\n ret\nfunc f:\n ret\n";
        let p = insert_cfi_labels(parse_sasm(src).unwrap());
        // main: entry + 2 return sites; f: entry.
        assert_eq!(labels(&p), 4);
        let main = &p.functions[0].body;
        assert!(matches!(main[1], Item::Instr(SInstr::Call(_))));
        assert_eq!(main[2], Item::CfiLabel { domain_id: 0 });
    }

    #[test]
    fn address_taken_label() {
        let src = "func main:\n mov rax, &target\n jmp rax\ntarget:\n ret\n";
        let p = insert_cfi_labels(parse_sasm(src).unwrap());
        let body = &p.functions[0].body;
        let at = body.iter().position(|i| *i == Item::Label("target".into())).unwrap();
        assert_eq!(body[at + 1], Item::CfiLabel { domain_id: 0 });
    }

    #[test]
    fn ret_lowering() {
        let p = lower_unsafe_transfers(parse_sasm("func main:\n ret\n").unwrap());
        assert_eq!(
            p.functions[0].body,
            vec![
                op(Op::Pop(R10)),
                Item::CfiGuard {
                    target: R10,
                    scratch: R11
                },
                op(Op::JmpReg(R10)),
            ]
        );
    }

    #[test]
    fn jmp_mem_lowering() {
        let p = lower_unsafe_transfers(parse_sasm("func main:\n jmp [r8+16]\n").unwrap());
        let m = MemOperand::base(Reg::R8, 16);
        assert_eq!(
            p.functions[0].body,
            vec![
                Item::MemGuard(m.clone()),
                op(Op::Load { dst: R10, mem: m }),
                Item::CfiGuard {
                    target: R10,
                    scratch: R11
                },
                op(Op::JmpReg(R10)),
            ]
        );
    }

    #[test]
    fn store_guard() {
        let p = insert_mem_guards(parse_sasm("func main:\n mov [r8], rax\n").unwrap(), true).unwrap();
        let m = MemOperand::base(Reg::R8, 0);
        assert_eq!(
            p.functions[0].body,
            vec![
                Item::MemGuard(m.clone()),
                op(Op::Store { mem: m, src: Reg::Rax })
            ]
        );
    }

    #[test]
    fn loads_follow_confinement_flag() {
        let src = "func main:\n mov rax, [r8]\n";
        let on = insert_mem_guards(parse_sasm(src).unwrap(), true).unwrap();
        let off = insert_mem_guards(parse_sasm(src).unwrap(), false).unwrap();
        assert_eq!(on.mem_guard_count(), 1);
        assert_eq!(off.mem_guard_count(), 0);
    }

    #[test]
    fn rsp_discipline() {
        let rsp = MemOperand::base(Reg::Rsp, 0);
        // A store right after the adjustment shares the single rsp guard.
        let p = insert_mem_guards(parse_sasm("func main:\n sub rsp, 32\n mov [rsp], rax\n").unwrap(), true)
            .unwrap();
        assert_eq!(p.functions[0].body[1], Item::MemGuard(rsp.clone()));
        assert_eq!(p.mem_guard_count(), 1);
        // A push right after needs no guard.
        let p = insert_mem_guards(parse_sasm("func main:\n sub rsp, 8\n push rax\n").unwrap(), true).unwrap();
        assert_eq!(p.mem_guard_count(), 0);
        // Any other rsp write is followed by a guard.
        let p = insert_mem_guards(parse_sasm("func main:\n mov rsp, rbx\n push rax\n").unwrap(), true).unwrap();
        assert_eq!(p.functions[0].body[1], Item::MemGuard(rsp));
        let e = insert_mem_guards(parse_sasm("func main:\n sub rsp, 8192\n").unwrap(), true).unwrap_err();
        assert!(matches!(e, InstrumentError::RspAdjustTooLarge { imm: 8192, .. }));
    }
}
