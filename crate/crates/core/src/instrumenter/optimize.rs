use super::{assemble, InstrumentError, InstrumentOptions, Item, SInstr, SasmProgram};
use crate::isa::{AluImmOp, MemOperand, Op, Reg, GUARD_SIZE};
use crate::verifier::{analyze, VerifyOptions};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OptimizeReport {
    pub guards_before: usize,
    pub guards_after: usize,
    pub hoisted: usize,
    pub eliminated: usize,
    /// Verifier runs spent checking candidate transformations.
    pub verifications: usize,
}

struct Checker {
    opts: InstrumentOptions,
    runs: usize,
}

impl Checker {
    /// The optimizer's safety net: a candidate is kept only if the full
    /// verifier accepts it.
    fn accepts(&mut self, p: &SasmProgram) -> bool {
        self.runs += 1;
        match assemble(p, self.opts) {
            Ok(a) => {
                analyze(
                    &a.image,
                    VerifyOptions {
                        confine_loads: self.opts.confine_loads,
                    },
                )
                .verdict
                .accepted
            }
            Err(_) => false,
        }
    }
}

/// Loop check hoisting, then redundant check elimination.
pub fn optimize(
    p: SasmProgram,
    opts: InstrumentOptions,
) -> Result<(SasmProgram, OptimizeReport), InstrumentError> {
    // Surface assembly errors of the input itself.
    assemble(&p, opts)?;
    let mut report = OptimizeReport {
        guards_before: p.mem_guard_count(),
        ..Default::default()
    };
    let mut check = Checker { opts, runs: 0 };
    if !check.accepts(&p) {
        report.guards_after = report.guards_before;
        report.verifications = check.runs;
        return Ok((p, report));
    }
    let p = hoist_loop_guards(p, &mut check, &mut report);
    let p = eliminate_redundant(p, &mut check, &mut report)?;
    report.guards_after = p.mem_guard_count();
    report.verifications = check.runs;
    Ok((p, report))
}

fn is_straight_line(item: &Item) -> bool {
    match item {
        Item::MemGuard(_) | Item::Instr(SInstr::AddrOf { .. }) => true,
        Item::Instr(SInstr::Op(o)) => !o.is_control_transfer(),
        _ => false,
    }
}

/// Total constant change applied to `base` by the loop body, or `None` if
/// `base` is written any other way.
fn constant_drift(body: &[Item], base: Reg) -> Option<i64> {
    let mut total = 0i64;
    for item in body {
        match item {
            Item::Instr(SInstr::Op(Op::AluImm {
                op: AluImmOp::Add | AluImmOp::Sub,
                dst,
                imm,
            })) if *dst == base => total += (*imm as i64).abs(),
            Item::Instr(i) if i.written_regs().contains(&base) => return None,
            Item::CfiLabel { .. } | Item::CfiGuard { .. } | Item::Syscall | Item::Bytes(_) => {
                return None
            }
            _ => {}
        }
    }
    Some(total)
}

/// A hoisting candidate: (function, header label index, in-loop guard index).
fn hoist_candidates(p: &SasmProgram) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        for (j, item) in f.body.iter().enumerate() {
            let target = match item {
                Item::Instr(SInstr::Jmp(l) | SInstr::Jcc(_, l)) => l,
                _ => continue,
            };
            let Some(h) = f.body[..j]
                .iter()
                .position(|i| matches!(i, Item::Label(l) if l == target))
            else {
                continue;
            };
            for g in h + 1..j {
                let Item::MemGuard(MemOperand::BaseDisp { base, .. }) = &f.body[g] else {
                    continue;
                };
                if *base == Reg::Rsp {
                    continue;
                }
                // The guard must run on every iteration before anything can
                // leave or re-enter the loop.
                if !f.body[h + 1..g].iter().all(is_straight_line) {
                    continue;
                }
                match constant_drift(&f.body[h + 1..=j], *base) {
                    Some(c) if c < GUARD_SIZE => out.push((fi, h, g)),
                    _ => {}
                }
            }
        }
    }
    out
}

fn hoist_loop_guards(
    mut p: SasmProgram,
    check: &mut Checker,
    report: &mut OptimizeReport,
) -> SasmProgram {
    let mut rejected: Vec<(usize, usize, usize)> = Vec::new();
    loop {
        let Some((fi, h, g)) = hoist_candidates(&p)
            .into_iter()
            .find(|c| !rejected.contains(c))
        else {
            return p;
        };
        match hoisted_variants(&p, fi, h, g)
            .into_iter()
            .find(|c| check.accepts(c))
        {
            Some(c) => {
                p = c;
                report.hoisted += 1;
                rejected.clear();
            }
            None => rejected.push((fi, h, g)),
        }
    }
}

/// Placements of the preheader guard, best first. The guard may not sit
/// directly before the header: the access at the header would then count as
/// guard-adjacent and become an illegal jump target for the back edge.
fn hoisted_variants(p: &SasmProgram, fi: usize, h: usize, g: usize) -> Vec<SasmProgram> {
    let mut base = p.clone();
    let body = &mut base.functions[fi].body;
    let guard = body.remove(g);
    let Item::MemGuard(m) = &guard else {
        return Vec::new();
    };
    let mut out = Vec::new();
    // Before the last preheader instruction, if it leaves the base alone.
    if h > 0 {
        if let Item::Instr(i @ SInstr::Op(o)) = &body[h - 1] {
            let touches = m.regs().iter().any(|r| i.written_regs().contains(r));
            if !o.is_control_transfer() && !touches {
                let mut c = base.clone();
                c.functions[fi].body.insert(h - 1, guard.clone());
                out.push(c);
            }
        }
    }
    let mut c = base;
    let body = &mut c.functions[fi].body;
    body.insert(h, Item::Instr(SInstr::Op(Op::Nop)));
    body.insert(h, guard);
    out.push(c);
    out
}

/// Whether the guard at `idx` is the one the rsp discipline demands.
fn is_rsp_mandatory(body: &[Item], idx: usize) -> bool {
    let Item::MemGuard(m) = &body[idx] else {
        return false;
    };
    if *m != MemOperand::base(Reg::Rsp, 0) || idx == 0 {
        return false;
    }
    match &body[idx - 1] {
        Item::Instr(SInstr::Op(o)) => crate::verifier::adjusts_rsp(o),
        Item::Instr(SInstr::AddrOf { dst, .. }) => *dst == Reg::Rsp,
        _ => false,
    }
}

fn eliminate_redundant(
    mut p: SasmProgram,
    check: &mut Checker,
    report: &mut OptimizeReport,
) -> Result<SasmProgram, InstrumentError> {
    let a = assemble(&p, check.opts)?;
    let analysis = analyze(
        &a.image,
        VerifyOptions {
            confine_loads: check.opts.confine_loads,
        },
    );
    let Some(facts) = analysis.facts else {
        return Ok(p);
    };
    let mut candidates = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        for (ii, item) in f.body.iter().enumerate() {
            let Item::MemGuard(MemOperand::BaseDisp { base, disp }) = item else {
                continue;
            };
            if is_rsp_mandatory(&f.body, ii) {
                continue;
            }
            let at = a.item_offsets[fi][ii];
            if facts
                .get(&at)
                .map(|fact| fact.get(*base).admits(*disp as i64))
                .unwrap_or(false)
            {
                candidates.push((fi, ii));
            }
        }
    }
    // Removing a guard leaves the facts after its access unchanged (the access
    // itself confines the base), so one pass suffices. Going backwards keeps
    // earlier indices valid.
    for (fi, ii) in candidates.into_iter().rev() {
        let mut cand = p.clone();
        cand.functions[fi].body.remove(ii);
        if check.accepts(&cand) {
            p = cand;
            report.eliminated += 1;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrumenter::{
        insert_cfi_labels, insert_mem_guards, lower_unsafe_transfers, parse_sasm,
    };

    fn guarded(src: &str) -> SasmProgram {
        let p = lower_unsafe_transfers(insert_cfi_labels(parse_sasm(src).unwrap()));
        insert_mem_guards(p, true).unwrap()
    }

    #[test]
    fn adjacent_store_guard_is_removed() {
        let p = guarded("func main:\n mov [r8], rax\n mov [r8+8], rax\n mov rax, 0\n jmp main\n");
        assert_eq!(p.mem_guard_count(), 2);
        let (q, r) = optimize(p, InstrumentOptions::default()).unwrap();
        assert_eq!(q.mem_guard_count(), 1);
        assert_eq!(r.eliminated, 1);
        let body = &q.functions[0].body;
        assert_eq!(body[1], Item::MemGuard(MemOperand::base(Reg::R8, 0)));
    }

    #[test]
    fn unanalyzed_base_keeps_guard() {
        let src = "func main:\nloop:\n mov r8, [rbx]\n mov [r8], rax\n jmp loop\n";
        let p = guarded(src);
        let before = p.mem_guard_count();
        let (q, _) = optimize(p, InstrumentOptions::default()).unwrap();
        // The store through a freshly loaded pointer is never provable.
        assert!(q
            .functions[0]
            .body
            .iter()
            .any(|i| *i == Item::MemGuard(MemOperand::base(Reg::R8, 0))));
        assert!(q.mem_guard_count() <= before);
    }

    #[test]
    fn loop_guard_is_hoisted() {
        let src = "func main:\n mov rcx, 0\nloop:\n mov [r9], rax\n add r9, 8\n add rcx, 1\n cmp rcx, rdx\n jl loop\n jmp main\n";
        let p = guarded(src);
        let (q, r) = optimize(p, InstrumentOptions::default()).unwrap();
        assert_eq!(r.hoisted, 1);
        let body = &q.functions[0].body;
        let header = body.iter().position(|i| *i == Item::Label("loop".into())).unwrap();
        assert_eq!(body[header - 2], Item::MemGuard(MemOperand::base(Reg::R9, 0)));
        assert!(!body[header..].iter().any(|i| matches!(i, Item::MemGuard(_))));
    }
}
