use super::{BndOperand, BoundSide, Instruction, MemOperand, Op, Reg, MAGIC};

/// A recognized multi-instruction unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PseudoInstr {
    /// `bndcl bnd0, m; bndcu bnd0, m`
    MemGuard {
        lower: Instruction,
        upper: Instruction,
        guarded_operand: MemOperand,
    },
    /// `mov scratch, [target]; bndcl bnd1, scratch; bndcu bnd1, scratch`
    CfiGuard {
        load: Instruction,
        lower: Instruction,
        upper: Instruction,
        target_reg: Reg,
        scratch_reg: Reg,
    },
    CfiLabel {
        instr: Instruction,
        id_field_offset: u64,
    },
}

impl PseudoInstr {
    pub fn start(&self) -> u64 {
        self.instrs()[0].address
    }

    /// Address just past the last component instruction.
    pub fn end(&self) -> u64 {
        self.instrs().last().unwrap().end()
    }

    pub fn instrs(&self) -> Vec<&Instruction> {
        match self {
            PseudoInstr::MemGuard { lower, upper, .. } => vec![lower, upper],
            PseudoInstr::CfiGuard {
                load, lower, upper, ..
            } => vec![load, lower, upper],
            PseudoInstr::CfiLabel { instr, .. } => vec![instr],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PseudoInstr::MemGuard { .. } => "mem_guard",
            PseudoInstr::CfiGuard { .. } => "cfi_guard",
            PseudoInstr::CfiLabel { .. } => "cfi_label",
        }
    }
}

/// Every offset where MAGIC occurs, ignoring instruction boundaries.
pub fn scan_cfi_labels(code: &[u8]) -> Vec<u64> {
    code.windows(MAGIC.len())
        .enumerate()
        .filter(|(_, w)| *w == MAGIC)
        .map(|(i, _)| i as u64)
        .collect()
}

fn bnd_check(i: &Instruction, want_side: BoundSide, want_bnd: u8) -> Option<&BndOperand> {
    match &i.op {
        Op::BndCheck { side, bnd, operand } if *side == want_side && *bnd == want_bnd => {
            Some(operand)
        }
        _ => None,
    }
}

fn adjacent(a: &Instruction, b: &Instruction) -> bool {
    a.end() == b.address
}

/// Recognizes the pseudo-instruction pattern starting at `instrs[idx]`, if
/// any. Component instructions must be byte-adjacent.
pub fn recognize_pseudo(instrs: &[Instruction], idx: usize) -> Option<PseudoInstr> {
    let first = instrs.get(idx)?;
    if let Op::CfiLabel { .. } = first.op {
        return Some(PseudoInstr::CfiLabel {
            instr: first.clone(),
            id_field_offset: first.address + 4,
        });
    }

    if let Some(BndOperand::Mem(m)) = bnd_check(first, BoundSide::Lower, 0) {
        let upper = instrs.get(idx + 1)?;
        return match bnd_check(upper, BoundSide::Upper, 0) {
            Some(BndOperand::Mem(m2)) if m2 == m && adjacent(first, upper) => {
                Some(PseudoInstr::MemGuard {
                    lower: first.clone(),
                    upper: upper.clone(),
                    guarded_operand: m.clone(),
                })
            }
            _ => None,
        };
    }

    if let Op::Load {
        dst: scratch,
        mem: MemOperand::BaseDisp { base: target, disp: 0 },
    } = first.op
    {
        // A scratch equal to the target would jump to the label's value.
        if scratch == target {
            return None;
        }
        let lower = instrs.get(idx + 1)?;
        let upper = instrs.get(idx + 2)?;
        let ok_lower = bnd_check(lower, BoundSide::Lower, 1) == Some(&BndOperand::Reg(scratch));
        let ok_upper = bnd_check(upper, BoundSide::Upper, 1) == Some(&BndOperand::Reg(scratch));
        if ok_lower && ok_upper && adjacent(first, lower) && adjacent(lower, upper) {
            return Some(PseudoInstr::CfiGuard {
                load: first.clone(),
                lower: lower.clone(),
                upper: upper.clone(),
                target_reg: target,
                scratch_reg: scratch,
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode, Op};

    fn seq(ops: Vec<Op>) -> Vec<Instruction> {
        let mut addr = 0;
        ops.into_iter()
            .map(|op| {
                let i = Instruction::new(addr, op).unwrap();
                addr = i.end();
                i
            })
            .collect()
    }

    fn bnd(side: BoundSide, bnd: u8, operand: BndOperand) -> Op {
        Op::BndCheck { side, bnd, operand }
    }

    #[test]
    fn scan_examples() {
        let mut code = encode(&Instruction::new(0, Op::Nop).unwrap()).unwrap();
        code.extend(encode(&Instruction::new(1, Op::CfiLabel { domain_id: 1 }).unwrap()).unwrap());
        assert_eq!(scan_cfi_labels(&code), vec![1]);
        assert!(scan_cfi_labels(&[]).is_empty());

        // MAGIC hidden inside a mov's imm64 at offset 10 is still reported.
        let mut code = vec![0x90; 8];
        code.extend_from_slice(&[0x48, 0xB8, 0x0F, 0x1F, 0x84, 0x24, 0, 0, 0, 0]);
        assert_eq!(scan_cfi_labels(&code), vec![10]);
    }

    #[test]
    fn mem_guard_pattern() {
        let m = MemOperand::base(Reg::R8, 0);
        let ok = seq(vec![
            bnd(BoundSide::Lower, 0, BndOperand::Mem(m.clone())),
            bnd(BoundSide::Upper, 0, BndOperand::Mem(m.clone())),
        ]);
        match recognize_pseudo(&ok, 0) {
            Some(PseudoInstr::MemGuard {
                guarded_operand, ..
            }) => assert_eq!(guarded_operand, m),
            other => panic!("{:?}", other),
        }
        let mismatch = seq(vec![
            bnd(BoundSide::Lower, 0, BndOperand::Mem(m)),
            bnd(BoundSide::Upper, 0, BndOperand::Mem(MemOperand::base(Reg::R9, 0))),
        ]);
        assert_eq!(recognize_pseudo(&mismatch, 0), None);
    }

    #[test]
    fn cfi_guard_pattern() {
        let ok = seq(vec![
            Op::Load {
                dst: Reg::R11,
                mem: MemOperand::base(Reg::R10, 0),
            },
            bnd(BoundSide::Lower, 1, BndOperand::Reg(Reg::R11)),
            bnd(BoundSide::Upper, 1, BndOperand::Reg(Reg::R11)),
        ]);
        match recognize_pseudo(&ok, 0) {
            Some(PseudoInstr::CfiGuard {
                target_reg,
                scratch_reg,
                ..
            }) => {
                assert_eq!(target_reg, Reg::R10);
                assert_eq!(scratch_reg, Reg::R11);
            }
            other => panic!("{:?}", other),
        }
        let self_scratch = seq(vec![
            Op::Load {
                dst: Reg::R10,
                mem: MemOperand::base(Reg::R10, 0),
            },
            bnd(BoundSide::Lower, 1, BndOperand::Reg(Reg::R10)),
            bnd(BoundSide::Upper, 1, BndOperand::Reg(Reg::R10)),
        ]);
        assert_eq!(recognize_pseudo(&self_scratch, 0), None);
    }
}
