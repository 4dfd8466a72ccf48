use thiserror::Error;

use super::{AluImmOp, AluOp, BndOperand, BoundSide, Cond, Instruction, MemOperand, Op, Reg, MAGIC};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("unencodable form: {0}")]
    UnencodableForm(String),
}

fn unencodable<T>(what: impl Into<String>) -> Result<T, EncodeError> {
    Err(EncodeError::UnencodableForm(what.into()))
}

/// Encodes `instr` at its own address.
pub fn encode(instr: &Instruction) -> Result<Vec<u8>, EncodeError> {
    encode_op(instr.address, &instr.op)
}

fn rex(w: bool, r: u8, x: u8, b: u8) -> u8 {
    0x40 | (u8::from(w) << 3) | (r << 2) | (x << 1) | b
}

/// Pushes a REX byte only when it carries information.
fn push_rex(out: &mut Vec<u8>, w: bool, r: u8, x: u8, b: u8) {
    let byte = rex(w, r, x, b);
    if byte != 0x40 {
        out.push(byte);
    }
}

fn fits_i8(v: i32) -> bool {
    (i8::MIN as i32..=i8::MAX as i32).contains(&v)
}

/// ModRM (+SIB, +disp) bytes for a memory operand, plus the REX.X / REX.B bits
/// the operand needs.
pub(crate) struct MemEncoding {
    pub x: u8,
    pub b: u8,
    pub bytes: Vec<u8>,
}

pub(crate) fn encode_mem(reg_field: u8, mem: &MemOperand) -> Result<MemEncoding, EncodeError> {
    let reg_field = reg_field & 7;
    let disp_mode = |base: Reg, disp: i32| -> u8 {
        if disp == 0 && base.low3() != 5 {
            0
        } else if fits_i8(disp) {
            1
        } else {
            2
        }
    };
    let push_disp = |out: &mut Vec<u8>, md: u8, disp: i32| match md {
        1 => out.push(disp as i8 as u8),
        2 => out.extend_from_slice(&disp.to_le_bytes()),
        _ => {}
    };
    match mem {
        MemOperand::BaseDisp { base, disp } => {
            let md = disp_mode(*base, *disp);
            let mut bytes = Vec::with_capacity(6);
            if base.low3() == 4 {
                bytes.push((md << 6) | (reg_field << 3) | 4);
                bytes.push(0x24);
            } else {
                bytes.push((md << 6) | (reg_field << 3) | base.low3());
            }
            push_disp(&mut bytes, md, *disp);
            Ok(MemEncoding {
                x: 0,
                b: base.ext(),
                bytes,
            })
        }
        MemOperand::BaseIndexDisp {
            base,
            index,
            scale,
            disp,
        } => {
            if *index == Reg::Rsp {
                return unencodable("rsp cannot be an index register");
            }
            let ss = match scale {
                1 => 0,
                2 => 1,
                4 => 2,
                8 => 3,
                _ => return unencodable(format!("scale {}", scale)),
            };
            let md = disp_mode(*base, *disp);
            let mut bytes = vec![
                (md << 6) | (reg_field << 3) | 4,
                (ss << 6) | (index.low3() << 3) | base.low3(),
            ];
            push_disp(&mut bytes, md, *disp);
            Ok(MemEncoding {
                x: index.ext(),
                b: base.ext(),
                bytes,
            })
        }
        MemOperand::RipRelative { disp } => {
            let mut bytes = vec![(reg_field << 3) | 5];
            bytes.extend_from_slice(&disp.to_le_bytes());
            Ok(MemEncoding { x: 0, b: 0, bytes })
        }
        MemOperand::DirectOffset { .. } => unencodable("moffs operand outside movabs"),
        MemOperand::Vsib { .. } => unencodable("vector SIB operand"),
    }
}

fn rel(address: u64, len: u64, target: i64) -> i64 {
    target - (address as i64 + len as i64)
}

fn rel32(address: u64, len: u64, target: i64) -> Result<[u8; 4], EncodeError> {
    let d = rel(address, len, target);
    i32::try_from(d)
        .map(i32::to_le_bytes)
        .or_else(|_| unencodable(format!("rel32 displacement {} out of range", d)))
}

/// Encodes `op` as if placed at `address` (relevant for relative branches).
pub(crate) fn encode_op(address: u64, op: &Op) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(10);
    match op {
        Op::MovImm { dst, imm } => {
            out.push(rex(true, 0, 0, dst.ext()));
            out.push(0xB8 + dst.low3());
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Op::MovRR { dst, src } => {
            out.push(rex(true, src.ext(), 0, dst.ext()));
            out.push(0x89);
            out.push(0xC0 | (src.low3() << 3) | dst.low3());
        }
        Op::Load { dst, mem } => mem_form(&mut out, true, 0x8B, *dst as u8, mem)?,
        Op::Store { mem, src } => mem_form(&mut out, true, 0x89, *src as u8, mem)?,
        Op::Lea { dst, mem } => mem_form(&mut out, true, 0x8D, *dst as u8, mem)?,
        Op::LoadAbs { addr } => {
            out.extend_from_slice(&[0x48, 0xA1]);
            out.extend_from_slice(&addr.to_le_bytes());
        }
        Op::StoreAbs { addr } => {
            out.extend_from_slice(&[0x48, 0xA3]);
            out.extend_from_slice(&addr.to_le_bytes());
        }
        Op::AluImm { op, dst, imm } => {
            let ext = match op {
                AluImmOp::Add => 0,
                AluImmOp::Sub => 5,
            };
            out.push(rex(true, 0, 0, dst.ext()));
            out.push(0x81);
            out.push(0xC0 | (ext << 3) | dst.low3());
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Op::Alu { op, dst, src } => {
            let opcode = match op {
                AluOp::Add => 0x01,
                AluOp::Sub => 0x29,
                AluOp::And => 0x21,
                AluOp::Or => 0x09,
                AluOp::Xor => 0x31,
                AluOp::Cmp => 0x39,
            };
            out.push(rex(true, src.ext(), 0, dst.ext()));
            out.push(opcode);
            out.push(0xC0 | (src.low3() << 3) | dst.low3());
        }
        Op::Push(r) => {
            push_rex(&mut out, false, 0, 0, r.ext());
            out.push(0x50 + r.low3());
        }
        Op::Pop(r) => {
            push_rex(&mut out, false, 0, 0, r.ext());
            out.push(0x58 + r.low3());
        }
        Op::Jmp {
            target,
            short: true,
        } => {
            let d = rel(address, 2, *target);
            if !(i8::MIN as i64..=i8::MAX as i64).contains(&d) {
                return unencodable(format!("rel8 displacement {} out of range", d));
            }
            out.push(0xEB);
            out.push(d as i8 as u8);
        }
        Op::Jmp {
            target,
            short: false,
        } => {
            out.push(0xE9);
            out.extend_from_slice(&rel32(address, 5, *target)?);
        }
        Op::Jcc { cond, target } => {
            let cc = match cond {
                Cond::E => 0x84,
                Cond::Ne => 0x85,
                Cond::L => 0x8C,
                Cond::Ge => 0x8D,
            };
            out.extend_from_slice(&[0x0F, cc]);
            out.extend_from_slice(&rel32(address, 6, *target)?);
        }
        Op::Call { target } => {
            out.push(0xE8);
            out.extend_from_slice(&rel32(address, 5, *target)?);
        }
        Op::JmpReg(r) | Op::CallReg(r) => {
            let ext = if matches!(op, Op::JmpReg(_)) { 4 } else { 2 };
            push_rex(&mut out, false, 0, 0, r.ext());
            out.push(0xFF);
            out.push(0xC0 | (ext << 3) | r.low3());
        }
        Op::JmpMem(m) | Op::CallMem(m) => {
            let ext = if matches!(op, Op::JmpMem(_)) { 4 } else { 2 };
            mem_form(&mut out, false, 0xFF, ext, m)?;
        }
        Op::Ret => out.push(0xC3),
        Op::Nop => out.push(0x90),
        Op::NopLong { bytes, .. } => {
            if bytes.starts_with(&MAGIC) {
                return unencodable("long nop collides with the cfi_label magic");
            }
            out.extend_from_slice(bytes);
        }
        Op::CfiLabel { domain_id } => {
            out.extend_from_slice(&MAGIC);
            out.extend_from_slice(&domain_id.to_le_bytes());
        }
        Op::BndCheck { side, bnd, operand } => {
            if *bnd > 3 {
                return unencodable(format!("bnd{}", bnd));
            }
            out.push(match side {
                BoundSide::Lower => 0xF3,
                BoundSide::Upper => 0xF2,
            });
            match operand {
                BndOperand::Reg(r) => {
                    push_rex(&mut out, false, 0, 0, r.ext());
                    out.extend_from_slice(&[0x0F, 0x1A, 0xC0 | (bnd << 3) | r.low3()]);
                }
                BndOperand::Mem(m) => {
                    let enc = encode_mem(*bnd, m)?;
                    push_rex(&mut out, false, 0, enc.x, enc.b);
                    out.extend_from_slice(&[0x0F, 0x1A]);
                    out.extend_from_slice(&enc.bytes);
                }
            }
        }
        Op::SyscallGate => out.extend_from_slice(&[0x0F, 0x05]),
        Op::Dangerous { bytes, .. } | Op::VectorGather { bytes, .. } => {
            out.extend_from_slice(bytes)
        }
    }
    Ok(out)
}

fn mem_form(
    out: &mut Vec<u8>,
    w: bool,
    opcode: u8,
    reg_field: u8,
    mem: &MemOperand,
) -> Result<(), EncodeError> {
    let enc = encode_mem(reg_field, mem)?;
    let r = (reg_field >> 3) & 1;
    if w {
        out.push(rex(true, r, enc.x, enc.b));
    } else {
        push_rex(out, false, r, enc.x, enc.b);
    }
    out.push(opcode);
    out.extend_from_slice(&enc.bytes);
    Ok(())
}
