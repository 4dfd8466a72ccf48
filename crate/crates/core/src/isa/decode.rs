use thiserror::Error;

use super::encode::encode_op;
use super::{
    AluImmOp, AluOp, BndOperand, BoundSide, Cond, DangerKind, Instruction, MemOperand, Op, Reg,
    CFI_LABEL_LEN, MAGIC,
};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unknown or non-canonical opcode at offset {0:#x}")]
    UnknownOpcode(usize),
    #[error("truncated instruction at offset {0:#x}")]
    TruncatedInstruction(usize),
}

/// Decodes the instruction starting at `offset`, addressed as `offset`.
pub fn decode(code: &[u8], offset: usize) -> Result<Instruction, DecodeError> {
    decode_at(code, offset, offset as u64)
}

/// Decodes the instruction at `code[offset..]`, giving it the absolute
/// address `address` (relative targets are resolved against it).
pub fn decode_at(code: &[u8], offset: usize, address: u64) -> Result<Instruction, DecodeError> {
    if offset >= code.len() {
        return Err(DecodeError::TruncatedInstruction(offset));
    }
    let bytes = &code[offset..];
    if bytes.starts_with(&MAGIC) {
        if bytes.len() < CFI_LABEL_LEN {
            return Err(DecodeError::TruncatedInstruction(offset));
        }
        let id = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        return Ok(Instruction {
            address,
            raw: bytes[..CFI_LABEL_LEN].to_vec(),
            op: Op::CfiLabel { domain_id: id },
        });
    }

    let mut cur = Cursor {
        bytes,
        pos: 0,
        offset,
    };
    let op = decode_op(&mut cur, address)?;
    let raw = bytes[..cur.pos].to_vec();
    // Only canonical encodings belong to the subset.
    match encode_op(address, &op) {
        Ok(enc) if enc == raw => Ok(Instruction { address, raw, op }),
        _ => Err(DecodeError::UnknownOpcode(offset)),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    offset: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = self
            .bytes
            .get(self.pos)
            .copied()
            .ok_or(DecodeError::TruncatedInstruction(self.offset))?;
        self.pos += 1;
        Ok(b)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(DecodeError::TruncatedInstruction(self.offset));
        }
        let out: [u8; N] = self.bytes[self.pos..end].try_into().unwrap();
        self.pos = end;
        Ok(out)
    }

    fn i8(&mut self) -> Result<i8, DecodeError> {
        Ok(self.u8()? as i8)
    }

    fn i32(&mut self) -> Result<i32, DecodeError> {
        Ok(i32::from_le_bytes(self.take::<4>()?))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take::<8>()?))
    }

    fn unknown<T>(&self) -> Result<T, DecodeError> {
        Err(DecodeError::UnknownOpcode(self.offset))
    }
}

#[derive(Clone, Copy, Default)]
struct Rex {
    w: bool,
    r: u8,
    x: u8,
    b: u8,
}

enum Rm {
    Reg(Reg),
    Mem(MemOperand),
}

/// Reads a ModRM byte and its SIB/displacement. Returns the full 4-bit reg
/// field (REX.R applied) and the r/m operand.
fn modrm(cur: &mut Cursor<'_>, rex: Rex) -> Result<(u8, Rm), DecodeError> {
    let m = cur.u8()?;
    let md = m >> 6;
    let reg = ((m >> 3) & 7) | (rex.r << 3);
    let rm = m & 7;
    if md == 3 {
        return Ok((reg, Rm::Reg(Reg::from_index(rm | (rex.b << 3)))));
    }
    let read_disp = |cur: &mut Cursor<'_>| -> Result<i32, DecodeError> {
        match md {
            0 => Ok(0),
            1 => Ok(cur.i8()? as i32),
            _ => cur.i32(),
        }
    };
    if rm == 4 {
        let sib = cur.u8()?;
        let ss = sib >> 6;
        let idx = ((sib >> 3) & 7) | (rex.x << 3);
        let base_bits = sib & 7;
        if base_bits == 5 && md == 0 {
            // [index*scale + disp32] without a base is outside the subset.
            return cur.unknown();
        }
        let base = Reg::from_index(base_bits | (rex.b << 3));
        let disp = read_disp(cur)?;
        let mem = if idx == 4 {
            if ss != 0 {
                return cur.unknown();
            }
            MemOperand::BaseDisp { base, disp }
        } else {
            MemOperand::BaseIndexDisp {
                base,
                index: Reg::from_index(idx),
                scale: 1 << ss,
                disp,
            }
        };
        return Ok((reg, Rm::Mem(mem)));
    }
    if rm == 5 && md == 0 {
        let disp = cur.i32()?;
        return Ok((reg, Rm::Mem(MemOperand::RipRelative { disp })));
    }
    let base = Reg::from_index(rm | (rex.b << 3));
    let disp = read_disp(cur)?;
    Ok((reg, Rm::Mem(MemOperand::BaseDisp { base, disp })))
}

fn target(address: u64, len: usize, disp: i64) -> i64 {
    address as i64 + len as i64 + disp
}

fn decode_op(cur: &mut Cursor<'_>, address: u64) -> Result<Op, DecodeError> {
    let mut prefix = None;
    if let Some(p @ (0x66 | 0xF2 | 0xF3)) = cur.peek() {
        prefix = Some(p);
        cur.pos += 1;
    }
    if prefix.is_none() && matches!(cur.peek(), Some(0xC4 | 0xC5)) {
        return decode_vex_gather(cur);
    }
    let mut rex = Rex::default();
    if let Some(b @ 0x40..=0x4F) = cur.peek() {
        rex = Rex {
            w: b & 8 != 0,
            r: (b >> 2) & 1,
            x: (b >> 1) & 1,
            b: b & 1,
        };
        cur.pos += 1;
    }
    let opc = cur.u8()?;
    if opc == 0x0F {
        return decode_0f(cur, address, prefix, rex);
    }
    if prefix.is_some() {
        return cur.unknown();
    }

    let need_w = |cur: &Cursor<'_>| -> Result<(), DecodeError> {
        if rex.w {
            Ok(())
        } else {
            cur.unknown()
        }
    };

    match opc {
        0xB8..=0xBF => {
            need_w(cur)?;
            let dst = Reg::from_index((opc - 0xB8) | (rex.b << 3));
            let imm = cur.u64()? as i64;
            Ok(Op::MovImm { dst, imm })
        }
        0x89 | 0x8B | 0x8D => {
            need_w(cur)?;
            let (reg, rm) = modrm(cur, rex)?;
            let reg = Reg::from_index(reg);
            match (opc, rm) {
                (0x89, Rm::Reg(dst)) => Ok(Op::MovRR { dst, src: reg }),
                (0x89, Rm::Mem(mem)) => Ok(Op::Store { mem, src: reg }),
                // 8B with a register r/m is the non-canonical mov direction.
                (0x8B, Rm::Mem(mem)) => Ok(Op::Load { dst: reg, mem }),
                (0x8D, Rm::Mem(mem)) => Ok(Op::Lea { dst: reg, mem }),
                _ => cur.unknown(),
            }
        }
        0xA1 | 0xA3 => {
            need_w(cur)?;
            let addr = cur.u64()?;
            Ok(if opc == 0xA1 {
                Op::LoadAbs { addr }
            } else {
                Op::StoreAbs { addr }
            })
        }
        0x81 => {
            need_w(cur)?;
            let (ext, rm) = modrm(cur, rex)?;
            let Rm::Reg(dst) = rm else {
                return cur.unknown();
            };
            let op = match ext & 7 {
                0 => AluImmOp::Add,
                5 => AluImmOp::Sub,
                _ => return cur.unknown(),
            };
            let imm = cur.i32()?;
            Ok(Op::AluImm { op, dst, imm })
        }
        0x01 | 0x29 | 0x21 | 0x09 | 0x31 | 0x39 => {
            need_w(cur)?;
            let op = match opc {
                0x01 => AluOp::Add,
                0x29 => AluOp::Sub,
                0x21 => AluOp::And,
                0x09 => AluOp::Or,
                0x31 => AluOp::Xor,
                _ => AluOp::Cmp,
            };
            let (src, rm) = modrm(cur, rex)?;
            let Rm::Reg(dst) = rm else {
                return cur.unknown();
            };
            Ok(Op::Alu {
                op,
                dst,
                src: Reg::from_index(src),
            })
        }
        0x50..=0x57 => Ok(Op::Push(Reg::from_index((opc - 0x50) | (rex.b << 3)))),
        0x58..=0x5F => Ok(Op::Pop(Reg::from_index((opc - 0x58) | (rex.b << 3)))),
        0xEB => {
            let d = cur.i8()? as i64;
            Ok(Op::Jmp {
                target: target(address, cur.pos, d),
                short: true,
            })
        }
        0xE9 | 0xE8 => {
            let d = cur.i32()? as i64;
            let t = target(address, cur.pos, d);
            Ok(if opc == 0xE9 {
                Op::Jmp {
                    target: t,
                    short: false,
                }
            } else {
                Op::Call { target: t }
            })
        }
        0xFF => {
            let (ext, rm) = modrm(cur, rex)?;
            match (ext & 7, rm) {
                (4, Rm::Reg(r)) => Ok(Op::JmpReg(r)),
                (4, Rm::Mem(m)) => Ok(Op::JmpMem(m)),
                (2, Rm::Reg(r)) => Ok(Op::CallReg(r)),
                (2, Rm::Mem(m)) => Ok(Op::CallMem(m)),
                _ => cur.unknown(),
            }
        }
        0xC3 => Ok(Op::Ret),
        0x90 if rex.b == 0 => Ok(Op::Nop),
        _ => cur.unknown(),
    }
}

fn decode_0f(
    cur: &mut Cursor<'_>,
    address: u64,
    prefix: Option<u8>,
    rex: Rex,
) -> Result<Op, DecodeError> {
    let opc = cur.u8()?;
    let opaque = |cur: &Cursor<'_>, kind: DangerKind| Op::Dangerous {
        kind,
        bytes: cur.bytes[..cur.pos].to_vec(),
    };
    match (prefix, opc) {
        (None, 0x84 | 0x85 | 0x8C | 0x8D) => {
            let cond = match opc {
                0x84 => Cond::E,
                0x85 => Cond::Ne,
                0x8C => Cond::L,
                _ => Cond::Ge,
            };
            let d = cur.i32()? as i64;
            Ok(Op::Jcc {
                cond,
                target: target(address, cur.pos, d),
            })
        }
        (None, 0x05) => Ok(Op::SyscallGate),
        (None, 0x1F) => {
            let (ext, rm) = modrm(cur, rex)?;
            match (ext & 7, rm) {
                (0, Rm::Mem(mem)) => Ok(Op::NopLong {
                    mem,
                    bytes: cur.bytes[..cur.pos].to_vec(),
                }),
                _ => cur.unknown(),
            }
        }
        (None, 0x01) => match cur.u8()? {
            // enclu / encls
            0xD7 | 0xCF => Ok(opaque(cur, DangerKind::SgxLeaf)),
            _ => cur.unknown(),
        },
        (None, 0xAE) => {
            let (ext, rm) = modrm(cur, rex)?;
            match (ext & 7, rm) {
                (5, Rm::Mem(_)) => Ok(opaque(cur, DangerKind::XStateRestore)),
                _ => cur.unknown(),
            }
        }
        (Some(0xF3), 0xAE) => {
            let (ext, rm) = modrm(cur, rex)?;
            match (ext & 7, rm) {
                (2 | 3, Rm::Reg(_)) => Ok(opaque(cur, DangerKind::SegBaseWrite)),
                _ => cur.unknown(),
            }
        }
        (Some(p @ (0xF3 | 0xF2)), 0x1A) => {
            let (bnd, rm) = modrm(cur, rex)?;
            if bnd > 3 {
                return cur.unknown();
            }
            let operand = match rm {
                Rm::Reg(r) => BndOperand::Reg(r),
                Rm::Mem(m) => BndOperand::Mem(m),
            };
            Ok(Op::BndCheck {
                side: if p == 0xF3 {
                    BoundSide::Lower
                } else {
                    BoundSide::Upper
                },
                bnd,
                operand,
            })
        }
        (Some(0xF3), 0x1B) => {
            let (bnd, rm) = modrm(cur, rex)?;
            match rm {
                Rm::Mem(_) if bnd <= 3 => Ok(opaque(cur, DangerKind::MpxMutation)),
                _ => cur.unknown(),
            }
        }
        (Some(0x66), 0x1A | 0x1B) => {
            let (bnd, _) = modrm(cur, rex)?;
            if bnd > 3 {
                return cur.unknown();
            }
            Ok(opaque(cur, DangerKind::MpxMutation))
        }
        _ => cur.unknown(),
    }
}

/// VEX-encoded instructions are only recognized when they carry a VSIB
/// memory operand; the payload is kept opaque.
fn decode_vex_gather(cur: &mut Cursor<'_>) -> Result<Op, DecodeError> {
    let lead = cur.u8()?;
    let (not_x, not_b) = if lead == 0xC4 {
        let p1 = cur.u8()?;
        let _p2 = cur.u8()?;
        ((p1 >> 6) & 1, (p1 >> 5) & 1)
    } else {
        let _p1 = cur.u8()?;
        (1, 1)
    };
    let _opcode = cur.u8()?;
    let m = cur.u8()?;
    let md = m >> 6;
    if md == 3 || m & 7 != 4 {
        return cur.unknown();
    }
    let sib = cur.u8()?;
    let scale = 1 << (sib >> 6);
    let vindex = ((sib >> 3) & 7) | ((1 - not_x) << 3);
    let base_bits = sib & 7;
    let (base, disp) = if base_bits == 5 && md == 0 {
        (None, cur.i32()?)
    } else {
        let base = Reg::from_index(base_bits | ((1 - not_b) << 3));
        let disp = match md {
            0 => 0,
            1 => cur.i8()? as i32,
            _ => cur.i32()?,
        };
        (Some(base), disp)
    };
    Ok(Op::VectorGather {
        mem: MemOperand::Vsib {
            base,
            vindex,
            scale,
            disp,
        },
        bytes: cur.bytes[..cur.pos].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::InstrClass;

    #[test]
    fn nop_and_label() {
        let i = decode(&[0x90], 0).unwrap();
        assert_eq!(i.class(), InstrClass::Nop);
        assert_eq!(i.len(), 1);
        let l = decode(&[0x0F, 0x1F, 0x84, 0x24, 0x2A, 0, 0, 0], 0).unwrap();
        assert_eq!(l.class(), InstrClass::CfiLabel(42));
        assert_eq!(l.len(), 8);
    }

    #[test]
    fn rel32_target() {
        let mut code = vec![0x90; 16];
        code.extend_from_slice(&[0xE9, 0x0B, 0, 0, 0]);
        let i = decode(&code, 16).unwrap();
        assert_eq!(i.class(), InstrClass::DirectJump);
        assert_eq!(i.op.direct_target(), Some(32));
    }

    #[test]
    fn truncated_and_unknown() {
        assert_eq!(
            decode(&[0xE9, 0x00], 0),
            Err(DecodeError::TruncatedInstruction(0))
        );
        assert_eq!(
            decode(&[0x0F, 0x1F, 0x84, 0x24, 1], 0),
            Err(DecodeError::TruncatedInstruction(0))
        );
        assert_eq!(decode(&[0x00, 0x00], 0), Err(DecodeError::UnknownOpcode(0)));
        // 32-bit mov without REX.W
        assert_eq!(decode(&[0x89, 0xC0], 0), Err(DecodeError::UnknownOpcode(0)));
    }

    #[test]
    fn non_canonical_rejected() {
        // mov [rsp+0], rax with an explicit disp32
        let bytes = [0x48, 0x89, 0x84, 0x24, 0, 0, 0, 0];
        assert!(decode(&bytes, 0).is_err());
        // push rax with a redundant REX
        assert!(decode(&[0x40, 0x50], 0).is_err());
        // mov rax, rcx via the 8B direction
        assert!(decode(&[0x48, 0x8B, 0xC1], 0).is_err());
    }

    #[test]
    fn dangerous_forms() {
        let cases: &[(&[u8], DangerKind)] = &[
            (&[0x0F, 0x01, 0xD7], DangerKind::SgxLeaf),
            (&[0x0F, 0xAE, 0x28], DangerKind::XStateRestore),
            (&[0xF3, 0x48, 0x0F, 0xAE, 0xD0], DangerKind::SegBaseWrite),
            (&[0xF3, 0x48, 0x0F, 0xAE, 0xD8], DangerKind::SegBaseWrite),
            (&[0xF3, 0x0F, 0x1B, 0x00], DangerKind::MpxMutation),
            (&[0x66, 0x0F, 0x1A, 0xC1], DangerKind::MpxMutation),
        ];
        for (bytes, kind) in cases {
            let i = decode(bytes, 0).unwrap();
            assert_eq!(i.class(), InstrClass::Dangerous(*kind), "{:02x?}", bytes);
            assert_eq!(i.len(), bytes.len());
        }
    }

    #[test]
    fn vector_gather() {
        // vpgatherdd xmm1, [rax+xmm2*4], xmm3
        let bytes = [0xC4, 0xE2, 0x61, 0x90, 0x0C, 0x90];
        let i = decode(&bytes, 0).unwrap();
        assert_eq!(i.class(), InstrClass::VectorGather);
        assert!(matches!(
            i.op,
            Op::VectorGather {
                mem: MemOperand::Vsib {
                    base: Some(Reg::Rax),
                    vindex: 2,
                    scale: 4,
                    disp: 0
                },
                ..
            }
        ));
    }

    #[test]
    fn overlapping_decode_inside_immediate() {
        // mov rax, imm64 whose immediate bytes are nops: decoding inside A
        // yields a valid B.
        let bytes = [0x48, 0xB8, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90];
        let a = decode(&bytes, 0).unwrap();
        assert_eq!(a.len(), 10);
        let b = decode(&bytes, 2).unwrap();
        assert_eq!(b.op, Op::Nop);
    }
}
