//! The supported x86-64 subset.
//!
//! Every instruction form has exactly one canonical encoding. The decoder
//! rejects non-canonical byte sequences, so `encode(decode(b)) == b` holds for
//! every accepted `b`. Opaque forms (dangerous instructions, vector gathers,
//! long nops) carry their raw bytes.

mod decode;
mod encode;
mod pseudo;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use decode::{decode, decode_at, DecodeError};
pub use encode::{encode, EncodeError};
pub use pseudo::{recognize_pseudo, scan_cfi_labels, PseudoInstr};

/// First four bytes of every cfi_label: `nop dword [rsp + disp32]` with an
/// explicit SIB byte. The trailing disp32 carries the domain ID.
pub const MAGIC: [u8; 4] = [0x0F, 0x1F, 0x84, 0x24];

/// Encoded length of a cfi_label.
pub const CFI_LABEL_LEN: usize = 8;

/// Size of each guard region flanking a data region.
pub const GUARD_SIZE: i64 = 4096;

/// Registers reserved for instrumentation scratch use.
pub const SCRATCH_REGS: [Reg; 2] = [Reg::R10, Reg::R11];

/// A 64-bit general-purpose register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reg {
    Rax,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rbx,
        Reg::Rsp,
        Reg::Rbp,
        Reg::Rsi,
        Reg::Rdi,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    pub fn from_index(n: u8) -> Reg {
        Reg::ALL[(n & 15) as usize]
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    /// Low three bits as they appear in ModRM/SIB/opcode fields.
    pub(crate) fn low3(self) -> u8 {
        self.index() & 7
    }

    pub(crate) fn ext(self) -> u8 {
        self.index() >> 3
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 16] = [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ];
        NAMES[self.index() as usize]
    }

    pub fn from_name(s: &str) -> Option<Reg> {
        Reg::ALL.iter().copied().find(|r| r.name() == s)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A memory operand.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemOperand {
    /// `[base + disp]`
    BaseDisp { base: Reg, disp: i32 },
    /// `[base + index*scale + disp]`
    BaseIndexDisp {
        base: Reg,
        index: Reg,
        scale: u8,
        disp: i32,
    },
    /// `[rip + disp]`; the displacement is relative to the next instruction.
    RipRelative { disp: i32 },
    /// A hard-coded 64-bit address (`moffs` forms only).
    DirectOffset { addr: u64 },
    /// Vector SIB: the index is a vector register.
    Vsib {
        base: Option<Reg>,
        vindex: u8,
        scale: u8,
        disp: i32,
    },
}

impl MemOperand {
    pub fn base(base: Reg, disp: i32) -> Self {
        MemOperand::BaseDisp { base, disp }
    }

    /// Base register, if any, for GPR-addressed forms.
    pub fn base_reg(&self) -> Option<Reg> {
        match self {
            MemOperand::BaseDisp { base, .. } | MemOperand::BaseIndexDisp { base, .. } => {
                Some(*base)
            }
            MemOperand::Vsib { base, .. } => *base,
            _ => None,
        }
    }

    /// Registers read to compute the effective address.
    pub fn regs(&self) -> Vec<Reg> {
        match self {
            MemOperand::BaseDisp { base, .. } => vec![*base],
            MemOperand::BaseIndexDisp { base, index, .. } => vec![*base, *index],
            MemOperand::Vsib { base, .. } => base.iter().copied().collect(),
            _ => Vec::new(),
        }
    }

    pub fn uses(&self, r: Reg) -> bool {
        self.regs().contains(&r)
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn disp_suffix(f: &mut fmt::Formatter<'_>, disp: i32) -> fmt::Result {
            match disp {
                0 => Ok(()),
                d if d < 0 => write!(f, "-{:#x}", -(d as i64)),
                d => write!(f, "+{:#x}", d),
            }
        }
        match self {
            MemOperand::BaseDisp { base, disp } => {
                write!(f, "[{}", base)?;
                disp_suffix(f, *disp)?;
                f.write_str("]")
            }
            MemOperand::BaseIndexDisp {
                base,
                index,
                scale,
                disp,
            } => {
                write!(f, "[{}+{}*{}", base, index, scale)?;
                disp_suffix(f, *disp)?;
                f.write_str("]")
            }
            MemOperand::RipRelative { disp } => {
                f.write_str("[rip")?;
                disp_suffix(f, *disp)?;
                f.write_str("]")
            }
            MemOperand::DirectOffset { addr } => write!(f, "[{:#x}]", addr),
            MemOperand::Vsib {
                base,
                vindex,
                scale,
                disp,
            } => {
                f.write_str("[")?;
                if let Some(b) = base {
                    write!(f, "{}+", b)?;
                }
                write!(f, "xmm{}*{}", vindex, scale)?;
                disp_suffix(f, *disp)?;
                f.write_str("]")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Cmp,
}

impl AluOp {
    pub const ALL: [AluOp; 6] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Cmp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Cmp => "cmp",
        }
    }

    /// Whether the operation writes its destination (`cmp` only sets flags).
    pub fn writes_dst(self) -> bool {
        self != AluOp::Cmp
    }
}

/// Only `add` and `sub` have an immediate form in the subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluImmOp {
    Add,
    Sub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    E,
    Ne,
    L,
    Ge,
}

impl Cond {
    pub const ALL: [Cond; 4] = [Cond::E, Cond::Ne, Cond::L, Cond::Ge];

    pub fn name(self) -> &'static str {
        match self {
            Cond::E => "je",
            Cond::Ne => "jne",
            Cond::L => "jl",
            Cond::Ge => "jge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundSide {
    Lower,
    Upper,
}

/// The checked value of a `bndcl`/`bndcu`: a register or an effective address.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BndOperand {
    Reg(Reg),
    Mem(MemOperand),
}

/// Blacklisted instruction families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DangerKind {
    SgxLeaf,
    MpxMutation,
    XStateRestore,
    SegBaseWrite,
}

/// A decoded instruction's operation, with relative targets resolved.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    MovImm { dst: Reg, imm: i64 },
    MovRR { dst: Reg, src: Reg },
    Load { dst: Reg, mem: MemOperand },
    Store { mem: MemOperand, src: Reg },
    /// `mov rax, [moffs64]`
    LoadAbs { addr: u64 },
    /// `mov [moffs64], rax`
    StoreAbs { addr: u64 },
    Lea { dst: Reg, mem: MemOperand },
    AluImm { op: AluImmOp, dst: Reg, imm: i32 },
    Alu { op: AluOp, dst: Reg, src: Reg },
    Push(Reg),
    Pop(Reg),
    Jmp { target: i64, short: bool },
    Jcc { cond: Cond, target: i64 },
    Call { target: i64 },
    JmpReg(Reg),
    CallReg(Reg),
    JmpMem(MemOperand),
    CallMem(MemOperand),
    Ret,
    Nop,
    /// Any `0F 1F /0` multi-byte nop other than a cfi_label.
    NopLong { mem: MemOperand, bytes: Vec<u8> },
    CfiLabel { domain_id: u32 },
    BndCheck {
        side: BoundSide,
        bnd: u8,
        operand: BndOperand,
    },
    SyscallGate,
    Dangerous { kind: DangerKind, bytes: Vec<u8> },
    VectorGather { mem: MemOperand, bytes: Vec<u8> },
}

/// Coarse classification used by the verifier stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstrClass {
    Alu,
    MovRegImm,
    MovRegReg,
    Lea,
    Load,
    Store,
    Push,
    Pop,
    DirectJump,
    CondJump,
    DirectCall,
    IndirectJumpReg,
    IndirectCallReg,
    IndirectJumpMem,
    IndirectCallMem,
    Return,
    BndCheckLower,
    BndCheckUpper,
    CfiLabel(u32),
    Nop,
    SyscallGate,
    Dangerous(DangerKind),
    VectorGather,
}

/// One operand as exposed to consumers that do not match on [`Op`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Operand {
    Register(Reg),
    Immediate(i64),
    Mem(MemOperand),
    BoundRegister(u8),
    RelTarget(i64),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub raw: Vec<u8>,
    pub op: Op,
}

impl Instruction {
    /// Builds an instruction at `address` by encoding `op`.
    pub fn new(address: u64, op: Op) -> Result<Instruction, EncodeError> {
        let raw = encode::encode_op(address, &op)?;
        Ok(Instruction { address, raw, op })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Address of the following instruction.
    pub fn end(&self) -> u64 {
        self.address + self.raw.len() as u64
    }

    pub fn class(&self) -> InstrClass {
        self.op.class()
    }

    pub fn operands(&self) -> Vec<Operand> {
        self.op.operands()
    }

    pub fn mnemonic(&self) -> &'static str {
        self.op.mnemonic()
    }
}

impl Op {
    pub fn class(&self) -> InstrClass {
        match self {
            Op::MovImm { .. } => InstrClass::MovRegImm,
            Op::MovRR { .. } => InstrClass::MovRegReg,
            Op::Load { .. } | Op::LoadAbs { .. } => InstrClass::Load,
            Op::Store { .. } | Op::StoreAbs { .. } => InstrClass::Store,
            Op::Lea { .. } => InstrClass::Lea,
            Op::AluImm { .. } | Op::Alu { .. } => InstrClass::Alu,
            Op::Push(_) => InstrClass::Push,
            Op::Pop(_) => InstrClass::Pop,
            Op::Jmp { .. } => InstrClass::DirectJump,
            Op::Jcc { .. } => InstrClass::CondJump,
            Op::Call { .. } => InstrClass::DirectCall,
            Op::JmpReg(_) => InstrClass::IndirectJumpReg,
            Op::CallReg(_) => InstrClass::IndirectCallReg,
            Op::JmpMem(_) => InstrClass::IndirectJumpMem,
            Op::CallMem(_) => InstrClass::IndirectCallMem,
            Op::Ret => InstrClass::Return,
            Op::Nop | Op::NopLong { .. } => InstrClass::Nop,
            Op::CfiLabel { domain_id } => InstrClass::CfiLabel(*domain_id),
            Op::BndCheck {
                side: BoundSide::Lower,
                ..
            } => InstrClass::BndCheckLower,
            Op::BndCheck {
                side: BoundSide::Upper,
                ..
            } => InstrClass::BndCheckUpper,
            Op::SyscallGate => InstrClass::SyscallGate,
            Op::Dangerous { kind, .. } => InstrClass::Dangerous(*kind),
            Op::VectorGather { .. } => InstrClass::VectorGather,
        }
    }

    pub fn operands(&self) -> Vec<Operand> {
        use Operand::*;
        match self {
            Op::MovImm { dst, imm } => vec![Register(*dst), Immediate(*imm)],
            Op::MovRR { dst, src } => vec![Register(*dst), Register(*src)],
            Op::Load { dst, mem } | Op::Lea { dst, mem } => {
                vec![Register(*dst), Mem(mem.clone())]
            }
            Op::Store { mem, src } => vec![Mem(mem.clone()), Register(*src)],
            Op::LoadAbs { addr } => vec![
                Register(Reg::Rax),
                Mem(MemOperand::DirectOffset { addr: *addr }),
            ],
            Op::StoreAbs { addr } => vec![
                Mem(MemOperand::DirectOffset { addr: *addr }),
                Register(Reg::Rax),
            ],
            Op::AluImm { dst, imm, .. } => vec![Register(*dst), Immediate(*imm as i64)],
            Op::Alu { dst, src, .. } => vec![Register(*dst), Register(*src)],
            Op::Push(r) | Op::Pop(r) | Op::JmpReg(r) | Op::CallReg(r) => vec![Register(*r)],
            Op::Jmp { target, .. } | Op::Jcc { target, .. } | Op::Call { target } => {
                vec![RelTarget(*target)]
            }
            Op::JmpMem(m) | Op::CallMem(m) => vec![Mem(m.clone())],
            Op::NopLong { mem, .. } | Op::VectorGather { mem, .. } => vec![Mem(mem.clone())],
            Op::CfiLabel { domain_id } => vec![Immediate(*domain_id as i64)],
            Op::BndCheck { bnd, operand, .. } => vec![
                BoundRegister(*bnd),
                match operand {
                    BndOperand::Reg(r) => Register(*r),
                    BndOperand::Mem(m) => Mem(m.clone()),
                },
            ],
            Op::Ret | Op::Nop | Op::SyscallGate | Op::Dangerous { .. } => Vec::new(),
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Op::MovImm { .. } | Op::MovRR { .. } | Op::Load { .. } | Op::Store { .. } => "mov",
            Op::LoadAbs { .. } | Op::StoreAbs { .. } => "movabs",
            Op::Lea { .. } => "lea",
            Op::AluImm {
                op: AluImmOp::Add, ..
            } => "add",
            Op::AluImm {
                op: AluImmOp::Sub, ..
            } => "sub",
            Op::Alu { op, .. } => op.name(),
            Op::Push(_) => "push",
            Op::Pop(_) => "pop",
            Op::Jmp { .. } | Op::JmpReg(_) | Op::JmpMem(_) => "jmp",
            Op::Jcc { cond, .. } => cond.name(),
            Op::Call { .. } | Op::CallReg(_) | Op::CallMem(_) => "call",
            Op::Ret => "ret",
            Op::Nop | Op::NopLong { .. } => "nop",
            Op::CfiLabel { .. } => "cfi_label",
            Op::BndCheck {
                side: BoundSide::Lower,
                ..
            } => "bndcl",
            Op::BndCheck {
                side: BoundSide::Upper,
                ..
            } => "bndcu",
            Op::SyscallGate => "syscall",
            Op::Dangerous { kind, bytes } => match kind {
                DangerKind::SgxLeaf => "enclu",
                DangerKind::XStateRestore => "xrstor",
                DangerKind::SegBaseWrite => {
                    if bytes.last().map(|m| (m >> 3) & 7) == Some(3) {
                        "wrgsbase"
                    } else {
                        "wrfsbase"
                    }
                }
                DangerKind::MpxMutation => {
                    if bytes.first() == Some(&0x66) {
                        "bndmov"
                    } else {
                        "bndmk"
                    }
                }
            },
            Op::VectorGather { .. } => "vgather",
        }
    }

    /// Relative branch target, if any.
    pub fn direct_target(&self) -> Option<i64> {
        match self {
            Op::Jmp { target, .. } | Op::Jcc { target, .. } | Op::Call { target } => {
                Some(*target)
            }
            _ => None,
        }
    }

    /// Control never falls through to the next instruction.
    pub fn is_unconditional_transfer(&self) -> bool {
        matches!(
            self,
            Op::Jmp { .. } | Op::JmpReg(_) | Op::JmpMem(_) | Op::Ret
        )
    }

    pub fn is_control_transfer(&self) -> bool {
        matches!(
            self,
            Op::Jmp { .. }
                | Op::Jcc { .. }
                | Op::Call { .. }
                | Op::JmpReg(_)
                | Op::CallReg(_)
                | Op::JmpMem(_)
                | Op::CallMem(_)
                | Op::Ret
        )
    }

    pub fn is_register_indirect(&self) -> bool {
        matches!(self, Op::JmpReg(_) | Op::CallReg(_))
    }

    /// Push/pop-class instructions whose data access goes through rsp.
    pub fn is_stack_access(&self) -> bool {
        matches!(
            self,
            Op::Push(_) | Op::Pop(_) | Op::Call { .. } | Op::CallReg(_) | Op::CallMem(_) | Op::Ret
        )
    }

    /// General-purpose registers this instruction may write (rsp included for
    /// implicit stack updates).
    pub fn written_regs(&self) -> Vec<Reg> {
        match self {
            Op::MovImm { dst, .. }
            | Op::MovRR { dst, .. }
            | Op::Load { dst, .. }
            | Op::Lea { dst, .. }
            | Op::AluImm { dst, .. } => vec![*dst],
            Op::Alu { op, dst, .. } => {
                if op.writes_dst() {
                    vec![*dst]
                } else {
                    Vec::new()
                }
            }
            Op::LoadAbs { .. } => vec![Reg::Rax],
            Op::Push(_) | Op::Call { .. } | Op::CallReg(_) | Op::CallMem(_) | Op::Ret => {
                vec![Reg::Rsp]
            }
            Op::Pop(r) => {
                if *r == Reg::Rsp {
                    vec![Reg::Rsp]
                } else {
                    vec![*r, Reg::Rsp]
                }
            }
            Op::Dangerous { .. } | Op::VectorGather { .. } | Op::SyscallGate => Reg::ALL.to_vec(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match &self.op {
            Op::MovImm { dst, imm } => write!(f, "{} {}, {:#x}", m, dst, imm),
            Op::MovRR { dst, src } => write!(f, "{} {}, {}", m, dst, src),
            Op::Load { dst, mem } | Op::Lea { dst, mem } => write!(f, "{} {}, {}", m, dst, mem),
            Op::Store { mem, src } => write!(f, "{} {}, {}", m, mem, src),
            Op::LoadAbs { addr } => write!(f, "{} rax, [{:#x}]", m, addr),
            Op::StoreAbs { addr } => write!(f, "{} [{:#x}], rax", m, addr),
            Op::AluImm { dst, imm, .. } => write!(f, "{} {}, {}", m, dst, imm),
            Op::Alu { dst, src, .. } => write!(f, "{} {}, {}", m, dst, src),
            Op::Push(r) | Op::Pop(r) | Op::JmpReg(r) | Op::CallReg(r) => write!(f, "{} {}", m, r),
            Op::Jmp { target, .. } | Op::Jcc { target, .. } | Op::Call { target } => {
                write!(f, "{} {:#x}", m, target)
            }
            Op::JmpMem(mem) | Op::CallMem(mem) => write!(f, "{} qword {}", m, mem),
            Op::NopLong { mem, .. } => write!(f, "{} {}", m, mem),
            Op::CfiLabel { domain_id } => write!(f, "cfi_label<id={}>", domain_id),
            Op::BndCheck { bnd, operand, .. } => match operand {
                BndOperand::Reg(r) => write!(f, "{} bnd{}, {}", m, bnd, r),
                BndOperand::Mem(mem) => write!(f, "{} bnd{}, {}", m, bnd, mem),
            },
            Op::VectorGather { mem, .. } => write!(f, "{} {}", m, mem),
            Op::Ret | Op::Nop | Op::SyscallGate | Op::Dangerous { .. } => f.write_str(m),
        }
    }
}
