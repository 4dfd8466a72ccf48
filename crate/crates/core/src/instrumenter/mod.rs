//! SASM to SIPB: parsing, cfi_label insertion, lowering of unsafe transfers,
//! mem_guard insertion, optimization and assembly.
//!
//! Three build modes share the parser and assembler:
//!
//! * [`instrument`] runs the full pipeline and yields verifiable images.
//! * [`assemble_raw`] assembles hand-written, possibly hostile code verbatim.
//! * [`assemble_reference`] assembles the uninstrumented program for the
//!   permissive reference interpreter.

mod assemble;
mod optimize;
mod parse;
mod passes;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::image::SipbImage;
use crate::isa::{Cond, MemOperand, Op, Reg};

pub use assemble::{assemble, assemble_with, AssembleError, AssembleMode, Assembled};
pub use optimize::{optimize, OptimizeReport};
pub use parse::{parse_sasm, parse_sasm_raw, ParseError};
pub use passes::{insert_cfi_labels, insert_mem_guards, lower_unsafe_transfers};

/// One body element of a SASM function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Item {
    Label(String),
    Instr(SInstr),
    CfiLabel { domain_id: u32 },
    MemGuard(MemOperand),
    CfiGuard { target: Reg, scratch: Reg },
    /// Source-level system call, lowered to a guarded jump to the trampoline.
    Syscall,
    /// Verbatim bytes (raw mode only).
    Bytes(Vec<u8>),
}

/// An instruction whose branch targets and address operands may still be
/// symbolic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SInstr {
    Op(Op),
    Jmp(String),
    Jcc(Cond, String),
    Call(String),
    /// `mov dst, &label`, assembled as `lea dst, [rip + label]`.
    AddrOf { dst: Reg, label: String },
}

impl SInstr {
    pub fn op(&self) -> Option<&Op> {
        match self {
            SInstr::Op(op) => Some(op),
            _ => None,
        }
    }

    /// Whether execution may continue with the next item.
    pub fn falls_through(&self) -> bool {
        match self {
            SInstr::Jmp(_) => false,
            SInstr::Op(op) => !op.is_unconditional_transfer(),
            _ => true,
        }
    }

    pub fn is_call(&self) -> bool {
        matches!(
            self,
            SInstr::Call(_) | SInstr::Op(Op::CallReg(_)) | SInstr::Op(Op::CallMem(_))
        )
    }

    pub fn label_ref(&self) -> Option<&str> {
        match self {
            SInstr::Jmp(l) | SInstr::Jcc(_, l) | SInstr::Call(l) => Some(l),
            SInstr::AddrOf { label, .. } => Some(label),
            SInstr::Op(_) => None,
        }
    }

    pub fn written_regs(&self) -> Vec<Reg> {
        match self {
            SInstr::Op(op) => op.written_regs(),
            SInstr::Call(_) => vec![Reg::Rsp],
            SInstr::AddrOf { dst, .. } => vec![*dst],
            SInstr::Jmp(_) | SInstr::Jcc(..) => Vec::new(),
        }
    }
}

impl Item {
    pub fn op(&self) -> Option<&Op> {
        match self {
            Item::Instr(i) => i.op(),
            _ => None,
        }
    }

    pub fn falls_through(&self) -> bool {
        match self {
            Item::Instr(i) => i.falls_through(),
            _ => true,
        }
    }

    /// Whether the item emits machine code.
    pub fn emits_code(&self) -> bool {
        !matches!(self, Item::Label(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub body: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataBlob {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SasmProgram {
    pub functions: Vec<Function>,
    pub data: Vec<DataBlob>,
    /// Name of the entry function: `main` if defined, else the first one.
    pub entry: String,
}

impl SasmProgram {
    /// Labels defined in code, including function names.
    pub fn code_labels(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for f in &self.functions {
            out.insert(f.name.clone());
            for item in &f.body {
                if let Item::Label(l) = item {
                    out.insert(l.clone());
                }
            }
        }
        out
    }

    pub fn mem_guard_count(&self) -> usize {
        self.functions
            .iter()
            .flat_map(|f| &f.body)
            .filter(|i| matches!(i, Item::MemGuard(_)))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstrumentOptions {
    pub confine_loads: bool,
    pub optimize: bool,
    pub d_capacity: u64,
    pub stack_reserve: u64,
    /// Maximum code size including the loader's trampoline.
    pub c_capacity: u64,
}

pub const DEFAULT_D_CAPACITY: u64 = 64 * 1024;
pub const DEFAULT_STACK_RESERVE: u64 = 16 * 1024;
pub const DEFAULT_C_CAPACITY: u64 = 4 * 1024 * 1024;

impl Default for InstrumentOptions {
    fn default() -> Self {
        InstrumentOptions {
            confine_loads: true,
            optimize: true,
            d_capacity: DEFAULT_D_CAPACITY,
            stack_reserve: DEFAULT_STACK_RESERVE,
            c_capacity: DEFAULT_C_CAPACITY,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InstrumentError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("rsp adjusted by {imm} in `{function}`: exceeds the guard size")]
    RspAdjustTooLarge { function: String, imm: i64 },
    #[error(transparent)]
    Assemble(#[from] AssembleError),
}

/// Output of the full pipeline.
#[derive(Clone, Debug)]
pub struct Instrumented {
    pub program: SasmProgram,
    pub assembled: Assembled,
    pub optimize: Option<OptimizeReport>,
}

impl Instrumented {
    pub fn image(&self) -> &SipbImage {
        &self.assembled.image
    }
}

/// parse, insert labels, lower, guard, optimize, assemble.
pub fn instrument(text: &str, opts: InstrumentOptions) -> Result<Instrumented, InstrumentError> {
    let p = parse_sasm(text)?;
    instrument_program(p, opts)
}

pub fn instrument_program(
    p: SasmProgram,
    opts: InstrumentOptions,
) -> Result<Instrumented, InstrumentError> {
    let p = insert_cfi_labels(p);
    let p = lower_unsafe_transfers(p);
    let p = insert_mem_guards(p, opts.confine_loads)?;
    let (p, report) = if opts.optimize {
        let (p, r) = optimize(p, opts)?;
        (p, Some(r))
    } else {
        (p, None)
    };
    let assembled = assemble(&p, opts)?;
    Ok(Instrumented {
        program: p,
        assembled,
        optimize: report,
    })
}

/// Assembles hand-written code verbatim: reserved registers, pseudo-ops, raw
/// bytes and unsafe transfers are all allowed and nothing is inserted.
pub fn assemble_raw(text: &str, opts: InstrumentOptions) -> Result<Assembled, InstrumentError> {
    let p = parse_sasm_raw(text)?;
    let p = passes::expand_raw_syscalls(p);
    Ok(assemble_with(&p, opts, AssembleMode::Raw)?)
}

/// Assembles the program without instrumentation, for the permissive
/// reference interpreter.
pub fn assemble_reference(
    text: &str,
    opts: InstrumentOptions,
) -> Result<Assembled, InstrumentError> {
    let p = parse_sasm(text)?;
    let p = passes::reference_lowering(p);
    Ok(assemble_with(&p, opts, AssembleMode::Reference)?)
}
