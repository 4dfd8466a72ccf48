use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{InstrumentOptions, Item, SInstr, SasmProgram};
use crate::image::{data_offset, SipbImage, TRAMPOLINE_LEN};
use crate::isa::{
    scan_cfi_labels, BndOperand, BoundSide, Cond, EncodeError, Instruction, MemOperand, Op, Reg,
    MAGIC,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssembleError {
    #[error("MAGIC bytes at code offset {offset:#x} could not be rewritten away")]
    MagicCollisionUnresolvable { offset: u64 },
    #[error("{section} needs {size} bytes but the capacity is {capacity}")]
    ImageTooLarge {
        section: &'static str,
        size: u64,
        capacity: u64,
    },
    #[error("entry function `{0}` not found")]
    NoEntry(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssembleMode {
    /// Output of the instrumentation pipeline; MAGIC must occur only at
    /// inserted cfi_labels.
    Instrumented,
    /// Hand-written code, emitted verbatim and not validated.
    Raw,
    /// Uninstrumented code for the reference interpreter.
    Reference,
}

#[derive(Clone, Debug)]
pub struct Assembled {
    pub image: SipbImage,
    /// Code offsets of labels and function names.
    pub labels: BTreeMap<String, u64>,
    /// Offsets of data blobs within D.
    pub data_labels: BTreeMap<String, u64>,
    /// Start offset of every body item, parallel to the program's functions.
    pub item_offsets: Vec<Vec<u64>>,
    /// Offsets of the cfi_labels the program placed.
    pub cfi_labels: Vec<u64>,
    /// Number of instructions rewritten or padded to remove stray MAGIC bytes.
    pub magic_rewrites: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Op(Op),
    Jmp(String),
    Jcc(Cond, String),
    Call(String),
    AddrOf(Reg, String),
    Bytes(Vec<u8>),
    /// `jmp $`, closing code that would otherwise run off the end.
    Halt,
}

#[derive(Clone, Debug)]
struct Unit {
    /// (function, item) this unit came from; `None` for padding and tails.
    origin: Option<(usize, usize)>,
    /// Labels bound to this unit's start address.
    labels: Vec<String>,
    piece: Piece,
    /// Whether the unit must stay glued to the previous one.
    attached: bool,
}

fn bnd_check(side: BoundSide, bnd: u8, operand: BndOperand) -> Piece {
    Piece::Op(Op::BndCheck { side, bnd, operand })
}

fn expand(item: &Item) -> Vec<Piece> {
    match item {
        Item::Label(_) => Vec::new(),
        Item::Instr(SInstr::Op(op)) => vec![Piece::Op(op.clone())],
        Item::Instr(SInstr::Jmp(l)) => vec![Piece::Jmp(l.clone())],
        Item::Instr(SInstr::Jcc(c, l)) => vec![Piece::Jcc(*c, l.clone())],
        Item::Instr(SInstr::Call(l)) => vec![Piece::Call(l.clone())],
        Item::Instr(SInstr::AddrOf { dst, label }) => vec![Piece::AddrOf(*dst, label.clone())],
        Item::CfiLabel { domain_id } => vec![Piece::Op(Op::CfiLabel {
            domain_id: *domain_id,
        })],
        Item::MemGuard(m) => vec![
            bnd_check(BoundSide::Lower, 0, BndOperand::Mem(m.clone())),
            bnd_check(BoundSide::Upper, 0, BndOperand::Mem(m.clone())),
        ],
        Item::CfiGuard { target, scratch } => vec![
            Piece::Op(Op::Load {
                dst: *scratch,
                mem: MemOperand::base(*target, 0),
            }),
            bnd_check(BoundSide::Lower, 1, BndOperand::Reg(*scratch)),
            bnd_check(BoundSide::Upper, 1, BndOperand::Reg(*scratch)),
        ],
        // Only reachable when a pipeline stage was skipped.
        Item::Syscall => vec![Piece::Op(Op::SyscallGate)],
        Item::Bytes(b) => vec![Piece::Bytes(b.clone())],
    }
}

/// Whether padding may not be inserted between `prev` and the next unit.
fn binds_next(prev: &Piece) -> bool {
    match prev {
        Piece::Call(_) | Piece::Op(Op::BndCheck { .. } | Op::Call { .. }) => true,
        Piece::Op(op) => crate::verifier::adjusts_rsp(op),
        Piece::AddrOf(dst, _) => *dst == Reg::Rsp,
        _ => false,
    }
}

fn piece_len(p: &Piece) -> Result<u64, EncodeError> {
    Ok(match p {
        Piece::Op(op) => crate::isa::Instruction::new(0, op.clone())?.len() as u64,
        Piece::Jmp(_) | Piece::Call(_) | Piece::Halt => 5,
        Piece::Jcc(..) => 6,
        Piece::AddrOf(dst, _) => Instruction::new(
            0,
            Op::Lea {
                dst: *dst,
                mem: MemOperand::RipRelative { disp: 0 },
            },
        )?
        .len() as u64,
        Piece::Bytes(b) => b.len() as u64,
    })
}

struct Laid {
    code: Vec<u8>,
    addrs: Vec<u64>,
    labels: BTreeMap<String, u64>,
    cfi_labels: Vec<u64>,
}

fn lay_out(units: &[Unit], data_labels: &BTreeMap<String, u64>) -> Result<Laid, AssembleError> {
    let mut addrs = Vec::with_capacity(units.len());
    let mut labels = BTreeMap::new();
    let mut at = 0u64;
    for u in units {
        addrs.push(at);
        for l in &u.labels {
            labels.insert(l.clone(), at);
        }
        at += piece_len(&u.piece)?;
    }
    let d_off = data_offset(at);
    let mut code = Vec::with_capacity(at as usize);
    let mut cfi_labels = Vec::new();
    for (u, &a) in units.iter().zip(&addrs) {
        let resolve = |l: &str| -> i64 {
            match labels.get(l) {
                Some(&t) => t as i64,
                None => (d_off + data_labels[l]) as i64,
            }
        };
        let op = match &u.piece {
            Piece::Op(op) => op.clone(),
            Piece::Jmp(l) => Op::Jmp {
                target: resolve(l),
                short: false,
            },
            Piece::Jcc(cond, l) => Op::Jcc {
                cond: *cond,
                target: resolve(l),
            },
            Piece::Call(l) => Op::Call { target: resolve(l) },
            Piece::Halt => Op::Jmp {
                target: a as i64,
                short: false,
            },
            Piece::AddrOf(dst, l) => {
                let next = a as i64 + piece_len(&u.piece)? as i64;
                let disp = i32::try_from(resolve(l) - next).map_err(|_| {
                    EncodeError::UnencodableForm(format!("label `{}` out of rip range", l))
                })?;
                Op::Lea {
                    dst: *dst,
                    mem: MemOperand::RipRelative { disp },
                }
            }
            Piece::Bytes(b) => {
                code.extend_from_slice(b);
                continue;
            }
        };
        if matches!(op, Op::CfiLabel { .. }) {
            cfi_labels.push(a);
        }
        code.extend(Instruction::new(a, op)?.raw);
    }
    Ok(Laid {
        code,
        addrs,
        labels,
        cfi_labels,
    })
}

fn contains_magic(bytes: &[u8]) -> bool {
    bytes.windows(4).any(|w| w == MAGIC)
}

/// `mov dst, imm - k; lea dst, [dst + k]`, which leaves flags untouched.
fn split_immediate(dst: Reg, imm: i64) -> Option<(Op, Op)> {
    if dst == Reg::Rsp {
        return None;
    }
    (1..=64).find_map(|i| {
        let k: i32 = 0x0101 * i;
        let mov = Op::MovImm {
            dst,
            imm: imm.wrapping_sub(k as i64),
        };
        let lea = Op::Lea {
            dst,
            mem: MemOperand::base(dst, k),
        };
        let mut bytes = Instruction::new(0, mov.clone()).ok()?.raw;
        bytes.extend(Instruction::new(0, lea.clone()).ok()?.raw);
        (!contains_magic(&bytes)).then_some((mov, lea))
    })
}

const MAGIC_ATTEMPTS: usize = 64;
const PAD_WINDOW: usize = 48;

fn stray_magic(laid: &Laid) -> Vec<u64> {
    let placed: BTreeSet<u64> = laid.cfi_labels.iter().copied().collect();
    scan_cfi_labels(&laid.code)
        .into_iter()
        .filter(|o| !placed.contains(o))
        .collect()
}

/// Rewrites units until MAGIC appears only at placed cfi_labels.
fn remove_stray_magic(
    units: &mut Vec<Unit>,
    data_labels: &BTreeMap<String, u64>,
) -> Result<(Laid, usize), AssembleError> {
    let mut rewrites = 0;
    loop {
        let laid = lay_out(units, data_labels)?;
        let stray = stray_magic(&laid);
        let Some(&offset) = stray.first() else {
            return Ok((laid, rewrites));
        };
        if rewrites >= MAGIC_ATTEMPTS {
            return Err(AssembleError::MagicCollisionUnresolvable { offset });
        }
        rewrites += 1;
        let idx = laid.addrs.partition_point(|&a| a <= offset) - 1;
        let unit_end = laid.addrs.get(idx + 1).copied().unwrap_or(laid.code.len() as u64);

        // An immediate that carries the whole pattern is materialized in two
        // steps.
        if let Piece::Op(Op::MovImm { dst, imm }) = units[idx].piece {
            if offset + 4 <= unit_end {
                let Some((mov, lea)) = split_immediate(dst, imm) else {
                    return Err(AssembleError::MagicCollisionUnresolvable { offset });
                };
                units[idx].piece = Piece::Op(mov);
                let follow = Unit {
                    origin: units[idx].origin,
                    labels: Vec::new(),
                    piece: Piece::Op(lea),
                    attached: true,
                };
                units.insert(idx + 1, follow);
                continue;
            }
        }

        // Otherwise shift code with a one-byte nop: this breaks patterns that
        // straddle instructions and changes relative displacements.
        let lo = idx.saturating_sub(PAD_WINDOW);
        let hi = (idx + PAD_WINDOW).min(units.len());
        let mut fixed = false;
        for pos in (lo..=idx).rev().chain(idx + 1..hi) {
            if pos == 0 || units[pos].attached || binds_next(&units[pos - 1].piece) {
                continue;
            }
            // Labels stay with the unit they name, after the padding.
            let mut trial = units.clone();
            trial.insert(
                pos,
                Unit {
                    origin: None,
                    labels: Vec::new(),
                    piece: Piece::Op(Op::Nop),
                    attached: false,
                },
            );
            let t = lay_out(&trial, data_labels)?;
            if stray_magic(&t).len() < stray.len() {
                *units = trial;
                fixed = true;
                break;
            }
        }
        if !fixed {
            return Err(AssembleError::MagicCollisionUnresolvable { offset });
        }
    }
}

pub fn assemble(p: &SasmProgram, opts: InstrumentOptions) -> Result<Assembled, AssembleError> {
    assemble_with(p, opts, AssembleMode::Instrumented)
}

pub fn assemble_with(
    p: &SasmProgram,
    opts: InstrumentOptions,
    mode: AssembleMode,
) -> Result<Assembled, AssembleError> {
    // Data is laid out first: its offsets do not depend on code.
    let mut data = Vec::new();
    let mut data_labels = BTreeMap::new();
    for blob in &p.data {
        while data.len() % 8 != 0 {
            data.push(0);
        }
        data_labels.insert(blob.name.clone(), data.len() as u64);
        data.extend_from_slice(&blob.bytes);
    }
    let data_need = data.len() as u64 + opts.stack_reserve;
    if data_need > opts.d_capacity {
        return Err(AssembleError::ImageTooLarge {
            section: "data and stack",
            size: data_need,
            capacity: opts.d_capacity,
        });
    }

    // Entry function first so that the image entry is its first byte.
    let mut order: Vec<usize> = (0..p.functions.len()).collect();
    let entry_fn = p
        .functions
        .iter()
        .position(|f| f.name == p.entry)
        .ok_or_else(|| AssembleError::NoEntry(p.entry.clone()))?;
    order.retain(|&i| i != entry_fn);
    order.insert(0, entry_fn);

    let mut units: Vec<Unit> = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    let mut falls_through = false;
    for &fi in &order {
        let f = &p.functions[fi];
        pending.push(f.name.clone());
        for (ii, item) in f.body.iter().enumerate() {
            if let Item::Label(l) = item {
                pending.push(l.clone());
                continue;
            }
            for (k, piece) in expand(item).into_iter().enumerate() {
                let attached = k > 0;
                units.push(Unit {
                    origin: Some((fi, ii)),
                    labels: std::mem::take(&mut pending),
                    piece,
                    attached,
                });
            }
            falls_through = item.falls_through();
        }
    }
    // Close code that could run off its end; also gives trailing labels a
    // home.
    if falls_through || !pending.is_empty() || units.is_empty() {
        units.push(Unit {
            origin: None,
            labels: std::mem::take(&mut pending),
            piece: Piece::Halt,
            attached: false,
        });
    }

    let (laid, magic_rewrites) = match mode {
        AssembleMode::Instrumented => remove_stray_magic(&mut units, &data_labels)?,
        _ => (lay_out(&units, &data_labels)?, 0),
    };

    let code_len = laid.code.len() as u64;
    if code_len + TRAMPOLINE_LEN > opts.c_capacity {
        return Err(AssembleError::ImageTooLarge {
            section: "code",
            size: code_len + TRAMPOLINE_LEN,
            capacity: opts.c_capacity,
        });
    }

    let mut item_offsets: Vec<Vec<u64>> = p
        .functions
        .iter()
        .map(|f| vec![u64::MAX; f.body.len()])
        .collect();
    for (u, &a) in units.iter().zip(&laid.addrs) {
        if let Some((fi, ii)) = u.origin {
            let slot = &mut item_offsets[fi][ii];
            *slot = (*slot).min(a);
        }
    }
    // Labels take the offset of whatever follows them.
    for (fi, f) in p.functions.iter().enumerate() {
        let mut next = code_len;
        for ii in (0..f.body.len()).rev() {
            if let Item::Label(l) = &f.body[ii] {
                item_offsets[fi][ii] = laid.labels.get(l).copied().unwrap_or(next);
            } else if item_offsets[fi][ii] == u64::MAX {
                item_offsets[fi][ii] = next;
            }
            next = item_offsets[fi][ii];
        }
    }

    let entry = laid.labels[&p.entry];
    let image = SipbImage::new(
        laid.code,
        data,
        entry as u32,
        opts.d_capacity,
        opts.stack_reserve,
    );
    Ok(Assembled {
        image,
        labels: laid.labels,
        data_labels,
        item_offsets,
        cfi_labels: laid.cfi_labels,
        magic_rewrites,
    })
}
