use std::collections::{BTreeMap, BTreeSet};

use super::{Violation, ViolationCode};
use crate::analysis::ReachableSet;
use crate::image::SipbImage;
use crate::isa::{decode, scan_cfi_labels, Instruction, Op};

/// Complete disassembly: follows fallthrough and direct edges from every
/// MAGIC occurrence and aborts on anything it cannot account for.
pub fn stage1_disassemble(img: &SipbImage) -> Result<ReachableSet, Violation> {
    let mut r = BTreeMap::new();
    sweep(img, &mut r)?;
    let labels = scan_cfi_labels(&img.code);
    let entry_labels = labels
        .into_iter()
        .filter(|o| matches!(r.get(o).map(|i: &Instruction| &i.op), Some(Op::CfiLabel { .. })))
        .collect();
    Ok(ReachableSet::new(r, entry_labels))
}

/// Stage 1 that keeps whatever it decoded before an abort.
pub fn stage1_partial(img: &SipbImage) -> (BTreeMap<u64, Instruction>, Option<Violation>) {
    let mut r = BTreeMap::new();
    let abort = sweep(img, &mut r).err();
    (r, abort)
}

fn sweep(img: &SipbImage, r: &mut BTreeMap<u64, Instruction>) -> Result<(), Violation> {
    let code = &img.code;
    if !img.entry_is_label() {
        return Err(Violation::new(
            ViolationCode::AbortEntryNotLabel,
            img.entry as u64,
            "entry point is not a cfi_label",
        ));
    }
    let labels: BTreeSet<u64> = scan_cfi_labels(code).into_iter().collect();
    let mut worklist: BTreeSet<i64> = labels.iter().map(|&o| o as i64).collect();
    worklist.insert(img.entry as i64);

    while let Some(start) = worklist.pop_first() {
        let mut addr = start;
        loop {
            if addr < 0 || addr as usize >= code.len() {
                return Err(Violation::new(
                    ViolationCode::AbortOutOfRange,
                    addr.max(0) as u64,
                    format!("address {:#x} is outside the code region", addr),
                ));
            }
            let a = addr as u64;
            let instr = decode(code, addr as usize).map_err(|e| {
                Violation::new(ViolationCode::AbortInvalidInstruction, a, e.to_string())
            })?;
            if r.contains_key(&a) {
                break;
            }
            let before = r.range(..a).next_back().filter(|(_, p)| p.end() > a);
            let after = r.range(a..instr.end()).next();
            if let Some((&other, _)) = before.or(after) {
                return Err(Violation::new(
                    ViolationCode::AbortOverlap,
                    a,
                    format!(
                        "instruction at {:#x} (len {}) overlaps instruction at {:#x}",
                        a,
                        instr.len(),
                        other
                    ),
                ));
            }
            let unconditional = instr.op.is_unconditional_transfer();
            if let Some(t) = instr.op.direct_target() {
                worklist.insert(t);
            }
            let next = instr.end() as i64;
            r.insert(a, instr);
            if unconditional {
                break;
            }
            addr = next;
        }
    }
    Ok(())
}
