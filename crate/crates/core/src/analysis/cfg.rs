use std::collections::BTreeMap;

use super::ReachableSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    Fallthrough,
    Direct,
    /// From the virtual root to a cfi_label.
    Entry,
}

/// Control-flow graph over instruction addresses.
///
/// Register-based indirect transfers have no explicit successors: their only
/// possible targets are cfi_labels, which the virtual root already reaches.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cfg {
    pub nodes: Vec<u64>,
    pub succs: BTreeMap<u64, Vec<(u64, EdgeKind)>>,
    pub preds: BTreeMap<u64, Vec<(u64, EdgeKind)>>,
    /// Successors of the virtual root.
    pub roots: Vec<u64>,
}

impl Cfg {
    pub fn successors(&self, n: u64) -> &[(u64, EdgeKind)] {
        self.succs.get(&n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn predecessors(&self, n: u64) -> &[(u64, EdgeKind)] {
        self.preds.get(&n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edge_count(&self) -> usize {
        self.succs.values().map(Vec::len).sum::<usize>() + self.roots.len()
    }
}

pub fn build_cfg(r: &ReachableSet) -> Cfg {
    let mut cfg = Cfg {
        nodes: r.instrs.keys().copied().collect(),
        ..Cfg::default()
    };
    for n in &cfg.nodes {
        cfg.succs.insert(*n, Vec::new());
        cfg.preds.insert(*n, Vec::new());
    }
    let add = |cfg: &mut Cfg, from: u64, to: u64, kind: EdgeKind| {
        if !r.contains(to) {
            return;
        }
        let list = cfg.succs.get_mut(&from).unwrap();
        if list.contains(&(to, kind)) {
            return;
        }
        list.push((to, kind));
        cfg.preds.get_mut(&to).unwrap().push((from, kind));
    };
    for instr in r.instrs.values() {
        if !instr.op.is_unconditional_transfer() {
            add(&mut cfg, instr.address, instr.end(), EdgeKind::Fallthrough);
        }
        if let Some(t) = instr.op.direct_target() {
            if t >= 0 {
                add(&mut cfg, instr.address, t as u64, EdgeKind::Direct);
            }
        }
    }
    cfg.roots = r
        .instrs
        .values()
        .filter(|i| matches!(i.op, crate::isa::Op::CfiLabel { .. }))
        .map(|i| i.address)
        .collect();
    cfg
}
