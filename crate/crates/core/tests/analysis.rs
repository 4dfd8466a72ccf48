use std::collections::BTreeMap;

use mmdsfi::analysis::{
    build_cfg, range_analysis, range_analysis_ordered, transfer, AnalysisOptions, EdgeKind,
    RangeFact, RegRange, ReachableSet, TransferContext,
};
use mmdsfi::image::SipbImage;
use mmdsfi::instrumenter::{assemble_raw, InstrumentOptions};
use mmdsfi::isa::{Op, Reg};
use mmdsfi::verifier::stage1_disassemble;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn raw(src: &str) -> SipbImage {
    assemble_raw(src, InstrumentOptions::default()).unwrap().image
}

fn reachable(src: &str) -> ReachableSet {
    stage1_disassemble(&raw(src)).unwrap()
}

fn addr_of(r: &ReachableSet, pred: impl Fn(&Op) -> bool) -> u64 {
    *r.instrs.iter().find(|(_, i)| pred(&i.op)).unwrap().0
}

#[test]
fn straight_line_is_a_fallthrough_chain() {
    let r = reachable("func main:\n cfi_label\n mov rax, 1\n mov rdi, 0\n add rax, 2\n jmp main\n");
    let cfg = build_cfg(&r);
    let nodes = &cfg.nodes;
    assert_eq!(nodes.len(), 5);
    for w in nodes.windows(2).take(3) {
        assert_eq!(cfg.successors(w[0]), &[(w[1], EdgeKind::Fallthrough)]);
    }
    // The closing jmp has only its direct edge.
    assert_eq!(cfg.successors(nodes[4]), &[(0, EdgeKind::Direct)]);
    assert_eq!(cfg.roots, vec![0]);
}

#[test]
fn conditional_jump_has_two_edges() {
    let r = reachable("func main:\n cfi_label\n cmp rax, rbx\n je out\n add rax, 1\nout:\n jmp main\n");
    let cfg = build_cfg(&r);
    let je = addr_of(&r, |o| matches!(o, Op::Jcc { .. }));
    let succ = cfg.successors(je);
    assert_eq!(succ.len(), 2);
    assert!(succ.iter().any(|(_, k)| *k == EdgeKind::Fallthrough));
    assert!(succ.iter().any(|(_, k)| *k == EdgeKind::Direct));
}

#[test]
fn each_label_is_a_root() {
    let r = reachable("func main:\n cfi_label\n mov rax, 1\n cfi_label\n jmp main\n");
    let cfg = build_cfg(&r);
    assert_eq!(cfg.roots.len(), 2);
    // Three fallthroughs, the closing jmp, and one root edge per label.
    assert_eq!(cfg.edge_count(), 3 + 1 + 2);
}

#[test]
fn guard_then_store_sees_zero_deviation() {
    let r = reachable("func main:\n cfi_label\n mem_guard [r8]\n mov [r8+8], rax\n jmp main\n");
    let sol = range_analysis(&build_cfg(&r), &r, AnalysisOptions::default());
    let store = addr_of(&r, |o| matches!(o, Op::Store { .. }));
    assert_eq!(sol.facts[&store].get(Reg::R8), RegRange::dev(0, 0));
    assert!(sol.facts[&store].get(Reg::R8).admits(8));
}

#[test]
fn large_add_widens_to_top() {
    let r = reachable("func main:\n cfi_label\n mem_guard [r8]\n add r8, 5000\n nop\n jmp main\n");
    let sol = range_analysis(&build_cfg(&r), &r, AnalysisOptions::default());
    let nop = addr_of(&r, |o| *o == Op::Nop);
    assert_eq!(sol.facts[&nop].get(Reg::R8), RegRange::Top);
}

#[test]
fn merge_point_takes_the_hull() {
    let src = "func main:\n cfi_label\n mem_guard [r8]\n cmp rax, rbx\n je skip\n sub r8, 16\nskip:\n nop\n jmp main\n";
    let r = reachable(src);
    let sol = range_analysis(&build_cfg(&r), &r, AnalysisOptions::default());
    let nop = addr_of(&r, |o| *o == Op::Nop);
    assert_eq!(sol.facts[&nop].get(Reg::R8), RegRange::dev(-16, 0));
}

#[test]
fn labels_reset_every_register() {
    let r = reachable("func main:\n cfi_label\n mem_guard [r8]\n cfi_label\n nop\n jmp main\n");
    let sol = range_analysis(&build_cfg(&r), &r, AnalysisOptions::default());
    let nop = addr_of(&r, |o| *o == Op::Nop);
    assert_eq!(sol.facts[&nop], RangeFact::top());
}

// Independent oracle for the loop example: round-robin chaotic iteration over
// a hand-written four-node CFG, tracking r9 only. None is Top.
type Iv = Option<(i64, i64)>;

fn hull(a: Iv, b: Iv) -> Iv {
    let ((a0, a1), (b0, b1)) = (a?, b?);
    let (lo, hi) = (a0.min(b0), a1.max(b1));
    (lo >= -4096 && hi <= 4096).then_some((lo, hi))
}

fn chaotic_loop_fact(order_seed: u64) -> Iv {
    // 0: mem_guard [r9]   1: mov [r9], rax   2: add r9, 8   3: jne 1
    let preds: [&[usize]; 4] = [&[], &[0, 3], &[1], &[2]];
    let f = |n: usize, v: Iv| -> Iv {
        match n {
            0 | 1 => Some((0, 0)),
            2 => v.and_then(|(l, h)| {
                let (l, h) = (l + 8, h + 8);
                (l >= -4096 && h <= 4096).then_some((l, h))
            }),
            _ => v,
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    // `visited[n]` distinguishes bottom from Top.
    let mut input: [Iv; 4] = [None; 4];
    let mut visited = [false; 4];
    visited[0] = true;
    loop {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut rng);
        let mut changed = false;
        for n in order {
            if n == 0 {
                continue;
            }
            let mut acc: Option<Iv> = None;
            for &p in preds[n] {
                if visited[p] {
                    let out = f(p, input[p]);
                    acc = Some(match acc {
                        None => out,
                        Some(a) => hull(a, out),
                    });
                }
            }
            if let Some(v) = acc {
                if !visited[n] || input[n] != v {
                    visited[n] = true;
                    input[n] = v;
                    changed = true;
                }
            }
        }
        if !changed {
            return input[1];
        }
    }
}

const LOOP_SRC: &str = "func main:\n cfi_label\n mov rcx, 0\n mem_guard [r9]\nhead:\n mov [r9], rax\n add r9, 8\n add rcx, 1\n cmp rcx, rdx\n jne head\n jmp main\n";

#[test]
fn loop_fixpoint_matches_chaotic_oracle() {
    let oracle: Vec<Iv> = (0..32).map(chaotic_loop_fact).collect();
    assert!(oracle.iter().all(|v| *v == oracle[0]));
    // Frozen oracle result.
    assert_eq!(oracle[0], Some((0, 8)));

    let r = reachable(LOOP_SRC);
    let cfg = build_cfg(&r);
    let store = addr_of(&r, |o| matches!(o, Op::Store { .. }));
    let expected = RegRange::dev(0, 8);
    let base = range_analysis(&cfg, &r, AnalysisOptions::default());
    assert_eq!(base.facts[&store].get(Reg::R9), expected);
    for seed in 1..=25 {
        let sol = range_analysis_ordered(&cfg, &r, AnalysisOptions::default(), Some(seed));
        assert_eq!(sol.facts, base.facts, "seed {seed}");
    }
}

// Random straight-line and looping programs over a handful of registers.
fn instr_strategy(n_labels: usize) -> impl Strategy<Value = String> {
    let reg = prop::sample::select(vec!["r8", "r9", "rbx", "rcx"]);
    let disp = prop_oneof![Just(0i32), -64i32..64, Just(4096), Just(-4096), Just(4100)];
    prop_oneof![
        (reg.clone(), -5000i32..5000).prop_map(|(r, k)| format!("add {r}, {k}")),
        (reg.clone(), 0i32..300).prop_map(|(r, k)| format!("sub {r}, {k}")),
        (reg.clone(), reg.clone()).prop_map(|(a, b)| format!("mov {a}, {b}")),
        (reg.clone(), reg.clone(), disp.clone())
            .prop_map(|(a, b, d)| format!("lea {a}, [{b}+{d}]")),
        (reg.clone(), disp.clone()).prop_map(|(r, d)| format!("mov [{r}+{d}], rax")),
        (reg.clone(), disp.clone()).prop_map(|(r, d)| format!("mov rax, [{r}+{d}]")),
        (reg.clone(), disp).prop_map(|(r, d)| format!("mem_guard [{r}+{d}]")),
        (0..n_labels).prop_map(|l| format!("jne L{l}")),
        Just("cmp rax, rbx".to_string()),
        reg.prop_map(|r| format!("mov {r}, 77")),
        Just("cfi_label".to_string()),
    ]
}

fn program_strategy() -> impl Strategy<Value = String> {
    (2usize..14).prop_flat_map(|n| {
        prop::collection::vec(instr_strategy(n), n).prop_map(|body| {
            let mut s = String::from("func main:\n cfi_label\n");
            for (i, line) in body.iter().enumerate() {
                s.push_str(&format!("L{i}: {line}\n"));
            }
            s.push_str(" jmp main\n");
            s
        })
    })
}

fn range_strategy() -> impl Strategy<Value = RegRange> {
    prop_oneof![
        Just(RegRange::Top),
        (-4096i64..=4096, 0i64..200).prop_map(|(lo, w)| RegRange::dev(lo, (lo + w).min(4096))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixpoint_is_order_independent(src in program_strategy(), seeds in prop::collection::vec(any::<u64>(), 4)) {
        let r = reachable(&src);
        let cfg = build_cfg(&r);
        let base = range_analysis(&cfg, &r, AnalysisOptions::default());
        for s in seeds {
            let other = range_analysis_ordered(&cfg, &r, AnalysisOptions::default(), Some(s));
            prop_assert_eq!(&other.facts, &base.facts);
        }
    }

    #[test]
    fn iterations_are_bounded(src in program_strategy()) {
        let r = reachable(&src);
        let cfg = build_cfg(&r);
        let sol = range_analysis(&cfg, &r, AnalysisOptions::default());
        // Each register's value can only rise through Dev intervals of
        // [-4096, 4096] and then Top: at most 2 * 8193 + 1 raises.
        let height = 2 * 8193 + 1;
        prop_assert!(sol.iterations <= cfg.nodes.len() * 16 * height);
        // In practice the solver needs far fewer visits.
        prop_assert!(sol.iterations <= cfg.nodes.len() * 64);
    }

    #[test]
    fn fixpoint_is_stable(src in program_strategy()) {
        let r = reachable(&src);
        let cfg = build_cfg(&r);
        let sol = range_analysis(&cfg, &r, AnalysisOptions::default());
        for (n, instr) in &r.instrs {
            let Some(before) = sol.facts.get(n) else { continue };
            let out = transfer(instr, before, TransferContext::of(&r, *n), AnalysisOptions::default());
            for (s, _) in cfg.successors(*n) {
                prop_assert!(out.leq(&sol.facts[s]));
            }
        }
        for root in &cfg.roots {
            prop_assert_eq!(sol.facts[root], RangeFact::top());
        }
    }

    #[test]
    fn transfer_is_monotone(
        src in program_strategy(),
        lows in prop::collection::vec(range_strategy(), 16),
        widen in prop::collection::vec((0i64..50, 0i64..50, any::<bool>()), 16),
    ) {
        let r = reachable(&src);
        let mut a = RangeFact::top();
        let mut b = RangeFact::top();
        for (i, reg) in Reg::ALL.iter().enumerate() {
            let lo = lows[i];
            let (dl, dh, top) = widen[i];
            let hi = match lo {
                RegRange::Top => RegRange::Top,
                _ if top => RegRange::Top,
                RegRange::Dev { lo: l, hi: h } => {
                    let (l2, h2) = (l - dl, h + dh);
                    if l2 < -4096 || h2 > 4096 { RegRange::Top } else { RegRange::dev(l2, h2) }
                }
            };
            a.set(*reg, lo);
            b.set(*reg, hi);
        }
        prop_assert!(a.leq(&b));
        for (n, instr) in &r.instrs {
            let ctx = TransferContext::of(&r, *n);
            let ta = transfer(instr, &a, ctx, AnalysisOptions::default());
            let tb = transfer(instr, &b, ctx, AnalysisOptions::default());
            prop_assert!(ta.leq(&tb), "{:?}", instr.op);
        }
    }

    #[test]
    fn join_is_lub(a in range_strategy(), b in range_strategy()) {
        let j = a.join(b);
        prop_assert!(a.leq(j) && b.leq(j));
        prop_assert_eq!(j, b.join(a));
        prop_assert_eq!(a.join(a), a);
    }
}

#[test]
fn loads_confine_only_when_enabled() {
    let r = reachable("func main:\n cfi_label\n mov rax, [r8+16]\n nop\n jmp main\n");
    let cfg = build_cfg(&r);
    let nop = addr_of(&r, |o| *o == Op::Nop);
    let on = range_analysis(&cfg, &r, AnalysisOptions { confine_loads: true });
    let off = range_analysis(&cfg, &r, AnalysisOptions { confine_loads: false });
    assert_eq!(on.facts[&nop].get(Reg::R8), RegRange::dev(-16, -16));
    assert_eq!(off.facts[&nop].get(Reg::R8), RegRange::Top);
    let _: BTreeMap<u64, RangeFact> = on.facts;
}
