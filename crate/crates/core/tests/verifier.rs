use mmdsfi::corpus::{CaseKind, Corpus, Expectation};
use mmdsfi::image::{read_image, write_image, SipbImage};
use mmdsfi::instrumenter::{assemble_raw, instrument, InstrumentOptions};
use mmdsfi::verifier::{verify, verify_with, ViolationCode, VerifyOptions};
use proptest::prelude::*;

fn raw(src: &str) -> SipbImage {
    assemble_raw(src, InstrumentOptions::default()).unwrap().image
}

#[test]
fn adversarial_corpus_yields_exact_codes() {
    let corpus = Corpus::load_default().unwrap();
    let mut codes_seen = std::collections::BTreeSet::new();
    for case in corpus.of_kind(CaseKind::Adversarial) {
        let img = &case.build(InstrumentOptions::default()).unwrap()[0];
        let v = verify(img);
        let Expectation::Reject(want) = &case.expectation else {
            panic!("{}: adversarial case must expect a rejection", case.name());
        };
        assert!(!v.accepted, "{}", case.name());
        assert_eq!(&v.codes(), want, "{}", case.name());
        codes_seen.extend(v.codes());
    }
    // E_CT_TARGET needs a direct target outside R, which Stage 1 never
    // produces; it is covered by a unit test.
    assert_eq!(codes_seen.len(), 17);
    assert!(!codes_seen.contains(&ViolationCode::CtTarget));
}

#[test]
fn stages_short_circuit() {
    // A dangerous instruction and an unguarded store: only stage 2 reports.
    let img = raw("func main:\n cfi_label\n mov [r8], rax\n .byte 0x0F, 0x01, 0xD7\n jmp main\n");
    let v = verify(&img);
    assert_eq!(v.codes(), vec![ViolationCode::Sgx]);
    // A bad transfer and an unguarded store: only stage 3 reports.
    let img = raw("func main:\n cfi_label\n mov [r8], rax\n ret\n");
    assert_eq!(verify(&img).codes(), vec![ViolationCode::CtRet]);
}

#[test]
fn guarded_rsp_adjustment_is_accepted() {
    let img = raw("func main:\n cfi_label\n sub rsp, 4096\n mem_guard [rsp]\n push rax\n jmp main\n");
    assert!(verify(&img).accepted);
    let img = raw("func main:\n cfi_label\n sub rsp, 8192\n mem_guard [rsp]\n jmp main\n");
    assert_eq!(verify(&img).codes(), vec![ViolationCode::MemRsp]);
}

#[test]
fn unguarded_loads_pass_without_confinement() {
    let img = raw("func main:\n cfi_label\n mov rax, [r8]\n jmp main\n");
    assert!(!verify(&img).accepted);
    assert!(verify_with(&img, VerifyOptions { confine_loads: false }).accepted);
}

#[test]
fn benign_corpus_verifies_with_and_without_optimizer() {
    let corpus = Corpus::load_default().unwrap();
    for case in corpus.of_kind(CaseKind::Benign) {
        for optimize in [false, true] {
            let opts = InstrumentOptions {
                optimize,
                ..InstrumentOptions::default()
            };
            for img in case.build(opts).unwrap() {
                let v = verify(&img);
                assert!(v.accepted, "{} optimize={}: {:?}", case.name(), optimize, v.violations);
            }
        }
    }
}

#[test]
fn hoisting_removes_static_guards() {
    let corpus = Corpus::load_default().unwrap();
    let src = &corpus.get("struct_write8").unwrap().sources[0];
    let count = |optimize| {
        let opts = InstrumentOptions {
            optimize,
            ..InstrumentOptions::default()
        };
        let i = instrument(src, opts).unwrap();
        assert!(verify(i.image()).accepted);
        verify(i.image()).stats.guard_count
    };
    assert_eq!(count(false), 8);
    assert_eq!(count(true), 1);
}

#[test]
fn verdict_survives_serialization() {
    let corpus = Corpus::load_default().unwrap();
    for case in &corpus.cases {
        let img = &case.build(InstrumentOptions::default()).unwrap()[0];
        let Ok(bytes) = write_image(img) else {
            assert_eq!(verify(img).codes(), vec![ViolationCode::AbortEntryNotLabel]);
            continue;
        };
        let back = read_image(&bytes).unwrap();
        assert_eq!(verify(&back), verify(img), "{}", case.name());
    }
}

// Random SASM programs: arithmetic, memory through arbitrary registers,
// direct and indirect calls, jumps and system calls.
fn line_strategy(n_labels: usize) -> impl Strategy<Value = String> {
    let reg = prop::sample::select(vec!["rax", "rbx", "rcx", "rdx", "r8", "r9", "r12"]);
    let disp = prop_oneof![Just(0i32), -256i32..256, Just(4088), Just(-4096)];
    prop_oneof![
        (reg.clone(), any::<i32>()).prop_map(|(r, k)| format!("mov {r}, {k}")),
        (reg.clone(), -5000i32..5000).prop_map(|(r, k)| format!("add {r}, {k}")),
        (reg.clone(), reg.clone()).prop_map(|(a, b)| format!("mov {a}, {b}")),
        (reg.clone(), reg.clone(), disp.clone())
            .prop_map(|(a, b, d)| format!("lea {a}, [{b}+{d}]")),
        (reg.clone(), reg.clone(), disp.clone())
            .prop_map(|(a, b, d)| format!("mov [{a}+{d}], {b}")),
        (reg.clone(), reg.clone(), disp.clone())
            .prop_map(|(a, b, d)| format!("mov {b}, [{a}+{d}]")),
        (reg.clone(), reg.clone()).prop_map(|(a, b)| format!("mov [{a}+{b}*8], rax")),
        (reg.clone(), disp).prop_map(|(r, d)| format!("mov [rsp+{d}], {r}")),
        reg.clone().prop_map(|r| format!("push {r}")),
        reg.clone().prop_map(|r| format!("pop {r}")),
        (0i64..4096).prop_map(|k| format!("sub rsp, {k}")),
        (0i64..4096).prop_map(|k| format!("add rsp, {k}")),
        (reg.clone(), reg.clone()).prop_map(|(a, b)| format!("cmp {a}, {b}")),
        (0..n_labels).prop_map(|l| format!("jne L{l}")),
        (0..n_labels).prop_map(|l| format!("jmp L{l}")),
        Just("call helper".to_string()),
        reg.clone().prop_map(|r| format!("mov {r}, &helper\n call {r}")),
        reg.clone().prop_map(|r| format!("mov {r}, &L0\n jmp {r}")),
        Just("mov rax, 4\n syscall".to_string()),
        Just("mov r8, &buf\n jmp [r8]".to_string()),
    ]
}

fn sasm_strategy() -> impl Strategy<Value = String> {
    (1usize..5, 1usize..20).prop_flat_map(|(labels, n)| {
        prop::collection::vec(line_strategy(labels), n * labels).prop_map(move |lines| {
            let mut s = String::from(".data buf: zero 64\nfunc main:\n");
            let mut defined = 0;
            for chunk in lines.chunks(n) {
                s.push_str(&format!("L{defined}:\n"));
                defined += 1;
                for l in chunk {
                    s.push_str(&format!(" {l}\n"));
                }
            }
            for i in defined..labels {
                s.push_str(&format!("L{i}:\n"));
            }
            s.push_str(" mov rax, 0\n syscall\nfunc helper:\n mov [rsp+8], rax\n ret\n");
            s
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn instrumented_programs_are_accepted(src in sasm_strategy(), optimize in any::<bool>(), confine in any::<bool>()) {
        let opts = InstrumentOptions { optimize, confine_loads: confine, ..InstrumentOptions::default() };
        let inst = instrument(&src, opts).unwrap();
        let v = verify_with(inst.image(), VerifyOptions { confine_loads: confine });
        prop_assert!(v.accepted, "{}\n{:?}", src, v.violations);
    }

    #[test]
    fn random_bytes_never_panic(code in prop::collection::vec(any::<u8>(), 0..256), entry in 0u32..64) {
        let img = SipbImage::new(code, Vec::new(), entry, 65536, 16384);
        let a = verify(&img);
        let b = verify(&img);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn labelled_random_bytes_never_panic(tail in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut code = vec![0x0F, 0x1F, 0x84, 0x24, 0, 0, 0, 0];
        code.extend(tail);
        let img = SipbImage::new(code, Vec::new(), 0, 65536, 16384);
        let v = verify(&img);
        prop_assert_eq!(v.accepted, v.violations.is_empty());
    }
}
