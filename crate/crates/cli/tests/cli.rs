use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmdsfi"))
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("mmdsfi-cli-{}-{}", name, std::process::id()));
    fs::create_dir_all(&d).unwrap();
    d
}

fn exec(cmd: &mut Command) -> (i32, String, String) {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().unwrap();
    (
        status.code().unwrap(),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

fn build(dir: &Path, rel: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(Path::new(rel).file_stem().unwrap()).with_extension("sipb");
    let (code, _, err) = exec(
        bin()
            .arg("instrument")
            .arg(corpus().join(rel))
            .arg("-o")
            .arg(&out)
            .args(extra),
    );
    assert_eq!(code, 0, "{err}");
    out
}

#[test]
fn instrument_verify_run_hello() {
    let d = scratch("hello");
    let img = build(&d, "benign/hello.sasm", &[]);
    let (code, out, _) = exec(bin().arg("verify").arg(&img));
    assert_eq!(code, 0);
    assert!(out.starts_with("accepted"));

    let (code, out, _) = exec(bin().arg("verify").arg(&img).arg("--json"));
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["accepted"], true);
    assert!(v["violations"].as_array().unwrap().is_empty());
    assert!(v["stats"]["cfi_label_count"].as_u64().unwrap() >= 1);

    let (code, out, err) = exec(bin().arg("run").arg(&img).arg("--counters").arg("--trace"));
    assert_eq!(code, 0);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("hello, world"));
    let counters: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(counters["total"]["syscalls"], 2);
    assert!(err.lines().next().unwrap().starts_with("pc=0x"));
}

#[test]
fn rejected_and_malformed_exit_codes() {
    let d = scratch("codes");
    let bad = d.join("bad.sipb");
    let (code, _, _) = exec(
        bin()
            .arg("instrument")
            .arg("--raw")
            .arg(corpus().join("adversarial/reachable_ret.sasm"))
            .arg("-o")
            .arg(&bad),
    );
    assert_eq!(code, 0);
    let (code, out, _) = exec(bin().arg("verify").arg(&bad));
    assert_eq!(code, 1);
    assert!(out.contains("E_CT_RET"));
    // The loader re-verifies, so run refuses it too.
    let (code, _, err) = exec(bin().arg("run").arg(&bad));
    assert_eq!(code, 1);
    assert!(err.contains("E_CT_RET"));

    let junk = d.join("junk.sipb");
    fs::write(&junk, b"not an image").unwrap();
    for sub in ["verify", "disasm", "run", "monitor"] {
        let (code, _, _) = exec(bin().arg(sub).arg(&junk));
        assert_eq!(code, 2, "{sub}");
    }
    let src = d.join("bad.sasm");
    fs::write(&src, "func main:\n frobnicate rax\n").unwrap();
    let (code, _, _) = exec(bin().arg("instrument").arg(&src).arg("-o").arg(d.join("x")));
    assert_eq!(code, 2);
}

#[test]
fn disasm_groups_pseudo_instructions() {
    let d = scratch("disasm");
    let img = build(&d, "benign/exit_zero.sasm", &[]);
    let (code, out, _) = exec(bin().arg("disasm").arg(&img));
    assert_eq!(code, 0);
    assert!(out.lines().next().unwrap().contains("; cfi_label<id=0>"));
    assert!(out.contains("; cfi_guard r14"));

    let ov = d.join("ov.sipb");
    exec(
        bin()
            .arg("instrument")
            .arg("--raw")
            .arg(corpus().join("adversarial/overlapping_decode.sasm"))
            .arg("-o")
            .arg(&ov),
    );
    let (code, out, _) = exec(bin().arg("disasm").arg(&ov));
    assert_eq!(code, 1);
    assert!(out.contains("AbortOverlap at 0x1d"));
    assert!(out.contains("partial R"));
    let (code, out, _) = exec(bin().arg("disasm").arg("--raw").arg(&ov));
    assert_eq!(code, 0);
    assert!(out.contains("mov rax, 0x9090909090909090"));
}

#[test]
fn optimizer_flag_changes_dynamic_guard_count() {
    let d = scratch("loop");
    let fast = build(&d, "benign/loop_store.sasm", &[]);
    let slow_dir = d.join("slow");
    fs::create_dir_all(&slow_dir).unwrap();
    let slow = build(&slow_dir, "benign/loop_store.sasm", &["--no-optimize"]);
    let guards = |img: &Path| {
        let (code, out, _) = exec(bin().arg("run").arg(img).arg("--counters"));
        assert_eq!(code, 0);
        let j: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
        j["total"]["mem_guard"].as_u64().unwrap()
    };
    assert!(guards(&fast) <= 2);
    assert!(guards(&slow) >= 1000);
}

#[test]
fn run_with_spawn_table_and_stdin() {
    let d = scratch("spawn");
    let parent = build(&d, "benign/pipeline.sasm", &[]);
    let child = build(&d, "benign/child_upper.sasm", &[]);
    let (code, out, _) = exec(bin().arg("run").arg(&parent).arg("--image").arg(&child));
    assert_eq!(code, 0);
    assert_eq!(out, "HELLO PIPE");

    let echo = build(&d, "benign/echo_stdin.sasm", &[]);
    let input = d.join("in.txt");
    fs::write(&input, "abc\n").unwrap();
    let (code, out, _) = exec(bin().arg("run").arg(&echo).arg("--stdin").arg(&input));
    assert_eq!(code, 0);
    assert_eq!(out, "abc\n");
}

#[test]
fn runs_are_deterministic_per_seed() {
    let d = scratch("seed");
    let parent = build(&d, "benign/two_children.sasm", &[]);
    let child = build(&d, "benign/child_exit7.sasm", &[]);
    let go = |seed: &str| {
        exec(
            bin()
                .arg("run")
                .arg(&parent)
                .arg("--image")
                .arg(&child)
                .arg("--trace")
                .arg("--seed")
                .arg(seed),
        )
    };
    assert_eq!(go("5"), go("5"));
    assert_eq!(go("5").0, 1); // exits 14, not 0
}

#[test]
fn monitor_with_verdict_and_fuzz() {
    let d = scratch("monitor");
    let img = build(&d, "benign/classify.sasm", &[]);
    let verdict = d.join("v.json");
    let (_, out, _) = exec(bin().arg("verify").arg(&img).arg("--json"));
    fs::write(&verdict, out).unwrap();
    let (code, out, _) = exec(
        bin()
            .arg("monitor")
            .arg(&img)
            .arg("--fuzz")
            .arg("40")
            .arg("--verdict")
            .arg(&verdict),
    );
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.trim(), "runs=41 violations=0");

    // An unchecked indirect jump that lands past a label.
    let src = d.join("jump.sasm");
    fs::write(&src, "func main:\n cfi_label\n mov r8, &x\n jmp r8\nx:\n mov rax, 0\n mov rdi, 0\n syscall\n").unwrap();
    let bad = d.join("jump.sipb");
    exec(bin().arg("instrument").arg("--raw").arg(&src).arg("-o").arg(&bad));
    let (code, out, _) = exec(bin().arg("monitor").arg(&bad));
    assert_eq!(code, 1);
    assert!(out.contains("IndirectNotLabel"), "{out}");
}

#[test]
fn corpus_runs_and_filters() {
    let (code, out, _) = exec(bin().arg("corpus"));
    assert_eq!(code, 0, "{out}");
    assert!(!out.contains("FAIL"));

    let (code, out, _) = exec(bin().arg("corpus").arg("--filter").arg("attack"));
    assert_eq!(code, 0);
    let rows: Vec<_> = out.lines().filter(|l| l.starts_with("PASS")).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|l| l.contains(" attack ")));
}

#[test]
fn corpus_reports_mismatch() {
    let d = scratch("mismatch");
    fs::write(d.join("noret.sasm"), "func main:\n cfi_label\n jmp main\n").unwrap();
    fs::write(
        d.join("manifest.jsonl"),
        r#"{"name":"no_ret","kind":"adversarial","expected":"E_CT_RET","source_path":"noret.sasm","inputs":[],"mode":"raw"}"#,
    )
    .unwrap();
    let (code, out, _) = exec(bin().arg("corpus").arg("--dir").arg(&d));
    assert_eq!(code, 1);
    assert!(out.contains("FAIL"));
    assert!(out.contains("observed=accept"));
}
