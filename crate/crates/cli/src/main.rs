use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmdsfi::analysis::ReachableSet;
use mmdsfi::corpus::{run_case, Corpus};
use mmdsfi::image::{read_image, write_image, SipbImage};
use mmdsfi::instrumenter::{
    assemble_raw, instrument, InstrumentError, InstrumentOptions, DEFAULT_D_CAPACITY,
    DEFAULT_STACK_RESERVE,
};
use mmdsfi::isa::{decode, PseudoInstr};
use mmdsfi::runtime::{
    fuzz_inputs, run, ImageOracle, LoadError, Monitor, RuntimeOptions, SipStatus,
};
use mmdsfi::verifier::{stage1_partial, verify_with, Verdict, VerifyOptions};

const OK: u8 = 0;
const REJECTED: u8 = 1;
const MALFORMED: u8 = 2;

#[derive(Parser)]
#[command(name = "mmdsfi", version, about = "Multi-domain SFI toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Instrument a SASM program into a SIPB image.
    Instrument {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        no_confine_loads: bool,
        #[arg(long)]
        no_optimize: bool,
        #[arg(long, default_value_t = DEFAULT_D_CAPACITY)]
        d_capacity: u64,
        #[arg(long, default_value_t = DEFAULT_STACK_RESERVE)]
        stack: u64,
        /// Assemble verbatim, without instrumentation.
        #[arg(long)]
        raw: bool,
        /// Write a JSON map from code labels to image offsets.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Statically verify an image.
    Verify {
        image: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(long, value_enum, default_value = "on")]
        confine_loads: OnOff,
    },
    /// List the reachable instructions of an image.
    Disasm {
        image: PathBuf,
        /// Linear sweep from offset 0 instead of complete disassembly.
        #[arg(long)]
        raw: bool,
    },
    /// Run an image in the sandbox.
    Run {
        image: PathBuf,
        /// Further images for the spawn table, in index order.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        counters: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File to use as stdin of the first SIP ("-" for this process's stdin).
        #[arg(long)]
        stdin: Option<PathBuf>,
        /// Skip load-time verification and the syscall label check.
        #[arg(long)]
        permissive: bool,
    },
    /// Run an image under the policy monitor.
    Monitor {
        image: PathBuf,
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Additional runs on seeded random stdin vectors.
        #[arg(long, default_value_t = 0)]
        fuzz: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// A verdict (from `verify --json`); enables the R and range-fact checks.
        #[arg(long)]
        verdict: Option<PathBuf>,
        #[arg(long)]
        stdin: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run the shipped (or a given) corpus against its manifest.
    Corpus {
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

/// A failure with its exit code.
struct Fail(u8, String);

type CmdResult = Result<u8, Fail>;

fn malformed(e: impl std::fmt::Display) -> Fail {
    Fail(MALFORMED, e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Instrument {
            input,
            output,
            no_confine_loads,
            no_optimize,
            d_capacity,
            stack,
            raw,
            map,
        } => {
            let opts = InstrumentOptions {
                confine_loads: !no_confine_loads,
                optimize: !no_optimize,
                d_capacity,
                stack_reserve: stack,
                ..InstrumentOptions::default()
            };
            cmd_instrument(&input, &output, opts, raw, map.as_deref())
        }
        Cmd::Verify {
            image,
            json,
            confine_loads,
        } => cmd_verify(&image, json, matches!(confine_loads, OnOff::On)),
        Cmd::Disasm { image, raw } => cmd_disasm(&image, raw),
        Cmd::Run {
            image,
            images,
            trace,
            counters,
            seed,
            stdin,
            permissive,
        } => {
            let base = if permissive {
                RuntimeOptions::permissive()
            } else {
                RuntimeOptions::enforcing()
            };
            let opts = RuntimeOptions { seed, trace, ..base };
            cmd_run(&image, &images, opts, counters, stdin.as_deref())
        }
        Cmd::Monitor {
            image,
            images,
            fuzz,
            seed,
            verdict,
            stdin,
            json,
        } => cmd_monitor(&image, &images, fuzz, seed, verdict.as_deref(), stdin.as_deref(), json),
        Cmd::Corpus { dir, filter, json } => cmd_corpus(dir, filter.as_deref(), json),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            eprintln!("mmdsfi: {}", msg);
            ExitCode::from(code)
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Fail> {
    fs::read(path).map_err(|e| malformed(format!("{}: {}", path.display(), e)))
}

fn load_image(path: &Path) -> Result<SipbImage, Fail> {
    read_image(&read_file(path)?).map_err(|e| malformed(format!("{}: {}", path.display(), e)))
}

fn load_images(main: &Path, extra: &[PathBuf]) -> Result<Vec<SipbImage>, Fail> {
    std::iter::once(main)
        .chain(extra.iter().map(PathBuf::as_path))
        .map(load_image)
        .collect()
}

fn read_stdin(path: Option<&Path>) -> Result<Vec<u8>, Fail> {
    match path {
        None => Ok(Vec::new()),
        Some(p) if p == Path::new("-") => {
            let mut buf = Vec::new();
            io::stdin().read_to_end(&mut buf).map_err(malformed)?;
            Ok(buf)
        }
        Some(p) => read_file(p),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Fail> {
    fs::write(path, bytes).map_err(|e| malformed(format!("{}: {}", path.display(), e)))
}

fn cmd_instrument(
    input: &Path,
    output: &Path,
    opts: InstrumentOptions,
    raw: bool,
    map: Option<&Path>,
) -> CmdResult {
    let text = String::from_utf8(read_file(input)?).map_err(malformed)?;
    let built = if raw {
        assemble_raw(&text, opts)
    } else {
        instrument(&text, opts).map(|i| i.assembled)
    };
    let assembled = built.map_err(|e| match e {
        InstrumentError::Parse(_) => malformed(e),
        e => Fail(REJECTED, e.to_string()),
    })?;
    let bytes = write_image(&assembled.image).map_err(|e| Fail(REJECTED, e.to_string()))?;
    write_file(output, &bytes)?;
    if let Some(m) = map {
        let json = serde_json::to_string_pretty(&assembled.labels).map_err(malformed)?;
        write_file(m, json.as_bytes())?;
    }
    eprintln!(
        "{}: {} code bytes, {} data bytes",
        output.display(),
        assembled.image.code.len(),
        assembled.image.data.len()
    );
    Ok(OK)
}

fn cmd_verify(path: &Path, json: bool, confine_loads: bool) -> CmdResult {
    let img = load_image(path)?;
    let v = verify_with(&img, VerifyOptions { confine_loads });
    if json {
        println!("{}", serde_json::to_string_pretty(&v).map_err(malformed)?);
    } else {
        println!("{}", if v.accepted { "accepted" } else { "rejected" });
        for viol in &v.violations {
            println!("  {}", viol);
        }
        let s = &v.stats;
        println!(
            "reachable={} cfi_labels={} mem_guards={} cfi_guards={} eliminated={} confine_loads={}",
            s.reachable_count,
            s.cfi_label_count,
            s.guard_count,
            s.cfi_guard_count,
            s.eliminated_guard_equiv,
            s.confine_loads
        );
    }
    Ok(if v.accepted { OK } else { REJECTED })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect::<Vec<_>>().join(" ")
}

fn pseudo_header(p: &PseudoInstr, code: &[u8]) -> String {
    match p {
        PseudoInstr::CfiLabel { id_field_offset, .. } => {
            let o = *id_field_offset as usize;
            let id = u32::from_le_bytes(code[o..o + 4].try_into().unwrap());
            format!("cfi_label<id={}>", id)
        }
        PseudoInstr::MemGuard { guarded_operand, .. } => format!("mem_guard {}", guarded_operand),
        PseudoInstr::CfiGuard {
            target_reg,
            scratch_reg,
            ..
        } => format!("cfi_guard {} (scratch {})", target_reg, scratch_reg),
    }
}

fn cmd_disasm(path: &Path, raw: bool) -> CmdResult {
    let img = load_image(path)?;
    let code = &img.code;
    if raw {
        let mut off = 0usize;
        while off < code.len() {
            match decode(code, off) {
                Ok(i) => {
                    println!("{:#06x}  {:<32} {}", off, hex(&code[off..off + i.len()]), i);
                    off += i.len();
                }
                Err(_) => {
                    println!("{:#06x}  {:<32} .byte {:#04x}", off, hex(&code[off..off + 1]), code[off]);
                    off += 1;
                }
            }
        }
        return Ok(OK);
    }
    let (instrs, abort) = stage1_partial(&img);
    if let Some(v) = &abort {
        println!("; stage 1 aborted: {}", v);
        println!("; partial R ({} instructions):", instrs.len());
    }
    let r = ReachableSet::new(instrs, Default::default());
    let mut group_end = 0u64;
    for (addr, i) in &r.instrs {
        if let Some(p) = r.pseudos.get(addr) {
            println!("{:#06x}  ; {}", addr, pseudo_header(p, code));
            group_end = p.end();
        }
        let mark = if *addr < group_end { "|" } else { " " };
        let a = *addr as usize;
        println!("{:#06x} {} {:<32} {}", addr, mark, hex(&code[a..a + i.len()]), i);
    }
    Ok(if abort.is_some() { REJECTED } else { OK })
}

fn describe(status: &SipStatus) -> String {
    match status {
        SipStatus::Exited(c) => format!("exited {}", c),
        SipStatus::Faulted(f) => format!("faulted {}", f),
        SipStatus::Blocked(b) => format!("blocked {:?}", b),
        SipStatus::Running => "running".into(),
    }
}

fn load_failure(e: LoadError) -> Fail {
    match e {
        LoadError::Format(_) => malformed(e),
        e => Fail(REJECTED, e.to_string()),
    }
}

fn cmd_run(
    main: &Path,
    extra: &[PathBuf],
    opts: RuntimeOptions,
    counters: bool,
    stdin: Option<&Path>,
) -> CmdResult {
    let images = load_images(main, extra)?;
    let input = read_stdin(stdin)?;
    let report = run(&images, 0, &input, opts).map_err(load_failure)?;
    for line in &report.trace {
        eprintln!("{}", line);
    }
    for s in &report.sips {
        print!("{}", String::from_utf8_lossy(&s.stdout));
    }
    for s in &report.sips {
        eprintln!("pid {} (image {}): {}", s.pid, s.image_index, describe(&s.status));
    }
    if report.deadlock {
        eprintln!("deadlock: every live SIP is blocked");
    }
    if report.step_limit_hit {
        eprintln!("step limit reached");
    }
    if counters {
        let per_sip: Vec<_> = report
            .sips
            .iter()
            .map(|s| serde_json::json!({ "pid": s.pid, "counters": s.counters }))
            .collect();
        let j = serde_json::json!({ "total": report.counters, "sips": per_sip });
        println!("{}", j);
    }
    let clean = report.faults().is_empty()
        && !report.deadlock
        && !report.step_limit_hit
        && report.exit_code(1) == Some(0);
    Ok(if clean { OK } else { REJECTED })
}

fn cmd_monitor(
    main: &Path,
    extra: &[PathBuf],
    fuzz: usize,
    seed: u64,
    verdict: Option<&Path>,
    stdin: Option<&Path>,
    json: bool,
) -> CmdResult {
    let images = load_images(main, extra)?;
    let opts = RuntimeOptions {
        seed,
        ..RuntimeOptions::enforcing()
    };
    let oracles = match verdict {
        Some(p) => {
            let v: Verdict = serde_json::from_slice(&read_file(p)?).map_err(malformed)?;
            let vo = VerifyOptions {
                confine_loads: v.stats.confine_loads,
            };
            let main_oracle = if v.accepted {
                Some(ImageOracle::for_image(&images[0], vo).ok_or_else(|| {
                    Fail(REJECTED, "verdict claims acceptance but the image is rejected".into())
                })?)
            } else {
                None
            };
            let mut o = vec![main_oracle];
            o.extend(images[1..].iter().map(|i| ImageOracle::for_image(i, vo)));
            o
        }
        None => vec![None; images.len()],
    };
    let monitor = Monitor::with_oracles(&images, oracles, opts);
    let mut inputs = vec![read_stdin(stdin)?];
    inputs.extend(fuzz_inputs(seed, fuzz, 64));
    let mut total = 0usize;
    let mut reports = Vec::new();
    for input in &inputs {
        let m = monitor.run(0, input).map_err(load_failure)?;
        total += m.violation_count;
        if !json {
            for v in &m.violations {
                println!(
                    "pid {} pc={:#x} {:?}: {} input={:?}",
                    v.pid,
                    v.pc,
                    v.kind,
                    v.detail,
                    String::from_utf8_lossy(input)
                );
            }
        }
        reports.push(m);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&reports).map_err(malformed)?);
    } else {
        println!("runs={} violations={}", inputs.len(), total);
    }
    Ok(if total == 0 { OK } else { REJECTED })
}

fn cmd_corpus(dir: Option<PathBuf>, filter: Option<&str>, json: bool) -> CmdResult {
    let corpus = Corpus::load(dir.unwrap_or_else(Corpus::default_dir)).map_err(malformed)?;
    let cases: Vec<_> = match filter {
        Some(f) => corpus.filter(f).collect(),
        None => corpus.cases.iter().collect(),
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let chunk = cases.len().div_ceil(workers).max(1);
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|c| run_case(c)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if json {
        println!("{}", serde_json::to_string_pretty(&results).map_err(malformed)?);
    } else {
        for r in &results {
            println!(
                "{} {:<12} {:<28} expected={} observed={}",
                if r.passed { "PASS" } else { "FAIL" },
                r.kind.to_string(),
                r.name,
                r.expected,
                r.observed
            );
        }
        println!("{} cases, {} passed, {} failed", results.len(), results.len() - failed, failed);
    }
    Ok(if failed == 0 { OK } else { REJECTED })
}
