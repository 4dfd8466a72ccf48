//! The sandbox runtime: loader, stepping interpreter, LibOS stub and the
//! execution monitor.
//!
//! Every SIP (software-isolated process) gets its own domain in a 16 MiB
//! slot. Addresses are simulated; domain `k` occupies slot `k`.

mod layout;
mod libos;
mod machine;
mod monitor;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::SipbImage;
use crate::verifier::ViolationCode;

pub use layout::{load_code, DomainLayout, Region, GUARD_BYTES, SLOT_SIZE};
pub use libos::{run, Runtime};
pub use monitor::{fuzz_inputs, monitor_run, ImageOracle, Monitor, MonitorReport, PolicyKind, PolicyViolation};

pub const SYS_EXIT: u64 = 0;
pub const SYS_WRITE: u64 = 1;
pub const SYS_READ: u64 = 2;
pub const SYS_SPAWN: u64 = 3;
pub const SYS_YIELD: u64 = 4;
pub const SYS_PIPE: u64 = 5;
pub const SYS_GETPID: u64 = 6;
pub const SYS_WAIT: u64 = 7;

/// Negative results returned in rax by failed system calls.
pub const ERR_NO_IMAGE: i64 = -2;
pub const ERR_NO_EXEC: i64 = -8;
pub const ERR_BAD_FD: i64 = -9;
pub const ERR_NO_CHILD: i64 = -10;
pub const ERR_FAULTED: i64 = -14;
pub const ERR_BAD_SYSCALL: i64 = -38;

pub const DEFAULT_STEP_LIMIT: u64 = 20_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    BoundLower,
    BoundUpper,
    UnmappedAccess,
    PermissionDenied,
    NonExecutableFetch,
    DangerousInstr,
    SyscallSanity,
    /// Bytes at the instruction pointer do not decode.
    InvalidOpcode,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub pc: u64,
    pub detail: String,
}

impl Fault {
    pub fn new(kind: FaultKind, pc: u64, detail: impl Into<String>) -> Self {
        Fault {
            kind,
            pc,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {:#x}: {}", self.kind, self.pc, self.detail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockReason {
    Read(u64),
    Wait(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SipStatus {
    Running,
    Blocked(BlockReason),
    Exited(i64),
    Faulted(Fault),
}

impl SipStatus {
    pub fn is_terminated(&self) -> bool {
        matches!(self, SipStatus::Exited(_) | SipStatus::Faulted(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bound {
    pub lb: u64,
    pub ub: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub zf: bool,
    pub sf: bool,
    pub of: bool,
    pub cf: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdEntry {
    Stdout,
    PipeRead(usize),
    PipeWrite(usize),
}

/// Dynamic counters, per SIP and in total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    /// Executions of `bndcl bnd0` (one per executed mem_guard).
    pub mem_guard: u64,
    /// Executions of `bndcl bnd1` (one per executed cfi_guard).
    pub cfi_guard: u64,
    pub syscalls: u64,
}

impl Counters {
    fn add(&mut self, o: &Counters) {
        self.steps += o.steps;
        self.mem_guard += o.mem_guard;
        self.cfi_guard += o.cfi_guard;
        self.syscalls += o.syscalls;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SipState {
    pub pid: u32,
    pub image_index: usize,
    /// Index of the domain (and slot) the SIP runs in.
    pub slot: usize,
    pub layout: DomainLayout,
    pub regs: [u64; 16],
    pub rip: u64,
    pub bnd: [Bound; 4],
    pub flags: Flags,
    pub status: SipStatus,
    pub fds: BTreeMap<u64, FdEntry>,
    pub stdout: Vec<u8>,
    pub counters: Counters,
}

/// Externally visible LibOS activity, in global order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Write { fd: u64, data: Vec<u8> },
    Read { fd: u64, data: Vec<u8> },
    Spawn { image_index: usize, child: i64 },
    Pipe { read_fd: u64, write_fd: u64 },
    Wait { target: u32, result: i64 },
    Exit { code: i64 },
    Fault { kind: FaultKind },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub pid: u32,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    /// Foreign memory is unmapped, as the enforcing runtime sees it.
    Isolated,
    /// Foreign data and code are reachable (one flat address space), so the
    /// monitor can observe what an unverified image would do.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuntimeOptions {
    /// Re-run the verifier on every image before loading it.
    pub verify_on_load: bool,
    /// Require r13 to point at one of the caller's cfi_labels at syscalls.
    pub syscall_label_check: bool,
    pub confine_loads: bool,
    pub view: View,
    /// 0 selects plain round-robin; anything else seeds a random pick among
    /// runnable SIPs at every scheduling point.
    pub seed: u64,
    pub step_limit: u64,
    pub trace: bool,
}

impl RuntimeOptions {
    /// The sandbox proper.
    pub fn enforcing() -> Self {
        RuntimeOptions {
            verify_on_load: true,
            syscall_label_check: true,
            confine_loads: true,
            view: View::Isolated,
            seed: 0,
            step_limit: DEFAULT_STEP_LIMIT,
            trace: false,
        }
    }

    /// Reference interpreter for uninstrumented programs.
    pub fn permissive() -> Self {
        RuntimeOptions {
            verify_on_load: false,
            syscall_label_check: false,
            ..Self::enforcing()
        }
    }
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self::enforcing()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error("image rejected by the verifier: {}", codes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "))]
    VerifyRejected { codes: Vec<ViolationCode> },
    #[error("image does not fit a domain slot")]
    CapacityExceeded,
    #[error("no image with index {0}")]
    UnknownImageIndex(usize),
    #[error("malformed image: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SipReport {
    pub pid: u32,
    pub image_index: usize,
    pub status: SipStatus,
    #[serde(with = "bytes_as_string")]
    pub stdout: Vec<u8>,
    pub counters: Counters,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub sips: Vec<SipReport>,
    pub events: Vec<Event>,
    pub counters: Counters,
    /// Every live SIP was blocked when the run ended.
    pub deadlock: bool,
    pub step_limit_hit: bool,
    #[serde(skip)]
    pub trace: Vec<String>,
}

impl RunReport {
    pub fn sip(&self, pid: u32) -> Option<&SipReport> {
        self.sips.iter().find(|s| s.pid == pid)
    }

    pub fn exit_code(&self, pid: u32) -> Option<i64> {
        match self.sip(pid)?.status {
            SipStatus::Exited(c) => Some(c),
            _ => None,
        }
    }

    pub fn faults(&self) -> Vec<(u32, &Fault)> {
        self.sips
            .iter()
            .filter_map(|s| match &s.status {
                SipStatus::Faulted(f) => Some((s.pid, f)),
                _ => None,
            })
            .collect()
    }

    /// The syscall trace used to compare builds: writes, reads, spawns,
    /// pipes, waits, exits and faults, in order.
    pub fn syscall_trace(&self) -> &[Event] {
        &self.events
    }
}

mod bytes_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

/// Loads `img` into slot `slot` with the given domain ID; the standalone
/// form of the loader, used by tests and the CLI.
pub fn load(
    img: &SipbImage,
    domain_id: u32,
    slot: usize,
    opts: &RuntimeOptions,
) -> Result<SipState, LoadError> {
    let (_, state) = machine::load(img, 0, domain_id, slot, opts)?;
    Ok(state)
}

/// Loads `img` and returns the bytes of region C as laid out in memory.
pub fn loaded_code(img: &SipbImage, domain_id: u32) -> Result<Vec<u8>, LoadError> {
    let layout = DomainLayout::for_image(img, 0, domain_id).ok_or(LoadError::CapacityExceeded)?;
    Ok(load_code(img, &layout))
}
