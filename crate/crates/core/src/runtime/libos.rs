use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::machine::{self, Domain, StepOutcome};
use super::monitor::MonitorState;
use super::{
    BlockReason, Counters, Event, EventKind, Fault, FaultKind, FdEntry, LoadError, RunReport,
    RuntimeOptions, SipReport, SipState, SipStatus, ERR_BAD_FD, ERR_BAD_SYSCALL, ERR_FAULTED,
    ERR_NO_CHILD, ERR_NO_EXEC, ERR_NO_IMAGE, SYS_EXIT, SYS_GETPID, SYS_PIPE, SYS_READ, SYS_SPAWN,
    SYS_WAIT, SYS_WRITE, SYS_YIELD,
};
use crate::image::SipbImage;
use crate::isa::Reg;

#[derive(Debug, Default)]
pub(super) struct Pipe {
    buf: VecDeque<u8>,
    readers: u32,
    writers: u32,
}

/// One runtime instance: the image table, all domains and SIPs, and the
/// LibOS state. Single-threaded and deterministic for a given seed.
pub struct Runtime<'a> {
    pub(super) images: &'a [SipbImage],
    pub(super) opts: RuntimeOptions,
    pub(super) domains: Vec<Domain>,
    pub(super) sips: Vec<SipState>,
    pub(super) pipes: Vec<Pipe>,
    pub(super) events: Vec<Event>,
    pub(super) trace: Vec<String>,
    pub(super) total_steps: u64,
    pub(super) monitor: Option<MonitorState<'a>>,
    rng: Option<ChaCha8Rng>,
    /// Index of the SIP that ran last.
    cursor: usize,
    deadlock: bool,
    step_limit_hit: bool,
}

enum SysResult {
    Return(i64),
    Block(BlockReason),
    Exit(i64),
    Fault(Fault),
}

impl<'a> Runtime<'a> {
    /// A runtime whose first SIP (pid 1) runs `images[entry]` with `stdin`
    /// as the contents of fd 0.
    pub fn new(
        images: &'a [SipbImage],
        entry: usize,
        stdin: &[u8],
        opts: RuntimeOptions,
    ) -> Result<Self, LoadError> {
        Self::with_monitor(images, entry, stdin, opts, None)
    }

    pub(super) fn with_monitor(
        images: &'a [SipbImage],
        entry: usize,
        stdin: &[u8],
        opts: RuntimeOptions,
        monitor: Option<MonitorState<'a>>,
    ) -> Result<Self, LoadError> {
        let mut rt = Runtime {
            images,
            opts,
            domains: Vec::new(),
            sips: Vec::new(),
            pipes: vec![Pipe {
                buf: stdin.iter().copied().collect(),
                readers: 0,
                writers: 0,
            }],
            events: Vec::new(),
            trace: Vec::new(),
            total_steps: 0,
            monitor,
            rng: (opts.seed != 0).then(|| ChaCha8Rng::seed_from_u64(opts.seed)),
            cursor: usize::MAX,
            deadlock: false,
            step_limit_hit: false,
        };
        let mut fds = BTreeMap::new();
        fds.insert(0, FdEntry::PipeRead(0));
        fds.insert(1, FdEntry::Stdout);
        rt.spawn_sip(entry, fds)?;
        Ok(rt)
    }

    pub fn sips(&self) -> &[SipState] {
        &self.sips
    }

    fn spawn_sip(&mut self, image_index: usize, fds: BTreeMap<u64, FdEntry>) -> Result<u32, LoadError> {
        let img = self
            .images
            .get(image_index)
            .ok_or(LoadError::UnknownImageIndex(image_index))?;
        let pid = self.sips.len() as u32 + 1;
        let slot = self.domains.len();
        let (domain, mut state) = machine::load(img, image_index, pid, slot, &self.opts)?;
        for fd in fds.values() {
            match *fd {
                FdEntry::PipeRead(p) => self.pipes[p].readers += 1,
                FdEntry::PipeWrite(p) => self.pipes[p].writers += 1,
                FdEntry::Stdout => {}
            }
        }
        state.fds = fds;
        self.domains.push(domain);
        self.sips.push(state);
        Ok(pid)
    }

    fn emit(&mut self, si: usize, kind: EventKind) {
        self.events.push(Event {
            pid: self.sips[si].pid,
            kind,
        });
    }

    fn terminate(&mut self, si: usize, status: SipStatus) {
        let kind = match &status {
            SipStatus::Exited(code) => EventKind::Exit { code: *code },
            SipStatus::Faulted(f) => EventKind::Fault { kind: f.kind },
            _ => unreachable!("terminate with a live status"),
        };
        self.emit(si, kind);
        let fds = std::mem::take(&mut self.sips[si].fds);
        for fd in fds.values() {
            match *fd {
                FdEntry::PipeRead(p) => self.pipes[p].readers -= 1,
                FdEntry::PipeWrite(p) => self.pipes[p].writers -= 1,
                FdEntry::Stdout => {}
            }
        }
        self.sips[si].status = status;
    }

    fn index_of(&self, pid: u32) -> Option<usize> {
        let i = (pid as usize).checked_sub(1)?;
        (i < self.sips.len()).then_some(i)
    }

    fn wake_blocked(&mut self) {
        for i in 0..self.sips.len() {
            let SipStatus::Blocked(reason) = self.sips[i].status else {
                continue;
            };
            let ready = match reason {
                BlockReason::Read(fd) => match self.sips[i].fds.get(&fd) {
                    Some(FdEntry::PipeRead(p)) => {
                        let p = &self.pipes[*p];
                        !p.buf.is_empty() || p.writers == 0
                    }
                    _ => true,
                },
                BlockReason::Wait(pid) => self
                    .index_of(pid)
                    .is_none_or(|t| self.sips[t].status.is_terminated()),
            };
            if ready {
                self.sips[i].status = SipStatus::Running;
            }
        }
    }

    fn pick(&mut self) -> Option<usize> {
        let runnable: Vec<usize> = (0..self.sips.len())
            .filter(|&i| self.sips[i].status == SipStatus::Running)
            .collect();
        if runnable.is_empty() {
            return None;
        }
        let chosen = match self.rng.as_mut() {
            Some(rng) => runnable[rng.gen_range(0..runnable.len())],
            None => {
                let after = self.cursor.wrapping_add(1);
                *runnable
                    .iter()
                    .find(|&&i| i >= after)
                    .unwrap_or(&runnable[0])
            }
        };
        self.cursor = chosen;
        Some(chosen)
    }

    /// Runs until every SIP has terminated, all live SIPs are blocked, or
    /// the step limit is reached.
    pub fn run_to_completion(&mut self) {
        loop {
            self.wake_blocked();
            let Some(si) = self.pick() else {
                self.deadlock = self.sips.iter().any(|s| !s.status.is_terminated());
                return;
            };
            loop {
                if self.total_steps >= self.opts.step_limit {
                    self.step_limit_hit = true;
                    return;
                }
                match self.step(si) {
                    StepOutcome::Continue => {}
                    StepOutcome::Fault(f) => {
                        self.terminate(si, SipStatus::Faulted(f));
                        break;
                    }
                    StepOutcome::SyscallRequest => {
                        self.dispatch(si);
                        break;
                    }
                }
            }
        }
    }

    pub fn report(self) -> RunReport {
        let mut counters = Counters::default();
        let sips = self
            .sips
            .into_iter()
            .map(|s| {
                counters.add(&s.counters);
                SipReport {
                    pid: s.pid,
                    image_index: s.image_index,
                    status: s.status,
                    stdout: s.stdout,
                    counters: s.counters,
                }
            })
            .collect();
        RunReport {
            sips,
            events: self.events,
            counters,
            deadlock: self.deadlock,
            step_limit_hit: self.step_limit_hit,
            trace: self.trace,
        }
    }

    pub(super) fn take_monitor(&mut self) -> Option<MonitorState<'a>> {
        self.monitor.take()
    }

    /// Handles the SyscallRequest raised by SIP `si` at its trampoline.
    fn dispatch(&mut self, si: usize) {
        let s = &self.sips[si];
        let r13 = s.regs[Reg::R13.index() as usize];
        if self.opts.syscall_label_check && !self.domains[s.slot].has_label_at(r13) {
            let f = Fault::new(
                FaultKind::SyscallSanity,
                s.rip,
                format!("return address {:#x} is not a cfi_label of this domain", r13),
            );
            self.terminate(si, SipStatus::Faulted(f));
            return;
        }
        match self.syscall(si) {
            SysResult::Return(v) => {
                let s = &mut self.sips[si];
                s.regs[Reg::Rax.index() as usize] = v as u64;
                s.regs[Reg::R10.index() as usize] = 0;
                s.regs[Reg::R11.index() as usize] = 0;
                s.rip = r13;
                s.counters.syscalls += 1;
            }
            SysResult::Block(reason) => self.sips[si].status = SipStatus::Blocked(reason),
            SysResult::Exit(code) => {
                self.sips[si].counters.syscalls += 1;
                self.terminate(si, SipStatus::Exited(code));
            }
            SysResult::Fault(f) => self.terminate(si, SipStatus::Faulted(f)),
        }
    }

    fn user_buffer(&self, si: usize, buf: u64, len: u64) -> Result<(), Fault> {
        let s = &self.sips[si];
        if s.layout.data_contains(buf, len) {
            Ok(())
        } else {
            Err(Fault::new(
                FaultKind::SyscallSanity,
                s.rip,
                format!("buffer [{:#x}, +{:#x}) outside the data region", buf, len),
            ))
        }
    }

    fn syscall(&mut self, si: usize) -> SysResult {
        let s = &self.sips[si];
        let arg = |r: Reg| s.regs[r.index() as usize];
        let (num, a0, a1, a2) = (arg(Reg::Rax), arg(Reg::Rdi), arg(Reg::Rsi), arg(Reg::Rdx));
        match num {
            SYS_EXIT => SysResult::Exit(a0 as i64),
            SYS_WRITE => {
                if let Err(f) = self.user_buffer(si, a1, a2) {
                    return SysResult::Fault(f);
                }
                let data = self.read_user(si, a1, a2);
                match s.fds.get(&a0).copied() {
                    Some(FdEntry::Stdout) => self.sips[si].stdout.extend_from_slice(&data),
                    Some(FdEntry::PipeWrite(p)) => self.pipes[p].buf.extend(&data),
                    _ => return SysResult::Return(ERR_BAD_FD),
                }
                self.emit(si, EventKind::Write { fd: a0, data });
                SysResult::Return(a2 as i64)
            }
            SYS_READ => {
                if let Err(f) = self.user_buffer(si, a1, a2) {
                    return SysResult::Fault(f);
                }
                let Some(FdEntry::PipeRead(p)) = s.fds.get(&a0).copied() else {
                    return SysResult::Return(ERR_BAD_FD);
                };
                let pipe = &mut self.pipes[p];
                if pipe.buf.is_empty() && a2 > 0 {
                    if pipe.writers > 0 {
                        return SysResult::Block(BlockReason::Read(a0));
                    }
                    self.emit(si, EventKind::Read { fd: a0, data: Vec::new() });
                    return SysResult::Return(0);
                }
                let n = (a2 as usize).min(pipe.buf.len());
                let data: Vec<u8> = pipe.buf.drain(..n).collect();
                self.write_user(si, a1, &data);
                self.emit(si, EventKind::Read { fd: a0, data });
                SysResult::Return(n as i64)
            }
            SYS_SPAWN => {
                let idx = a0 as usize;
                let fds = s.fds.clone();
                let result = if a0 >= self.images.len() as u64 {
                    ERR_NO_IMAGE
                } else {
                    match self.spawn_sip(idx, fds) {
                        Ok(pid) => pid as i64,
                        Err(_) => ERR_NO_EXEC,
                    }
                };
                self.emit(
                    si,
                    EventKind::Spawn {
                        image_index: idx,
                        child: result,
                    },
                );
                SysResult::Return(result)
            }
            SYS_YIELD => SysResult::Return(0),
            SYS_PIPE => {
                let p = self.pipes.len();
                self.pipes.push(Pipe {
                    buf: VecDeque::new(),
                    readers: 1,
                    writers: 1,
                });
                let fds = &mut self.sips[si].fds;
                let free = |fds: &BTreeMap<u64, FdEntry>| (0..).find(|f| !fds.contains_key(f)).unwrap();
                let r = free(fds);
                fds.insert(r, FdEntry::PipeRead(p));
                let w = free(fds);
                fds.insert(w, FdEntry::PipeWrite(p));
                self.emit(
                    si,
                    EventKind::Pipe {
                        read_fd: r,
                        write_fd: w,
                    },
                );
                SysResult::Return((r | (w << 32)) as i64)
            }
            SYS_GETPID => SysResult::Return(s.pid as i64),
            SYS_WAIT => {
                let target = a0 as u32;
                let result = match self.index_of(target) {
                    Some(t) if t != si && a0 <= u32::MAX as u64 => match &self.sips[t].status {
                        SipStatus::Exited(c) => *c,
                        SipStatus::Faulted(_) => ERR_FAULTED,
                        _ => return SysResult::Block(BlockReason::Wait(target)),
                    },
                    _ => ERR_NO_CHILD,
                };
                self.emit(si, EventKind::Wait { target, result });
                SysResult::Return(result)
            }
            _ => SysResult::Return(ERR_BAD_SYSCALL),
        }
    }
}

/// Runs `images[entry]` as pid 1 with `stdin` on fd 0.
pub fn run(
    images: &[SipbImage],
    entry: usize,
    stdin: &[u8],
    opts: RuntimeOptions,
) -> Result<RunReport, LoadError> {
    let mut rt = Runtime::new(images, entry, stdin, opts)?;
    rt.run_to_completion();
    Ok(rt.report())
}
