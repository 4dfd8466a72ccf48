use std::collections::HashMap;

use thiserror::Error;

use super::{DataBlob, Function, Item, SInstr, SasmProgram};
use crate::isa::{AluImmOp, AluOp, BndOperand, BoundSide, Cond, MemOperand, Op, Reg};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: register `{reg}` is reserved")]
    ReservedRegister { line: usize, reg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
}

pub fn parse_sasm(text: &str) -> Result<SasmProgram, ParseError> {
    Parser::new(false).run(text)
}

/// Raw dialect: reserved registers, `cfi_label`, `mem_guard`, `cfi_guard`,
/// `bndcl`/`bndcu`, `movabs`, `syscall_gate` and `.byte` are accepted.
pub fn parse_sasm_raw(text: &str) -> Result<SasmProgram, ParseError> {
    Parser::new(true).run(text)
}

#[derive(Clone, Debug, PartialEq)]
enum Opnd {
    Reg(Reg),
    Bnd(u8),
    Imm(i128),
    Mem(MemOperand),
    Abs(u64),
    Label(String),
    AddrOf(String),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LabelKind {
    Code,
    Data,
}

struct Parser {
    raw: bool,
    line: usize,
    functions: Vec<Function>,
    data: Vec<DataBlob>,
    defined: HashMap<String, LabelKind>,
    refs: Vec<(String, usize, bool)>,
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Splits on commas outside brackets and string literals.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let (mut depth, mut in_str, mut escaped) = (0i32, false, false);
    for c in s.chars() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            '[' if !in_str => depth += 1,
            ']' if !in_str => depth -= 1,
            ',' if depth == 0 && !in_str => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_int(s: &str) -> Option<i128> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b.trim_start()),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(&h.replace('_', ""), 16).ok()?
    } else {
        body.replace('_', "").parse::<i128>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_string_literal(s: &str) -> Option<Vec<u8>> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next()? {
            'n' => out.push(b'\n'),
            't' => out.push(b'\t'),
            'r' => out.push(b'\r'),
            '0' => out.push(0),
            '\\' => out.push(b'\\'),
            '"' => out.push(b'"'),
            'x' => {
                let hex: String = chars.by_ref().take(2).collect();
                out.push(u8::from_str_radix(&hex, 16).ok()?);
            }
            _ => return None,
        }
    }
    Some(out)
}

impl Parser {
    fn new(raw: bool) -> Self {
        Parser {
            raw,
            line: 0,
            functions: Vec::new(),
            data: Vec::new(),
            defined: HashMap::new(),
            refs: Vec::new(),
        }
    }

    fn syntax<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::SyntaxError {
            line: self.line,
            msg: msg.into(),
        })
    }

    fn define(&mut self, name: &str, kind: LabelKind) -> Result<(), ParseError> {
        if !is_ident(name) {
            return self.syntax(format!("invalid label name `{}`", name));
        }
        if Reg::from_name(&name.to_ascii_lowercase()).is_some() {
            return self.syntax(format!("`{}` is a register name", name));
        }
        if self.defined.insert(name.to_string(), kind).is_some() {
            return Err(ParseError::DuplicateLabel {
                line: self.line,
                label: name.to_string(),
            });
        }
        Ok(())
    }

    fn push(&mut self, item: Item) -> Result<(), ParseError> {
        match self.functions.last_mut() {
            Some(f) => {
                f.body.push(item);
                Ok(())
            }
            None => self.syntax("instruction outside of a function"),
        }
    }

    fn run(mut self, text: &str) -> Result<SasmProgram, ParseError> {
        for (i, raw_line) in text.lines().enumerate() {
            self.line = i + 1;
            let line = strip_comment(raw_line).trim();
            if !line.is_empty() {
                self.parse_line(line)?;
            }
        }
        for (label, line, code_only) in std::mem::take(&mut self.refs) {
            match self.defined.get(&label) {
                None => return Err(ParseError::UndefinedLabel { line, label }),
                Some(LabelKind::Data) if code_only => {
                    return Err(ParseError::SyntaxError {
                        line,
                        msg: format!("`{}` is a data label, not a branch target", label),
                    })
                }
                Some(_) => {}
            }
        }
        let entry = if self.functions.iter().any(|f| f.name == "main") {
            "main".to_string()
        } else {
            match self.functions.first() {
                Some(f) => f.name.clone(),
                None => return self.syntax("program defines no functions"),
            }
        };
        Ok(SasmProgram {
            functions: self.functions,
            data: self.data,
            entry,
        })
    }

    fn parse_line(&mut self, line: &str) -> Result<(), ParseError> {
        if let Some(rest) = line.strip_prefix("func ") {
            let name = rest.trim().strip_suffix(':').map(str::trim);
            let Some(name) = name else {
                return self.syntax("expected `func NAME:`");
            };
            self.define(name, LabelKind::Code)?;
            self.functions.push(Function {
                name: name.to_string(),
                body: Vec::new(),
            });
            return Ok(());
        }
        if let Some(rest) = line.strip_prefix(".data") {
            return self.parse_data(rest.trim());
        }
        if let Some(rest) = line.strip_prefix(".byte") {
            if !self.raw {
                return self.syntax("`.byte` is only allowed in raw mode");
            }
            let mut bytes = Vec::new();
            for tok in split_operands(rest) {
                match parse_int(&tok) {
                    Some(v) if (0..=255).contains(&v) => bytes.push(v as u8),
                    _ => return self.syntax(format!("bad byte `{}`", tok)),
                }
            }
            return self.push(Item::Bytes(bytes));
        }
        // `LABEL:` optionally followed by an instruction.
        let mut rest = line;
        if let Some(colon) = line.find(':') {
            let head = line[..colon].trim();
            if is_ident(head) && !line[..colon].contains('[') {
                self.define(head, LabelKind::Code)?;
                self.push(Item::Label(head.to_string()))?;
                rest = line[colon + 1..].trim();
                if rest.is_empty() {
                    return Ok(());
                }
            }
        }
        let (mnemonic, ops) = match rest.find(char::is_whitespace) {
            Some(i) => (&rest[..i], rest[i..].trim()),
            None => (rest, ""),
        };
        let ops = split_operands(ops)
            .iter()
            .map(|o| self.operand(o))
            .collect::<Result<Vec<_>, _>>()?;
        let items = self.instruction(&mnemonic.to_ascii_lowercase(), ops)?;
        for item in items {
            self.push(item)?;
        }
        Ok(())
    }

    fn parse_data(&mut self, rest: &str) -> Result<(), ParseError> {
        let Some(colon) = rest.find(':') else {
            return self.syntax("expected `.data NAME: quad|bytes|zero ...`");
        };
        let name = rest[..colon].trim().to_string();
        let body = rest[colon + 1..].trim();
        let (kind, values) = match body.find(char::is_whitespace) {
            Some(i) => (&body[..i], body[i..].trim()),
            None => (body, ""),
        };
        let mut bytes = Vec::new();
        match kind {
            "quad" => {
                for tok in split_operands(values) {
                    match parse_int(&tok) {
                        Some(v) if v >= i64::MIN as i128 && v <= u64::MAX as i128 => {
                            bytes.extend_from_slice(&(v as u64).to_le_bytes())
                        }
                        _ => return self.syntax(format!("bad quad `{}`", tok)),
                    }
                }
            }
            "bytes" => {
                for tok in split_operands(values) {
                    if tok.starts_with('"') {
                        match parse_string_literal(&tok) {
                            Some(b) => bytes.extend(b),
                            None => return self.syntax(format!("bad string {}", tok)),
                        }
                    } else {
                        match parse_int(&tok) {
                            Some(v) if (-128..=255).contains(&v) => bytes.push(v as u8),
                            _ => return self.syntax(format!("bad byte `{}`", tok)),
                        }
                    }
                }
            }
            "zero" => match parse_int(values) {
                Some(n) if (0..=1 << 24).contains(&n) => bytes.resize(n as usize, 0),
                _ => return self.syntax(format!("bad size `{}`", values)),
            },
            other => return self.syntax(format!("unknown data kind `{}`", other)),
        }
        self.define(&name, LabelKind::Data)?;
        self.data.push(DataBlob { name, bytes });
        Ok(())
    }

    fn register(&self, s: &str) -> Result<Option<Reg>, ParseError> {
        match Reg::from_name(&s.to_ascii_lowercase()) {
            Some(r @ (Reg::R10 | Reg::R11)) if !self.raw => Err(ParseError::ReservedRegister {
                line: self.line,
                reg: r.name().to_string(),
            }),
            r => Ok(r),
        }
    }

    fn bound_register(&self, s: &str) -> Result<Option<u8>, ParseError> {
        let lower = s.to_ascii_lowercase();
        let Some(n) = lower.strip_prefix("bnd").and_then(|n| n.parse::<u8>().ok()) else {
            return Ok(None);
        };
        if n > 3 {
            return Ok(None);
        }
        if !self.raw {
            return Err(ParseError::ReservedRegister {
                line: self.line,
                reg: lower,
            });
        }
        Ok(Some(n))
    }

    fn operand(&mut self, s: &str) -> Result<Opnd, ParseError> {
        let s = s.trim();
        let s = s
            .strip_prefix("qword ")
            .or_else(|| s.strip_prefix("QWORD "))
            .map(str::trim)
            .unwrap_or(s);
        if s.is_empty() {
            return self.syntax("empty operand");
        }
        if let Some(inner) = s.strip_prefix('[').and_then(|x| x.strip_suffix(']')) {
            return self.memory(inner);
        }
        if let Some(label) = s.strip_prefix('&') {
            let label = label.trim();
            if !is_ident(label) {
                return self.syntax(format!("bad label reference `{}`", s));
            }
            self.refs.push((label.to_string(), self.line, false));
            return Ok(Opnd::AddrOf(label.to_string()));
        }
        if let Some(r) = self.register(s)? {
            return Ok(Opnd::Reg(r));
        }
        if let Some(b) = self.bound_register(s)? {
            return Ok(Opnd::Bnd(b));
        }
        if let Some(v) = parse_int(s) {
            return Ok(Opnd::Imm(v));
        }
        if is_ident(s) {
            return Ok(Opnd::Label(s.to_string()));
        }
        self.syntax(format!("cannot parse operand `{}`", s))
    }

    fn memory(&mut self, inner: &str) -> Result<Opnd, ParseError> {
        let mut terms: Vec<(bool, String)> = Vec::new();
        let mut cur = String::new();
        let mut neg = false;
        for c in inner.chars() {
            if (c == '+' || c == '-') && !cur.trim().is_empty() {
                terms.push((neg, cur.trim().to_string()));
                cur.clear();
                neg = c == '-';
            } else if c == '-' {
                neg = !neg;
            } else if c != '+' {
                cur.push(c);
            }
        }
        if cur.trim().is_empty() {
            return self.syntax(format!("bad memory operand `[{}]`", inner));
        }
        terms.push((neg, cur.trim().to_string()));

        let mut base: Option<Reg> = None;
        let mut index: Option<(Reg, u8)> = None;
        let mut rip = false;
        let mut disp: i128 = 0;
        for (neg, t) in terms {
            if let Some((r, sc)) = t.split_once('*') {
                let Some(reg) = self.register(r.trim())? else {
                    return self.syntax(format!("bad index register `{}`", r));
                };
                let scale = match parse_int(sc) {
                    Some(s @ (1 | 2 | 4 | 8)) => s as u8,
                    _ => return self.syntax(format!("bad scale `{}`", sc)),
                };
                if neg || index.is_some() {
                    return self.syntax("bad index term");
                }
                index = Some((reg, scale));
            } else if t.eq_ignore_ascii_case("rip") {
                if !self.raw || neg {
                    return self.syntax("rip-relative operands are not allowed");
                }
                rip = true;
            } else if let Some(reg) = self.register(&t)? {
                if neg {
                    return self.syntax("negated register");
                }
                if base.is_none() {
                    base = Some(reg);
                } else if index.is_none() {
                    index = Some((reg, 1));
                } else {
                    return self.syntax("too many registers");
                }
            } else if let Some(v) = parse_int(&t) {
                disp += if neg { -v } else { v };
            } else {
                return self.syntax(format!("bad memory term `{}`", t));
            }
        }
        if rip {
            if base.is_some() || index.is_some() {
                return self.syntax("rip-relative operand with registers");
            }
            return match i32::try_from(disp) {
                Ok(d) => Ok(Opnd::Mem(MemOperand::RipRelative { disp: d })),
                Err(_) => self.syntax("displacement out of range"),
            };
        }
        let Some(base) = base else {
            if index.is_some() {
                return self.syntax("index without base register");
            }
            if self.raw && (0..=u64::MAX as i128).contains(&disp) {
                return Ok(Opnd::Abs(disp as u64));
            }
            return self.syntax("memory operand needs a base register");
        };
        let Ok(disp) = i32::try_from(disp) else {
            return self.syntax("displacement does not fit in 32 bits");
        };
        Ok(Opnd::Mem(match index {
            None => MemOperand::BaseDisp { base, disp },
            Some((Reg::Rsp, _)) => return self.syntax("rsp cannot be an index register"),
            Some((index, scale)) => MemOperand::BaseIndexDisp {
                base,
                index,
                scale,
                disp,
            },
        }))
    }

    fn code_ref(&mut self, l: &str) -> String {
        self.refs.push((l.to_string(), self.line, true));
        l.to_string()
    }

    fn instruction(&mut self, m: &str, ops: Vec<Opnd>) -> Result<Vec<Item>, ParseError> {
        use Opnd::*;
        let op = |o: Op| Ok(vec![Item::Instr(SInstr::Op(o))]);
        let bad = |p: &Parser| p.syntax::<Vec<Item>>(format!("unsupported operands for `{}`", m));
        let imm32 = |p: &Parser, v: i128| -> Result<i32, ParseError> {
            i32::try_from(v).or_else(|_| p.syntax(format!("immediate {} does not fit in 32 bits", v)))
        };
        let alu = |name: &str| match name {
            "add" => Some(AluOp::Add),
            "sub" => Some(AluOp::Sub),
            "and" => Some(AluOp::And),
            "or" => Some(AluOp::Or),
            "xor" => Some(AluOp::Xor),
            "cmp" => Some(AluOp::Cmp),
            _ => None,
        };
        let cond = |name: &str| Cond::ALL.iter().copied().find(|c| c.name() == name);

        match (m, ops.as_slice()) {
            ("mov", [Reg(d), Imm(v)]) => {
                if *v < i64::MIN as i128 || *v > u64::MAX as i128 {
                    return self.syntax("immediate does not fit in 64 bits");
                }
                op(Op::MovImm {
                    dst: *d,
                    imm: *v as i64,
                })
            }
            ("mov", [Reg(d), Reg(s)]) => op(Op::MovRR { dst: *d, src: *s }),
            ("mov", [Reg(d), Mem(mem)]) => op(Op::Load {
                dst: *d,
                mem: mem.clone(),
            }),
            ("mov", [Mem(mem), Reg(s)]) => op(Op::Store {
                mem: mem.clone(),
                src: *s,
            }),
            ("mov", [Reg(d), AddrOf(l)]) => Ok(vec![Item::Instr(SInstr::AddrOf {
                dst: *d,
                label: l.clone(),
            })]),
            ("movabs", [Reg(crate::isa::Reg::Rax), Abs(a)]) if self.raw => {
                op(Op::LoadAbs { addr: *a })
            }
            ("movabs", [Abs(a), Reg(crate::isa::Reg::Rax)]) if self.raw => {
                op(Op::StoreAbs { addr: *a })
            }
            ("lea", [Reg(d), Mem(mem)]) => op(Op::Lea {
                dst: *d,
                mem: mem.clone(),
            }),
            ("add" | "sub", [Reg(d), Imm(v)]) => op(Op::AluImm {
                op: if m == "add" {
                    AluImmOp::Add
                } else {
                    AluImmOp::Sub
                },
                dst: *d,
                imm: imm32(self, *v)?,
            }),
            (name, [Reg(d), Reg(s)]) if alu(name).is_some() => op(Op::Alu {
                op: alu(name).unwrap(),
                dst: *d,
                src: *s,
            }),
            ("push", [Reg(r)]) => op(Op::Push(*r)),
            ("pop", [Reg(r)]) => op(Op::Pop(*r)),
            ("jmp", [Label(l)]) => {
                let l = self.code_ref(l);
                Ok(vec![Item::Instr(SInstr::Jmp(l))])
            }
            ("jmp", [Reg(r)]) => op(Op::JmpReg(*r)),
            ("jmp", [Mem(mem)]) => op(Op::JmpMem(mem.clone())),
            (name, [Label(l)]) if cond(name).is_some() => {
                let l = self.code_ref(l);
                Ok(vec![Item::Instr(SInstr::Jcc(cond(name).unwrap(), l))])
            }
            ("call", [Label(l)]) => {
                let l = self.code_ref(l);
                Ok(vec![Item::Instr(SInstr::Call(l))])
            }
            ("call", [Reg(r)]) => op(Op::CallReg(*r)),
            ("call", [Mem(mem)]) => op(Op::CallMem(mem.clone())),
            ("ret", []) => op(Op::Ret),
            ("nop", []) => op(Op::Nop),
            ("syscall", []) => Ok(vec![Item::Syscall]),
            ("cfi_label", []) if self.raw => Ok(vec![Item::CfiLabel { domain_id: 0 }]),
            ("cfi_label", [Imm(v)]) if self.raw => match u32::try_from(*v) {
                Ok(id) => Ok(vec![Item::CfiLabel { domain_id: id }]),
                Err(_) => self.syntax("domain id does not fit in 32 bits"),
            },
            ("cfi_label", [Abs(a)]) if self.raw => match u32::try_from(*a) {
                Ok(id) => Ok(vec![Item::CfiLabel { domain_id: id }]),
                Err(_) => self.syntax("domain id does not fit in 32 bits"),
            },
            ("mem_guard", [Mem(mem)]) if self.raw => Ok(vec![Item::MemGuard(mem.clone())]),
            ("cfi_guard", [Reg(t)]) if self.raw => Ok(vec![Item::CfiGuard {
                target: *t,
                scratch: if *t == crate::isa::Reg::R11 {
                    crate::isa::Reg::R10
                } else {
                    crate::isa::Reg::R11
                },
            }]),
            ("cfi_guard", [Reg(t), Reg(s)]) if self.raw => Ok(vec![Item::CfiGuard {
                target: *t,
                scratch: *s,
            }]),
            ("bndcl" | "bndcu", [Bnd(b), o]) if self.raw => {
                let operand = match o {
                    Reg(r) => BndOperand::Reg(*r),
                    Mem(mem) => BndOperand::Mem(mem.clone()),
                    _ => return bad(self),
                };
                op(Op::BndCheck {
                    side: if m == "bndcl" {
                        BoundSide::Lower
                    } else {
                        BoundSide::Upper
                    },
                    bnd: *b,
                    operand,
                })
            }
            ("syscall_gate", []) if self.raw => op(Op::SyscallGate),
            (
                "mov" | "movabs" | "lea" | "add" | "sub" | "and" | "or" | "xor" | "cmp" | "push"
                | "pop" | "jmp" | "je" | "jne" | "jl" | "jge" | "call" | "ret" | "nop" | "syscall",
                _,
            ) => bad(self),
            ("cfi_label" | "mem_guard" | "cfi_guard" | "bndcl" | "bndcu" | "syscall_gate", _)
                if self.raw =>
            {
                bad(self)
            }
            _ => Err(ParseError::UnknownMnemonic {
                line: self.line,
                mnemonic: m.to_string(),
            }),
        }
    }
}
