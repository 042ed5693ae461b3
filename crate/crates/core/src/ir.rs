//! The subject IR: programs made of basic blocks over sixteen 64-bit
//! registers and a word-addressed, paged memory split into named regions.
//!
//! Residual programs produced by the specializer use the same
//! representation, so one interpreter ([`run_program`]) serves both sides
//! of the equivalence checks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

/// Words per memory page (4096 bytes).
pub const PAGE_WORDS: u64 = 512;

/// Page 0 is never mapped, so small integers are never valid addresses.
pub const FIRST_REGION_PAGE: u64 = 1;

/// Upper bound on the address space, in pages.
pub const MAX_PAGES: u64 = 1 << 20;

pub const NUM_REGS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);

    pub fn new(index: u8) -> Option<Reg> {
        ((index as usize) < NUM_REGS).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BindingTime {
    Supplied,
    Delayed,
}

impl BindingTime {
    pub fn as_str(self) -> &'static str {
        match self {
            BindingTime::Supplied => "supplied",
            BindingTime::Delayed => "delayed",
        }
    }
}

impl fmt::Display for BindingTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionClass {
    Supplied,
    Delayed,
    Scratch,
}

impl RegionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionClass::Supplied => "supplied",
            RegionClass::Delayed => "delayed",
            RegionClass::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub words: u64,
    pub class: RegionClass,
    /// First word address; always a multiple of [`PAGE_WORDS`].
    pub base: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.words
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn pages(&self) -> std::ops::Range<u64> {
        self.base / PAGE_WORDS..self.end().div_ceil(PAGE_WORDS)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InputTarget {
    Reg(Reg),
    Region(String),
}

impl fmt::Display for InputTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputTarget::Reg(r) => write!(f, "{r}"),
            InputTarget::Region(n) => f.write_str(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputBinding {
    pub target: InputTarget,
    pub time: BindingTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Xor,
    And,
    Or,
    Shl,
    Shr,
}

impl AluOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Xor => a ^ b,
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Shl => a.wrapping_shl(b as u32),
            AluOp::Shr => a.wrapping_shr(b as u32),
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Xor => "xor",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Shl => "shl",
            AluOp::Shr => "shr",
        }
    }

    fn from_mnemonic(s: &str) -> Option<AluOp> {
        Some(match s {
            "add" => AluOp::Add,
            "sub" => AluOp::Sub,
            "mul" => AluOp::Mul,
            "xor" => AluOp::Xor,
            "and" => AluOp::And,
            "or" => AluOp::Or,
            "shl" => AluOp::Shl,
            "shr" => AluOp::Shr,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    Const {
        dst: Reg,
        value: u64,
    },
    Mov {
        dst: Reg,
        src: Operand,
    },
    /// Two-operand arithmetic: `dst := dst op src`.
    Alu {
        op: AluOp,
        dst: Reg,
        src: Operand,
    },
    Load {
        dst: Reg,
        base: Reg,
        offset: i64,
    },
    Store {
        base: Reg,
        offset: i64,
        src: Operand,
    },
    Out {
        src: Operand,
    },
    Jmp {
        target: String,
    },
    /// Jumps to `if_zero` when `cond` is zero, otherwise to `if_nonzero`.
    Jz {
        cond: Reg,
        if_zero: String,
        if_nonzero: String,
    },
    Halt,
}

impl Instr {
    pub fn opcode(&self) -> &'static str {
        match self {
            Instr::Const { .. } => "const",
            Instr::Mov { .. } => "mov",
            Instr::Alu { op, .. } => op.mnemonic(),
            Instr::Load { .. } => "load",
            Instr::Store { .. } => "store",
            Instr::Out { .. } => "out",
            Instr::Jmp { .. } => "jmp",
            Instr::Jz { .. } => "jz",
            Instr::Halt => "halt",
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self, Instr::Jmp { .. } | Instr::Jz { .. } | Instr::Halt)
    }

    /// Instructions whose effect is visible in a program's output.
    pub fn is_effect(&self) -> bool {
        matches!(self, Instr::Out { .. } | Instr::Halt)
    }

    /// Register written, if any.
    pub fn def(&self) -> Option<Reg> {
        match self {
            Instr::Const { dst, .. } | Instr::Mov { dst, .. } | Instr::Alu { dst, .. } | Instr::Load { dst, .. } => {
                Some(*dst)
            }
            _ => None,
        }
    }

    /// Registers read. `halt` reads r0, the exit register.
    pub fn uses(&self) -> Vec<Reg> {
        fn op(o: &Operand) -> Option<Reg> {
            match o {
                Operand::Reg(r) => Some(*r),
                Operand::Imm(_) => None,
            }
        }
        let mut out = Vec::with_capacity(2);
        match self {
            Instr::Const { .. } | Instr::Jmp { .. } => {}
            Instr::Mov { src, .. } | Instr::Out { src } => out.extend(op(src)),
            Instr::Alu { dst, src, .. } => {
                out.push(*dst);
                out.extend(op(src));
            }
            Instr::Load { base, .. } => out.push(*base),
            Instr::Store { base, src, .. } => {
                out.push(*base);
                out.extend(op(src));
            }
            Instr::Jz { cond, .. } => out.push(*cond),
            Instr::Halt => out.push(Reg::R0),
        }
        out.dedup();
        out
    }

    pub fn targets(&self) -> Vec<&str> {
        match self {
            Instr::Jmp { target } => vec![target.as_str()],
            Instr::Jz {
                if_zero, if_nonzero, ..
            } => vec![if_zero.as_str(), if_nonzero.as_str()],
            _ => Vec::new(),
        }
    }
}

fn fmt_offset(offset: i64) -> String {
    if offset < 0 {
        format!("-{}", offset.unsigned_abs())
    } else {
        format!("+{offset}")
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instr::Const { dst, value } => write!(f, "const {dst}, {value}"),
            Instr::Mov { dst, src } => write!(f, "mov {dst}, {src}"),
            Instr::Alu { op, dst, src } => write!(f, "{} {dst}, {src}", op.mnemonic()),
            Instr::Load { dst, base, offset } => {
                write!(f, "load {dst}, [{base}{}]", fmt_offset(*offset))
            }
            Instr::Store { base, offset, src } => {
                write!(f, "store [{base}{}], {src}", fmt_offset(*offset))
            }
            Instr::Out { src } => write!(f, "out {src}"),
            Instr::Jmp { target } => write!(f, "jmp {target}"),
            Instr::Jz {
                cond,
                if_zero,
                if_nonzero,
            } => {
                write!(f, "jz {cond}, {if_zero}, {if_nonzero}")
            }
            Instr::Halt => f.write_str("halt"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instr>,
}

impl Block {
    pub fn terminator(&self) -> Option<&Instr> {
        self.instrs.last().filter(|i| i.is_terminator())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub regions: Vec<Region>,
    pub inputs: Vec<InputBinding>,
    pub blocks: Vec<Block>,
    /// Entry label; the first declared block in the text format.
    pub entry: String,
}

impl Program {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn block(&self, label: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn entry_index(&self) -> Option<usize> {
        self.block_index(&self.entry)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.name == name)
    }

    /// Index of the region containing `addr`.
    pub fn region_at(&self, addr: u64) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(addr))
    }

    /// One past the highest page covered by any region.
    pub fn total_pages(&self) -> u64 {
        self.regions
            .iter()
            .map(|r| r.pages().end)
            .max()
            .unwrap_or(FIRST_REGION_PAGE)
    }

    /// Pages covered by declared regions, in ascending order.
    pub fn mapped_pages(&self) -> BTreeSet<u64> {
        self.regions.iter().flat_map(|r| r.pages()).collect()
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instrs.len()).sum()
    }

    pub fn binding(&self, target: &InputTarget) -> Option<BindingTime> {
        self.inputs.iter().find(|b| &b.target == target).map(|b| b.time)
    }

    /// Successor block indices, in terminator order (`jz`: taken-if-zero first).
    pub fn successors(&self, block: usize) -> Vec<usize> {
        self.blocks[block]
            .terminator()
            .map(|t| t.targets().into_iter().filter_map(|l| self.block_index(l)).collect())
            .unwrap_or_default()
    }
}

/// Successor map keyed by block label.
pub fn cfg(p: &Program) -> BTreeMap<String, Vec<String>> {
    p.blocks
        .iter()
        .map(|b| {
            let succ = b
                .terminator()
                .map(|t| t.targets().into_iter().map(str::to_owned).collect())
                .unwrap_or_default();
            (b.label.clone(), succ)
        })
        .collect()
}

/// Returns every violated program invariant; empty means well formed.
pub fn validate(p: &Program) -> Vec<String> {
    let mut diags = Vec::new();
    if p.blocks.is_empty() {
        diags.push("program has no blocks".to_owned());
    }
    if p.block_index(&p.entry).is_none() {
        diags.push(format!("entry label {} does not name a block", p.entry));
    }

    let mut seen = BTreeSet::new();
    for b in &p.blocks {
        if !seen.insert(b.label.as_str()) {
            diags.push(format!("duplicate label {}", b.label));
        }
    }

    for b in &p.blocks {
        match b.instrs.last() {
            Some(last) if last.is_terminator() => {}
            _ => diags.push(format!("block {}: missing terminator", b.label)),
        }
        for (i, ins) in b.instrs.iter().enumerate() {
            if ins.is_terminator() && i + 1 != b.instrs.len() {
                diags.push(format!(
                    "block {}[{i}]: terminator `{}` before end of block",
                    b.label,
                    ins.opcode()
                ));
            }
            for t in ins.targets() {
                if p.block_index(t).is_none() {
                    diags.push(format!("block {}[{i}]: unknown label {t}", b.label));
                }
            }
        }
    }

    let mut names = BTreeSet::new();
    for r in &p.regions {
        if !names.insert(r.name.as_str()) {
            diags.push(format!("duplicate region {}", r.name));
        }
        if r.words == 0 {
            diags.push(format!("region {}: size must be at least one word", r.name));
        }
        if r.base % PAGE_WORDS != 0 {
            diags.push(format!("region {}: base {} is not page-aligned", r.name, r.base));
        }
        if r.pages().end > MAX_PAGES {
            diags.push(format!("region {}: exceeds the address space", r.name));
        }
    }
    for (i, a) in p.regions.iter().enumerate() {
        for b in &p.regions[i + 1..] {
            if a.base < b.end() && b.base < a.end() {
                diags.push(format!("regions {}/{} overlap", a.name, b.name));
            }
        }
    }

    let mut bound = BTreeSet::new();
    for inp in &p.inputs {
        if !bound.insert(inp.target.clone()) {
            diags.push(format!("input {}: bound more than once", inp.target));
        }
        if let InputTarget::Region(name) = &inp.target {
            match p.region(name) {
                None => diags.push(format!("input {name}: unknown region")),
                Some(r) => {
                    let ok = matches!(
                        (r.class, inp.time),
                        (RegionClass::Supplied, BindingTime::Supplied) | (RegionClass::Delayed, BindingTime::Delayed)
                    );
                    if !ok {
                        diags.push(format!(
                            "input {name}: bound {} but region is {}",
                            inp.time,
                            r.class.as_str()
                        ));
                    }
                }
            }
        }
    }
    diags
}

// ---------------------------------------------------------------------------
// Text format

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}:{col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let bytes = line.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() || c == b',' {
            i += 1;
            continue;
        }
        let start = i;
        if c == b'[' {
            while i < bytes.len() && bytes[i] != b']' {
                i += 1;
            }
            i = (i + 1).min(bytes.len());
        } else if c == b'\'' {
            i += 1;
            while i < bytes.len() && bytes[i] != b'\'' {
                i += 1;
            }
            i = (i + 1).min(bytes.len());
        } else {
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b',' {
                i += 1;
            }
        }
        toks.push(Tok {
            text: &line[start..i],
            col: start + 1,
        });
    }
    toks
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub fn parse_reg(s: &str) -> Option<Reg> {
    let n = s.strip_prefix('r')?;
    if n.is_empty() || (n.len() > 1 && n.starts_with('0')) {
        return None;
    }
    n.parse::<u8>().ok().and_then(Reg::new)
}

/// Parses a numeric literal: decimal (optionally negative, wrapping),
/// `0x` hex, or a quoted ASCII character.
pub fn parse_number(s: &str) -> Option<u64> {
    if let Some(inner) = s.strip_prefix('\'').and_then(|r| r.strip_suffix('\'')) {
        let mut chars = inner.chars();
        let c = chars.next()?;
        return (chars.next().is_none() && c.is_ascii()).then_some(c as u64);
    }
    if let Some(hex) = s.strip_prefix("0x") {
        return u64::from_str_radix(hex, 16).ok();
    }
    if let Some(neg) = s.strip_prefix('-') {
        return neg.parse::<u64>().ok().map(|v| v.wrapping_neg());
    }
    s.parse().ok()
}

struct Parser<'a> {
    line: usize,
    regions: &'a [Region],
}

impl Parser<'_> {
    fn err(&self, col: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            col,
            message: message.into(),
        }
    }

    fn reg(&self, t: &Tok) -> Result<Reg, ParseError> {
        parse_reg(t.text).ok_or_else(|| self.err(t.col, format!("expected register, found `{}`", t.text)))
    }

    fn imm(&self, t: &Tok) -> Result<u64, ParseError> {
        if let Some(rest) = t.text.strip_prefix('&') {
            let (name, extra) = match rest.split_once('+') {
                Some((n, k)) => {
                    let k = parse_number(k).ok_or_else(|| self.err(t.col, format!("bad offset in `{}`", t.text)))?;
                    (n, k)
                }
                None => (rest, 0),
            };
            let region = self
                .regions
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| self.err(t.col, format!("unknown region {name}")))?;
            return Ok(region.base.wrapping_add(extra));
        }
        parse_number(t.text).ok_or_else(|| self.err(t.col, format!("expected immediate, found `{}`", t.text)))
    }

    fn operand(&self, t: &Tok) -> Result<Operand, ParseError> {
        match parse_reg(t.text) {
            Some(r) => Ok(Operand::Reg(r)),
            None => self.imm(t).map(Operand::Imm),
        }
    }

    fn mem(&self, t: &Tok) -> Result<(Reg, i64), ParseError> {
        let bad = || self.err(t.col, format!("expected memory operand `[rN+k]`, found `{}`", t.text));
        let inner: String = t
            .text
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(bad)?
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let split = inner.find(['+', '-']);
        let (base, off) = match split {
            Some(i) => (&inner[..i], &inner[i..]),
            None => (inner.as_str(), "+0"),
        };
        let base = parse_reg(base).ok_or_else(bad)?;
        let magnitude: i64 = off[1..].parse().map_err(|_| bad())?;
        let offset = if off.starts_with('-') { -magnitude } else { magnitude };
        Ok((base, offset))
    }

    fn label(&self, t: &Tok) -> Result<String, ParseError> {
        if is_ident(t.text) {
            Ok(t.text.to_owned())
        } else {
            Err(self.err(t.col, format!("expected label, found `{}`", t.text)))
        }
    }

    fn arity(&self, toks: &[Tok], n: usize) -> Result<(), ParseError> {
        if toks.len() != n + 1 {
            return Err(self.err(
                toks[0].col,
                format!("`{}` takes {n} operand(s), found {}", toks[0].text, toks.len() - 1),
            ));
        }
        Ok(())
    }

    fn instr(&self, toks: &[Tok]) -> Result<Instr, ParseError> {
        let op = toks[0].text;
        let ins = match op {
            "const" => {
                self.arity(toks, 2)?;
                Instr::Const {
                    dst: self.reg(&toks[1])?,
                    value: self.imm(&toks[2])?,
                }
            }
            "mov" => {
                self.arity(toks, 2)?;
                Instr::Mov {
                    dst: self.reg(&toks[1])?,
                    src: self.operand(&toks[2])?,
                }
            }
            "load" => {
                self.arity(toks, 2)?;
                let (base, offset) = self.mem(&toks[2])?;
                Instr::Load {
                    dst: self.reg(&toks[1])?,
                    base,
                    offset,
                }
            }
            "store" => {
                self.arity(toks, 2)?;
                let (base, offset) = self.mem(&toks[1])?;
                Instr::Store {
                    base,
                    offset,
                    src: self.operand(&toks[2])?,
                }
            }
            "out" => {
                self.arity(toks, 1)?;
                Instr::Out {
                    src: self.operand(&toks[1])?,
                }
            }
            "jmp" => {
                self.arity(toks, 1)?;
                Instr::Jmp {
                    target: self.label(&toks[1])?,
                }
            }
            "jz" => {
                self.arity(toks, 3)?;
                Instr::Jz {
                    cond: self.reg(&toks[1])?,
                    if_zero: self.label(&toks[2])?,
                    if_nonzero: self.label(&toks[3])?,
                }
            }
            "halt" => {
                self.arity(toks, 0)?;
                Instr::Halt
            }
            other => match AluOp::from_mnemonic(other) {
                Some(op) => {
                    self.arity(toks, 2)?;
                    Instr::Alu {
                        op,
                        dst: self.reg(&toks[1])?,
                        src: self.operand(&toks[2])?,
                    }
                }
                None => return Err(self.err(toks[0].col, format!("unknown opcode `{other}`"))),
            },
        };
        Ok(ins)
    }
}

/// Parses the line-oriented text format. Rejects syntax errors, duplicate
/// labels, unknown opcodes, references to undefined labels and regions, and
/// regions that overflow the address space. Structural invariants such as
/// block terminators are left to [`validate`].
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut name: Option<String> = None;
    let mut regions: Vec<Region> = Vec::new();
    let mut inputs = Vec::new();
    let mut blocks: Vec<Block> = Vec::new();
    let mut next_page = FIRST_REGION_PAGE;
    // (label, line, col) for every jump target, checked once all blocks are known.
    let mut refs: Vec<(String, usize, usize)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let toks = tokenize(line);
        if toks.is_empty() {
            continue;
        }
        let ps = Parser {
            line: lineno + 1,
            regions: &regions,
        };
        match toks[0].text {
            "program" => {
                if toks.len() != 2 || !is_ident(toks[1].text) {
                    return Err(ps.err(toks[0].col, "expected `program <name>`"));
                }
                if name.is_some() {
                    return Err(ps.err(toks[0].col, "duplicate `program` header"));
                }
                name = Some(toks[1].text.to_owned());
            }
            "region" => {
                if toks.len() != 4 || !is_ident(toks[1].text) {
                    return Err(ps.err(toks[0].col, "expected `region <name> <class> words=<n>`"));
                }
                let rname = toks[1].text;
                if regions.iter().any(|r| r.name == rname) {
                    return Err(ps.err(toks[1].col, format!("duplicate region {rname}")));
                }
                let class = match toks[2].text {
                    "supplied" => RegionClass::Supplied,
                    "delayed" => RegionClass::Delayed,
                    "scratch" => RegionClass::Scratch,
                    other => return Err(ps.err(toks[2].col, format!("unknown region class `{other}`"))),
                };
                let words = toks[3]
                    .text
                    .strip_prefix("words=")
                    .and_then(parse_number)
                    .filter(|w| *w >= 1)
                    .ok_or_else(|| ps.err(toks[3].col, "expected `words=<n>` with n >= 1"))?;
                let pages = words.div_ceil(PAGE_WORDS);
                if next_page + pages > MAX_PAGES {
                    return Err(ps.err(
                        toks[3].col,
                        format!("region {rname} overflows the {MAX_PAGES}-page address space"),
                    ));
                }
                regions.push(Region {
                    name: rname.to_owned(),
                    words,
                    class,
                    base: next_page * PAGE_WORDS,
                });
                next_page += pages;
            }
            "input" => {
                if toks.len() != 3 {
                    return Err(ps.err(toks[0].col, "expected `input <target> <supplied|delayed>`"));
                }
                let target = match parse_reg(toks[1].text) {
                    Some(r) => InputTarget::Reg(r),
                    None if regions.iter().any(|r| r.name == toks[1].text) => {
                        InputTarget::Region(toks[1].text.to_owned())
                    }
                    None => return Err(ps.err(toks[1].col, format!("unknown input target {}", toks[1].text))),
                };
                let time = match toks[2].text {
                    "supplied" => BindingTime::Supplied,
                    "delayed" => BindingTime::Delayed,
                    other => return Err(ps.err(toks[2].col, format!("unknown binding time `{other}`"))),
                };
                inputs.push(InputBinding { target, time });
            }
            "block" => {
                let label = toks
                    .get(1)
                    .and_then(|t| t.text.strip_suffix(':'))
                    .filter(|l| toks.len() == 2 && is_ident(l))
                    .ok_or_else(|| ps.err(toks[0].col, "expected `block <label>:`"))?;
                if blocks.iter().any(|b| b.label == label) {
                    return Err(ps.err(toks[1].col, format!("duplicate label {label}")));
                }
                blocks.push(Block {
                    label: label.to_owned(),
                    instrs: Vec::new(),
                });
            }
            _ => {
                let ins = ps.instr(&toks)?;
                let Some(block) = blocks.last_mut() else {
                    return Err(ps.err(toks[0].col, "instruction outside of a block"));
                };
                let targets: Vec<String> = ins.targets().into_iter().map(str::to_owned).collect();
                let first = toks.len() - targets.len();
                for (k, t) in targets.into_iter().enumerate() {
                    refs.push((t, lineno + 1, toks[first + k].col));
                }
                block.instrs.push(ins);
            }
        }
    }

    for (label, line, col) in refs {
        if !blocks.iter().any(|b| b.label == label) {
            return Err(ParseError {
                line,
                col,
                message: format!("unknown label {label}"),
            });
        }
    }

    let name = name.ok_or(ParseError {
        line: 1,
        col: 1,
        message: "missing `program <name>` header".into(),
    })?;
    let entry = blocks.first().map(|b| b.label.clone()).ok_or(ParseError {
        line: 1,
        col: 1,
        message: "program has no blocks".into(),
    })?;
    Ok(Program {
        name,
        regions,
        inputs,
        blocks,
        entry,
    })
}

/// Renders a program in the text format. The entry block is printed first.
pub fn pretty_print(p: &Program) -> String {
    let mut out = format!("program {}\n", p.name);
    for r in &p.regions {
        out.push_str(&format!("region {} {} words={}\n", r.name, r.class.as_str(), r.words));
    }
    for i in &p.inputs {
        out.push_str(&format!("input {} {}\n", i.target, i.time));
    }
    let entry = p.entry_index().unwrap_or(0);
    let order = std::iter::once(entry).chain((0..p.blocks.len()).filter(|&i| i != entry));
    for bi in order {
        let Some(b) = p.blocks.get(bi) else { continue };
        out.push_str(&format!("\nblock {}:\n", b.label));
        for ins in &b.instrs {
            out.push_str(&format!("  {ins}\n"));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Inputs

/// Concrete values for some of a program's input bindings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InputAssignment {
    pub regs: BTreeMap<Reg, u64>,
    pub regions: BTreeMap<String, Vec<u64>>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InputError {
    #[error("malformed binding `{0}` (expected name=value)")]
    Malformed(String),
    #[error("unknown input target {0}")]
    UnknownTarget(String),
    #[error("bad value for {target}: {value}")]
    BadValue { target: String, value: String },
}

impl InputAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_reg(mut self, r: Reg, v: u64) -> Self {
        self.regs.insert(r, v);
        self
    }

    pub fn with_region(mut self, name: &str, words: Vec<u64>) -> Self {
        self.regions.insert(name.to_owned(), words);
        self
    }

    /// Zero-terminated string, one character per word.
    pub fn with_str(self, name: &str, s: &str) -> Self {
        self.with_region(name, encode_str(s))
    }

    pub fn targets(&self) -> impl Iterator<Item = InputTarget> + '_ {
        self.regs
            .keys()
            .map(|r| InputTarget::Reg(*r))
            .chain(self.regions.keys().map(|n| InputTarget::Region(n.clone())))
    }

    pub fn is_empty(&self) -> bool {
        self.regs.is_empty() && self.regions.is_empty()
    }

    /// Union of two assignments; entries in `other` win on conflict.
    pub fn merged(&self, other: &InputAssignment) -> InputAssignment {
        let mut out = self.clone();
        out.regs.extend(other.regs.iter().map(|(k, v)| (*k, *v)));
        out.regions
            .extend(other.regions.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Restricts the assignment to targets bound with the given time.
    pub fn restricted(&self, p: &Program, time: BindingTime) -> InputAssignment {
        let mut out = InputAssignment::new();
        for (r, v) in &self.regs {
            if p.binding(&InputTarget::Reg(*r)) == Some(time) {
                out.regs.insert(*r, *v);
            }
        }
        for (n, v) in &self.regions {
            if p.binding(&InputTarget::Region(n.clone())) == Some(time) {
                out.regions.insert(n.clone(), v.clone());
            }
        }
        out
    }

    /// Parses `target=value`. Values: a number, `&region` (its base
    /// address), a comma-separated word list, or a double-quoted string.
    pub fn add_binding(&mut self, p: &Program, text: &str) -> Result<(), InputError> {
        let (target, value) = text
            .split_once('=')
            .ok_or_else(|| InputError::Malformed(text.to_owned()))?;
        let bad = || InputError::BadValue {
            target: target.to_owned(),
            value: value.to_owned(),
        };
        let word = |s: &str| -> Option<u64> {
            let s = s.trim();
            match s.strip_prefix('&') {
                Some(name) => p.region(name).map(|r| r.base),
                None => parse_number(s),
            }
        };
        if let Some(r) = parse_reg(target) {
            self.regs.insert(r, word(value).ok_or_else(bad)?);
        } else if p.region(target).is_some() {
            let words = if let Some(s) = value.strip_prefix('"').and_then(|v| v.strip_suffix('"')) {
                encode_str(s)
            } else if value.is_empty() {
                Vec::new()
            } else {
                value.split(',').map(word).collect::<Option<Vec<_>>>().ok_or_else(bad)?
            };
            self.regions.insert(target.to_owned(), words);
        } else {
            return Err(InputError::UnknownTarget(target.to_owned()));
        }
        Ok(())
    }
}

pub fn encode_str(s: &str) -> Vec<u64> {
    s.bytes().map(u64::from).chain(std::iter::once(0)).collect()
}

// ---------------------------------------------------------------------------
// Reference interpreter

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    pub tape: Vec<u64>,
    pub r0: u64,
    pub steps: u64,
    /// Loads executed per region, indexed like `Program::regions`.
    pub region_loads: Vec<u64>,
}

impl RunOutcome {
    /// The observable result compared by equivalence checks.
    pub fn observation(&self) -> (&[u64], u64) {
        (&self.tape, self.r0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RunError {
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("input {0} is not bound")]
    MissingInput(InputTarget),
    #[error("input {0} is not declared by the program")]
    UnknownInput(InputTarget),
    #[error("input {name}: {given} words exceed region size {size}")]
    InputTooLarge { name: String, given: usize, size: u64 },
    #[error("out-of-region access at address {addr} ({block}[{index}])")]
    OutOfRegion { addr: u64, block: String, index: usize },
    #[error("fuel exhausted after {0} steps")]
    FuelExhausted(u64),
}

/// Sparse word memory, zero-filled.
#[derive(Default)]
struct FlatMemory {
    pages: HashMap<u64, Box<[u64]>>,
}

impl FlatMemory {
    fn read(&self, addr: u64) -> u64 {
        self.pages
            .get(&(addr / PAGE_WORDS))
            .map_or(0, |p| p[(addr % PAGE_WORDS) as usize])
    }

    fn write(&mut self, addr: u64, v: u64) {
        let page = self
            .pages
            .entry(addr / PAGE_WORDS)
            .or_insert_with(|| vec![0; PAGE_WORDS as usize].into_boxed_slice());
        page[(addr % PAGE_WORDS) as usize] = v;
    }
}

/// Checks that `a` binds every declared input and nothing else.
pub fn check_assignment(p: &Program, a: &InputAssignment) -> Result<(), RunError> {
    for t in a.targets() {
        if p.binding(&t).is_none() {
            return Err(RunError::UnknownInput(t));
        }
    }
    for b in &p.inputs {
        let present = match &b.target {
            InputTarget::Reg(r) => a.regs.contains_key(r),
            InputTarget::Region(n) => a.regions.contains_key(n),
        };
        if !present {
            return Err(RunError::MissingInput(b.target.clone()));
        }
    }
    for (name, words) in &a.regions {
        let r = p
            .region(name)
            .ok_or_else(|| RunError::UnknownInput(InputTarget::Region(name.clone())))?;
        if words.len() as u64 > r.words {
            return Err(RunError::InputTooLarge {
                name: name.clone(),
                given: words.len(),
                size: r.words,
            });
        }
    }
    Ok(())
}

/// Executes `p` from its entry block until `halt`.
pub fn run_program(p: &Program, a: &InputAssignment, fuel: u64) -> Result<RunOutcome, RunError> {
    let diags = validate(p);
    if !diags.is_empty() {
        return Err(RunError::Invalid(diags.join("; ")));
    }
    check_assignment(p, a)?;

    let mut regs = [0u64; NUM_REGS];
    for (r, v) in &a.regs {
        regs[r.index()] = *v;
    }
    let mut mem = FlatMemory::default();
    for (name, words) in &a.regions {
        let base = p.region(name).map(|r| r.base).unwrap_or_default();
        for (i, w) in words.iter().enumerate() {
            if *w != 0 {
                mem.write(base + i as u64, *w);
            }
        }
    }

    let index: HashMap<&str, usize> = p
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.label.as_str(), i))
        .collect();
    let mut tape = Vec::new();
    let mut region_loads = vec![0u64; p.regions.len()];
    let mut steps = 0u64;
    let mut block = index[p.entry.as_str()];
    let val = |regs: &[u64; NUM_REGS], o: &Operand| match o {
        Operand::Reg(r) => regs[r.index()],
        Operand::Imm(v) => *v,
    };

    loop {
        let b = &p.blocks[block];
        let mut next = None;
        for (i, ins) in b.instrs.iter().enumerate() {
            if steps >= fuel {
                return Err(RunError::FuelExhausted(steps));
            }
            steps += 1;
            let fault = |addr| RunError::OutOfRegion {
                addr,
                block: b.label.clone(),
                index: i,
            };
            match ins {
                Instr::Const { dst, value } => regs[dst.index()] = *value,
                Instr::Mov { dst, src } => regs[dst.index()] = val(&regs, src),
                Instr::Alu { op, dst, src } => regs[dst.index()] = op.apply(regs[dst.index()], val(&regs, src)),
                Instr::Load { dst, base, offset } => {
                    let addr = regs[base.index()].wrapping_add(*offset as u64);
                    let ri = p.region_at(addr).ok_or_else(|| fault(addr))?;
                    region_loads[ri] += 1;
                    regs[dst.index()] = mem.read(addr);
                }
                Instr::Store { base, offset, src } => {
                    let addr = regs[base.index()].wrapping_add(*offset as u64);
                    p.region_at(addr).ok_or_else(|| fault(addr))?;
                    mem.write(addr, val(&regs, src));
                }
                Instr::Out { src } => tape.push(val(&regs, src)),
                Instr::Jmp { target } => next = Some(index[target.as_str()]),
                Instr::Jz {
                    cond,
                    if_zero,
                    if_nonzero,
                } => {
                    let t = if regs[cond.index()] == 0 { if_zero } else { if_nonzero };
                    next = Some(index[t.as_str()]);
                }
                Instr::Halt => {
                    return Ok(RunOutcome {
                        tape,
                        r0: regs[0],
                        steps,
                        region_loads,
                    });
                }
            }
        }
        block = next.expect("validated blocks end in a terminator");
    }
}
