//! Benchmark programs with their supplied inputs and a seeded sampler for
//! delayed inputs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ir::{self, encode_str, parse_program, InputAssignment, Program, Reg, PAGE_WORDS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BenchSpec {
    /// `x^n`; n supplied, x delayed.
    Power { n: u64 },
    /// Dot product of two n-vectors; the first vector and n supplied.
    DotProduct { n: u64 },
    /// m×m kernel convolved over an n×n image; the kernel supplied.
    Filter { m: u64, n: u64 },
    /// Naive substring search; the pattern supplied, the text delayed.
    Matcher { pattern: String },
    /// Writes every one of `pages` stack pages `n` times per outer step.
    Stack { pages: u64, n: u64 },
    /// Word-mixing loop over a `bits`-bit message; the first half supplied.
    Mix { bits: u64 },
}

impl fmt::Display for BenchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchSpec::Power { n } => write!(f, "power({n})"),
            BenchSpec::DotProduct { n } => write!(f, "dotproduct({n})"),
            BenchSpec::Filter { m, n } => write!(f, "filter({m},{n})"),
            BenchSpec::Matcher { pattern } => write!(f, "matcher(\"{pattern}\")"),
            BenchSpec::Stack { pages, n } => write!(f, "stack({pages},{n})"),
            BenchSpec::Mix { bits } => write!(f, "mix({bits})"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BenchError {
    #[error("unknown benchmark `{0}` (expected power, dotproduct, filter, matcher, stack or mix)")]
    Unknown(String),
    #[error("{name}: {message}")]
    BadParams { name: String, message: String },
}

/// Outer iterations of the stack benchmark (its supplied r1).
pub const STACK_STEPS: u64 = 2;

/// Alphabet of sampled matcher texts.
pub const MATCHER_ALPHABET: &[u8] = b"hatx";

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub spec: BenchSpec,
    pub program: Program,
    pub supplied: InputAssignment,
    /// Generated text, with comments and symbolic addresses.
    pub source: String,
}

fn bad(name: &str, message: impl Into<String>) -> BenchError {
    BenchError::BadParams {
        name: name.to_owned(),
        message: message.into(),
    }
}

fn reg(i: u8) -> Reg {
    Reg::new(i).expect("register index below 16")
}

fn check_range(name: &str, what: &str, v: u64, lo: u64, hi: u64) -> Result<(), BenchError> {
    if v < lo || v > hi {
        return Err(bad(name, format!("{what}={v} outside {lo}..={hi}")));
    }
    Ok(())
}

impl BenchSpec {
    /// Parses `name`, `name(a)`, `name(a,b)` or `matcher("text")`;
    /// missing parameters take their defaults.
    pub fn parse(text: &str) -> Result<BenchSpec, BenchError> {
        let text = text.trim();
        let (name, args) = match text.split_once('(') {
            Some((n, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(|| bad(n, "missing `)`"))?;
                (n.trim(), Some(inner.trim()))
            }
            None => (text, None),
        };
        let nums = |count: usize| -> Result<Vec<Option<u64>>, BenchError> {
            let mut out = vec![None; count];
            if let Some(args) = args.filter(|a| !a.is_empty()) {
                let parts: Vec<&str> = args.split(',').map(str::trim).collect();
                if parts.len() > count {
                    return Err(bad(name, format!("takes at most {count} parameter(s)")));
                }
                for (slot, p) in out.iter_mut().zip(parts) {
                    *slot = Some(p.parse().map_err(|_| bad(name, format!("bad parameter `{p}`")))?);
                }
            }
            Ok(out)
        };
        let spec = match name {
            "power" => BenchSpec::Power {
                n: nums(1)?[0].unwrap_or(16),
            },
            "dotproduct" => BenchSpec::DotProduct {
                n: nums(1)?[0].unwrap_or(8),
            },
            "filter" => {
                let v = nums(2)?;
                BenchSpec::Filter {
                    m: v[0].unwrap_or(3),
                    n: v[1].unwrap_or(8),
                }
            }
            "matcher" => {
                let pattern = match args {
                    None | Some("") => "hat".to_owned(),
                    Some(a) => a
                        .strip_prefix('"')
                        .and_then(|a| a.strip_suffix('"'))
                        .unwrap_or(a)
                        .to_owned(),
                };
                BenchSpec::Matcher { pattern }
            }
            "stack" => {
                let v = nums(2)?;
                BenchSpec::Stack {
                    pages: v[0].unwrap_or(16),
                    n: v[1].unwrap_or(4),
                }
            }
            "mix" => BenchSpec::Mix {
                bits: nums(1)?[0].unwrap_or(512),
            },
            other => return Err(BenchError::Unknown(other.to_owned())),
        };
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchSpec::Power { .. } => "power",
            BenchSpec::DotProduct { .. } => "dotproduct",
            BenchSpec::Filter { .. } => "filter",
            BenchSpec::Matcher { .. } => "matcher",
            BenchSpec::Stack { .. } => "stack",
            BenchSpec::Mix { .. } => "mix",
        }
    }
}

/// The six benchmarks at their default sizes.
pub fn default_specs() -> Vec<BenchSpec> {
    ["power", "dotproduct", "filter", "matcher", "stack", "mix"]
        .iter()
        .map(|n| BenchSpec::parse(n).expect("default spec parses"))
        .collect()
}

pub fn make_benchmark(spec: &BenchSpec) -> Result<Benchmark, BenchError> {
    let name = spec.name();
    let (source, supplied) = match spec {
        BenchSpec::Power { n } => {
            check_range(name, "n", *n, 0, 4096)?;
            (power_source(), InputAssignment::new().with_reg(reg(1), *n))
        }
        BenchSpec::DotProduct { n } => {
            check_range(name, "n", *n, 1, 4096)?;
            let n = *n;
            let va: Vec<u64> = (0..n).map(|i| 3 * i + 1).collect();
            (
                dotproduct_source(n),
                InputAssignment::new().with_reg(reg(1), n).with_region("va", va),
            )
        }
        BenchSpec::Filter { m, n } => {
            check_range(name, "m", *m, 1, 7)?;
            check_range(name, "n", *n, *m, 64)?;
            let kern: Vec<u64> = (0..m * m).map(|i| [1, 2, 1, 2, 4][(i % 5) as usize]).collect();
            (filter_source(*m, *n), InputAssignment::new().with_region("kern", kern))
        }
        BenchSpec::Matcher { pattern } => {
            if !pattern.is_ascii() || pattern.bytes().any(|b| b == 0) || pattern.len() > 62 {
                return Err(bad(name, "pattern must be ASCII, NUL-free and at most 62 characters"));
            }
            let pat = encode_str(pattern);
            (matcher_source(), InputAssignment::new().with_region("pat", pat))
        }
        BenchSpec::Stack { pages, n } => {
            check_range(name, "pages", *pages, 1, 256)?;
            check_range(name, "n", *n, 1, PAGE_WORDS)?;
            (
                stack_source(*pages, *n),
                InputAssignment::new().with_reg(reg(1), STACK_STEPS),
            )
        }
        BenchSpec::Mix { bits } => {
            if *bits == 0 || !bits.is_multiple_of(128) || *bits > 8192 {
                return Err(bad(
                    name,
                    format!("bits={bits} must be a positive multiple of 128 up to 8192"),
                ));
            }
            let half = bits / 128;
            let msga: Vec<u64> = (0..half)
                .map(|i| 0x0123_4567_89ab_cdef_u64.rotate_left(i as u32 * 8))
                .collect();
            (mix_source(*bits), InputAssignment::new().with_region("msga", msga))
        }
    };
    let program = parse_program(&source).map_err(|e| bad(name, format!("generated source: {e}")))?;
    let diags = ir::validate(&program);
    if !diags.is_empty() {
        return Err(bad(name, diags.join("; ")));
    }
    Ok(Benchmark {
        name: name.to_owned(),
        spec: spec.clone(),
        program,
        supplied,
        source,
    })
}

impl Benchmark {
    /// Deterministic delayed inputs for `seed`.
    pub fn sample_delayed(&self, seed: u64) -> InputAssignment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &self.program;
        match &self.spec {
            BenchSpec::Power { .. } => InputAssignment::new().with_reg(reg(2), rng.gen()),
            BenchSpec::DotProduct { n } => {
                InputAssignment::new().with_region("vb", (0..*n).map(|_| rng.gen_range(0..1 << 20)).collect())
            }
            BenchSpec::Filter { n, .. } => {
                InputAssignment::new().with_region("img", (0..n * n).map(|_| rng.gen_range(0..256)).collect())
            }
            BenchSpec::Matcher { .. } => {
                let len = rng.gen_range(0..=32);
                let text: String = (0..len)
                    .map(|_| MATCHER_ALPHABET[rng.gen_range(0..MATCHER_ALPHABET.len())] as char)
                    .collect();
                let base = p.region("str").expect("matcher has a str region").base;
                InputAssignment::new().with_str("str", &text).with_reg(reg(1), base)
            }
            BenchSpec::Stack { .. } => InputAssignment::new().with_reg(reg(2), rng.gen()),
            BenchSpec::Mix { bits } => {
                InputAssignment::new().with_region("msgb", (0..bits / 128).map(|_| rng.gen()).collect())
            }
        }
    }

    /// Supplied and delayed inputs together, for running the original.
    pub fn full_inputs(&self, seed: u64) -> InputAssignment {
        self.supplied.merged(&self.sample_delayed(seed))
    }

    /// File name of the shipped `.ir` copy of the default-size program.
    pub fn file_name(&self) -> String {
        format!("{}.ir", self.name)
    }
}

fn power_source() -> String {
    "program power
region stack scratch words=8192
input r1 supplied
input r2 delayed

block L1:
  const r0, 1
  const r3, &stack
  jmp L2

block L2:
  jz r1, L4, L3

block L3:
  mul r0, r2
  sub r1, 1
  store [r3+0], r1
  jmp L2

block L4:
  halt
"
    .to_owned()
}

fn dotproduct_source(n: u64) -> String {
    format!(
        "program dotproduct
region va supplied words={n}
region vb delayed words={n}
input va supplied
input vb delayed
input r1 supplied

block L1:
  const r0, 0
  const r2, &va
  const r3, &vb
  jmp L2

block L2:
  jz r1, L4, L3

block L3:
  load r4, [r2+0]
  load r5, [r3+0]
  mul r5, r4
  add r0, r5
  add r2, 1
  add r3, 1
  sub r1, 1
  jmp L2

block L4:
  halt
"
    )
}

fn filter_source(m: u64, n: u64) -> String {
    let out = n - m + 1;
    format!(
        "program filter
region kern supplied words={kw}
region img delayed words={iw}
input kern supplied
input img delayed

# r1 row, r2 column, r3 kernel row, r4 kernel column
block L1:
  const r1, 0
  const r6, &img
  jmp L2

block L2:
  mov r10, r1
  sub r10, {out}
  jz r10, L12, L3

block L3:
  const r2, 0
  mov r9, r6
  jmp L4

block L4:
  mov r10, r2
  sub r10, {out}
  jz r10, L11, L5

block L5:
  const r0, 0
  const r3, 0
  const r5, &kern
  mov r7, r9
  jmp L6

block L6:
  mov r10, r3
  sub r10, {m}
  jz r10, L10, L7

block L7:
  const r4, 0
  mov r8, r7
  jmp L8

block L8:
  mov r10, r4
  sub r10, {m}
  jz r10, L9, L13

block L13:
  load r11, [r5+0]
  load r12, [r8+0]
  mul r12, r11
  add r0, r12
  add r5, 1
  add r8, 1
  add r4, 1
  jmp L8

block L9:
  add r7, {n}
  add r3, 1
  jmp L6

block L10:
  out r0
  add r9, 1
  add r2, 1
  jmp L4

block L11:
  add r6, {n}
  add r1, 1
  jmp L2

block L12:
  halt
",
        kw = m * m,
        iw = n * n,
    )
}

fn matcher_source() -> String {
    "program matcher
region pat supplied words=64
region str delayed words=64
input pat supplied
input str delayed
input r1 delayed

# r1 scans the text; r4/r5 walk text and pattern in the inner loop
block L1:
  jmp L2

block L2:
  mov r4, r1
  const r5, &pat
  load r3, [r1+0]
  jz r3, L8, L3

block L3:
  load r6, [r5+0]
  jz r6, L7, L4

block L4:
  load r7, [r4+0]
  xor r7, r6
  jz r7, L5, L6

block L5:
  add r4, 1
  add r5, 1
  jmp L3

block L6:
  add r1, 1
  jmp L2

block L7:
  const r0, 1
  halt

block L8:
  const r0, 0
  halt
"
    .to_owned()
}

fn stack_source(pages: u64, n: u64) -> String {
    format!(
        "program stack
region stk scratch words={words}
input r1 supplied
input r2 delayed

# r1 outer steps, r4 pages left, r5 writes left on the current page
block L1:
  const r0, 0
  jmp L2

block L2:
  jz r1, L9, L3

block L3:
  const r3, &stk
  const r4, {pages}
  jmp L4

block L4:
  jz r4, L8, L5

block L5:
  const r5, {n}
  mov r6, r3
  jmp L6

block L6:
  jz r5, L7, L10

block L10:
  add r0, 1
  store [r6+0], r0
  add r6, 1
  sub r5, 1
  jmp L6

block L7:
  add r3, {pw}
  sub r4, 1
  jmp L4

block L8:
  sub r1, 1
  jmp L2

block L9:
  add r0, r2
  halt
",
        words = pages * PAGE_WORDS,
        pw = PAGE_WORDS,
    )
}

fn mix_source(bits: u64) -> String {
    let half = bits / 128;
    let words = 2 * half;
    format!(
        "program mix
region msga supplied words={half}
region msgb delayed words={half}
region sched scratch words={words}
input msga supplied
input msgb delayed

# copy both halves into the schedule, folding the supplied half into r9
block L1:
  const r1, 0
  const r2, &msga
  const r3, &sched
  const r9, 0x6a09e667f3bcc908
  jmp L2

block L2:
  mov r10, r1
  sub r10, {half}
  jz r10, L4, L3

block L3:
  load r4, [r2+0]
  store [r3+0], r4
  xor r9, r4
  mul r9, 0x100000001b3
  add r2, 1
  add r3, 1
  add r1, 1
  jmp L2

block L4:
  const r1, 0
  const r2, &msgb
  jmp L5

block L5:
  mov r10, r1
  sub r10, {half}
  jz r10, L7, L6

block L6:
  load r4, [r2+0]
  store [r3+0], r4
  add r2, 1
  add r3, 1
  add r1, 1
  jmp L5

# mixing rounds over the schedule
block L7:
  const r1, 0
  const r3, &sched
  const r0, 0x5be0cd19137e2179
  jmp L8

block L8:
  mov r10, r1
  sub r10, {words}
  jz r10, L10, L9

block L9:
  load r4, [r3+0]
  mov r5, r0
  shl r5, 5
  mov r6, r0
  shr r6, 3
  xor r5, r6
  add r5, r4
  add r5, r1
  mov r0, r5
  add r3, 1
  add r1, 1
  jmp L8

block L10:
  xor r0, r9
  out r0
  halt
"
    )
}
