//! Command-line front end. `main.rs` only forwards to [`run`].

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{default_specs, make_benchmark, BenchSpec, Benchmark};
use crate::bta::{analyze, congruence_violations};
use crate::ir::{self, parse_program, run_program, InputAssignment, Program};
use crate::residual::canonicalize_labels;
use crate::specializer::{specialize, SpecConfig};
use crate::statestore::Metrics;

/// Step budget for each program run during equivalence checks.
pub const RUN_FUEL: u64 = 200_000_000;

#[derive(Parser, Debug)]
#[command(
    name = "genext",
    version,
    about = "Generating-extension specializer for a paged basic-block IR"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the binding-time classification of every instruction.
    Bta { file: PathBuf },
    /// Execute a program on the given inputs.
    Run {
        file: PathBuf,
        /// Input binding `target=value` (number, `&region`, `a,b,c` or `"text"`).
        #[arg(long = "input", short = 'i')]
        inputs: Vec<String>,
        #[arg(long, default_value_t = RUN_FUEL)]
        fuel: u64,
    },
    /// Specialize a program to its supplied inputs.
    Specialize {
        file: PathBuf,
        /// Supplied binding `target=value`.
        #[arg(long = "supplied", short = 's')]
        supplied: Vec<String>,
        /// Write the residual program here instead of standard output.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
        /// Rename residual blocks to B0, B1, ... in emission order.
        #[arg(long)]
        canonical: bool,
        #[command(flatten)]
        modes: ModeArgs,
        #[arg(long)]
        json: bool,
    },
    /// Run benchmarks under the experiment grid and check equivalence.
    Bench {
        /// Benchmarks such as `power`, `power(64)` or `matcher("hat")`; default is the whole suite.
        names: Vec<String>,
        /// `all` or a comma list of cells `yy,yn,ny,nn` (CoW then fingerprint).
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        modes: ModeArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        samples: u64,
        #[arg(long)]
        json: bool,
    },
    /// Print the source of a benchmark program, or write the default suite to a directory.
    Show {
        name: Option<String>,
        #[arg(long)]
        write_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Copy)]
pub struct ModeArgs {
    #[arg(long)]
    pub no_cow: bool,
    #[arg(long)]
    pub no_fingerprint: bool,
    #[arg(long, default_value_t = SpecConfig::default().max_states)]
    pub max_states: u64,
}

impl ModeArgs {
    fn config(&self, cow: bool, fingerprint: bool) -> SpecConfig {
        SpecConfig {
            max_states: self.max_states,
            ..SpecConfig::with_modes(cow, fingerprint)
        }
    }
}

/// One grid cell as `(cow, fingerprint)`.
pub type Cell = (bool, bool);

pub fn parse_grid(text: &str) -> Result<Vec<Cell>> {
    if text == "all" {
        return Ok(vec![(false, false), (false, true), (true, false), (true, true)]);
    }
    let yn = |c: u8| match c {
        b'y' => Ok(true),
        b'n' => Ok(false),
        _ => bail!("grid cell letters must be y or n"),
    };
    text.split(',')
        .map(|cell| {
            let b = cell.trim().as_bytes();
            if b.len() != 2 {
                bail!("bad grid cell `{cell}` (expected yy, yn, ny or nn)");
            }
            Ok((yn(b[0])?, yn(b[1])?))
        })
        .collect()
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail { seed: u64, reason: String },
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub benchmark: String,
    pub cow: bool,
    pub fingerprint: bool,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub original_instrs: usize,
    pub residual_instrs: usize,
    pub samples: u64,
    #[serde(flatten)]
    pub verdict: Verdict,
}

impl RunReport {
    /// Stable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "benchmark={}", self.benchmark);
        let _ = writeln!(s, "cow={}", yes_no(self.cow));
        let _ = writeln!(s, "fingerprint={}", yes_no(self.fingerprint));
        s.push_str(&self.metrics.to_kv());
        let _ = writeln!(s, "original_instrs={}", self.original_instrs);
        let _ = writeln!(s, "residual_instrs={}", self.residual_instrs);
        let _ = writeln!(s, "samples={}", self.samples);
        match &self.verdict {
            Verdict::Pass => s.push_str("verdict=pass\n"),
            Verdict::Fail { seed, reason } => {
                let _ = writeln!(s, "verdict=fail\nfailed_seed={seed}\nreason={reason}");
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Human-readable table, one row per report.
pub fn table(reports: &[RunReport]) -> String {
    let mut s = format!(
        "{:<20} {:>3} {:>3} {:>8} {:>8} {:>10} {:>10} {:>10} {:>12} {:>6} {:>8} {:>7}\n",
        "benchmark",
        "cow",
        "fp",
        "states",
        "dedup",
        "pages",
        "live_max",
        "hashed",
        "compared",
        "orig",
        "residual",
        "verdict"
    );
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<20} {:>3} {:>3} {:>8} {:>8} {:>10} {:>10} {:>10} {:>12} {:>6} {:>8} {:>7}",
            r.benchmark,
            yes_no(r.cow),
            yes_no(r.fingerprint),
            m.states_visited,
            m.dedup_hits,
            m.pages_allocated_total,
            m.live_pages_max,
            m.pages_hashed,
            m.words_compared,
            r.original_instrs,
            r.residual_instrs,
            if r.verdict.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

/// Runs `residual` and `original` on `samples` delayed inputs drawn from
/// consecutive seeds and reports the first mismatch.
pub fn check_equivalence(b: &Benchmark, residual: &Program, seed: u64, samples: u64) -> Verdict {
    for s in seed..seed.saturating_add(samples) {
        let delayed = b.sample_delayed(s);
        let want = match run_program(&b.program, &b.supplied.merged(&delayed), RUN_FUEL) {
            Ok(o) => o,
            Err(e) => {
                return Verdict::Fail {
                    seed: s,
                    reason: format!("original failed: {e}"),
                }
            }
        };
        let got = match run_program(residual, &delayed, RUN_FUEL) {
            Ok(o) => o,
            Err(e) => {
                return Verdict::Fail {
                    seed: s,
                    reason: format!("residual failed: {e}"),
                }
            }
        };
        if got.observation() != want.observation() {
            return Verdict::Fail {
                seed: s,
                reason: format!(
                    "r0 {} vs {}, tape length {} vs {}",
                    got.r0,
                    want.r0,
                    got.tape.len(),
                    want.tape.len()
                ),
            };
        }
    }
    Verdict::Pass
}

/// Specializes one benchmark in one grid cell and checks the result.
pub fn run_cell(b: &Benchmark, cfg: SpecConfig, seed: u64, samples: u64) -> Result<(RunReport, Program)> {
    let bta = analyze(&b.program);
    let out = specialize(&b.program, &bta, &b.supplied, cfg).with_context(|| format!("specializing {}", b.spec))?;
    let verdict = check_equivalence(b, &out.residual, seed, samples);
    let report = RunReport {
        benchmark: b.spec.to_string(),
        cow: cfg.cow,
        fingerprint: cfg.fingerprint,
        metrics: out.metrics,
        original_instrs: b.program.instruction_count(),
        residual_instrs: out.residual.instruction_count(),
        samples,
        verdict,
    };
    Ok((report, out.residual))
}

fn load(path: &Path) -> Result<Program> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let p = parse_program(&text).with_context(|| format!("parsing {}", path.display()))?;
    let diags = ir::validate(&p);
    if !diags.is_empty() {
        bail!("{}: {}", path.display(), diags.join("; "));
    }
    Ok(p)
}

fn bindings(p: &Program, texts: &[String]) -> Result<InputAssignment> {
    let mut a = InputAssignment::new();
    for t in texts {
        a.add_binding(p, t).with_context(|| format!("input `{t}`"))?;
    }
    Ok(a)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns whether every verdict passed; errors are diagnostics.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<bool>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli.command, out)
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Bta { file } => {
            let p = load(&file)?;
            let bta = analyze(&p);
            write!(out, "{}", bta.render(&p))?;
            for v in congruence_violations(&p, &bta) {
                writeln!(out, "warning: {v}")?;
            }
            Ok(true)
        }
        Command::Run { file, inputs, fuel } => {
            let p = load(&file)?;
            let a = bindings(&p, &inputs)?;
            let o = run_program(&p, &a, fuel)?;
            let tape: Vec<String> = o.tape.iter().map(u64::to_string).collect();
            writeln!(out, "tape={}\nr0={}\nsteps={}", tape.join(","), o.r0, o.steps)?;
            Ok(true)
        }
        Command::Specialize {
            file,
            supplied,
            output,
            canonical,
            modes,
            json,
        } => {
            let p = load(&file)?;
            let a = bindings(&p, &supplied)?;
            let bta = analyze(&p);
            let cfg = modes.config(!modes.no_cow, !modes.no_fingerprint);
            let spec = specialize(&p, &bta, &a, cfg)?;
            let residual = if canonical {
                canonicalize_labels(&spec.residual)
            } else {
                spec.residual
            };
            let text = ir::pretty_print(&residual);
            match output {
                Some(path) => std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?,
                None => writeln!(out, "{text}")?,
            }
            if json {
                writeln!(out, "{}", serde_json::to_string(&spec.metrics)?)?;
            } else {
                write!(out, "{}", spec.metrics.to_kv())?;
            }
            writeln!(
                out,
                "original_instrs={}\nresidual_instrs={}",
                p.instruction_count(),
                residual.instruction_count()
            )?;
            Ok(true)
        }
        Command::Bench {
            names,
            grid,
            modes,
            seed,
            samples,
            json,
        } => {
            let specs = if names.is_empty() {
                default_specs()
            } else {
                names.iter().map(|n| BenchSpec::parse(n)).collect::<Result<_, _>>()?
            };
            let cells = match &grid {
                Some(g) => parse_grid(g)?,
                None => vec![(!modes.no_cow, !modes.no_fingerprint)],
            };
            let mut reports = Vec::new();
            for spec in &specs {
                let b = make_benchmark(spec)?;
                for &(cow, fp) in &cells {
                    let (r, _) = run_cell(&b, modes.config(cow, fp), seed, samples)?;
                    if json {
                        writeln!(out, "{}", r.to_json())?;
                    } else {
                        writeln!(out, "{}", r.to_kv())?;
                    }
                    reports.push(r);
                }
            }
            if !json {
                write!(out, "{}", table(&reports))?;
            }
            Ok(reports.iter().all(|r| r.verdict.passed()))
        }
        Command::Show { name, write_dir } => {
            if let Some(dir) = write_dir {
                std::fs::create_dir_all(&dir)?;
                for spec in default_specs() {
                    let b = make_benchmark(&spec)?;
                    std::fs::write(dir.join(b.file_name()), &b.source)?;
                }
            }
            if let Some(n) = name {
                write!(out, "{}", make_benchmark(&BenchSpec::parse(&n)?)?.source)?;
            }
            Ok(true)
        }
    }
}
