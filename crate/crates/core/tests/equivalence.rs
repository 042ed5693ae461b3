//! Random programs: residuals agree with the original on every delayed input,
//! and all four store modes make the same decisions and emit the same code.

use genext::bta::{analyze, build_dependence_graph, classify, congruence_violations, forward_slice};
use genext::ir::{parse_program, run_program, validate, BindingTime, InputAssignment, InputTarget, Program, Reg};
use genext::residual::canonicalize_labels;
use genext::specializer::{specialize, SpecConfig};
use proptest::prelude::*;

const ALU: [&str; 8] = ["add", "sub", "mul", "xor", "and", "or", "shl", "shr"];
// r1 is the loop counter and r11..r13 hold region pointers; the rest is data.
const DATA: [u8; 9] = [0, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Clone, Debug)]
enum Op {
    Const(u8, u64),
    Mov(u8, u8),
    Alu(usize, u8, Result<u8, u64>),
    Load(u8, u8, i64),
    Store(i64, u8),
    Out(u8),
}

fn data_reg() -> impl Strategy<Value = u8> {
    prop::sample::select(&DATA[..])
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (data_reg(), 0i64..8).prop_map(|(d, off)| Op::Load(d, 12, off)),
        1 => (data_reg(), 0u64..20).prop_map(|(d, v)| Op::Const(d, v)),
        1 => (data_reg(), data_reg()).prop_map(|(d, s)| Op::Mov(d, s)),
        1 => (0..ALU.len(), data_reg(), prop_oneof![data_reg().prop_map(Ok), (0u64..9).prop_map(Err)])
            .prop_map(|(o, d, s)| Op::Alu(o, d, s)),
        1 => (data_reg(), 11u8..14, 0i64..8).prop_map(|(d, b, off)| Op::Load(d, b, off)),
        1 => (0i64..8, data_reg()).prop_map(|(off, s)| Op::Store(off, s)),
        1 => data_reg().prop_map(Op::Out),
    ]
}

fn render(op: &Op) -> String {
    match op {
        Op::Const(d, v) => format!("const r{d}, {v}"),
        Op::Mov(d, s) => format!("mov r{d}, r{s}"),
        Op::Alu(o, d, Ok(s)) => format!("{} r{d}, r{s}", ALU[*o]),
        Op::Alu(o, d, Err(v)) => format!("{} r{d}, {v}", ALU[*o]),
        Op::Load(d, b, off) => format!("load r{d}, [r{b}+{off}]"),
        Op::Store(off, s) => format!("store [r13+{off}], r{s}"),
        Op::Out(s) => format!("out r{s}"),
    }
}

#[derive(Clone, Debug)]
enum Exit {
    Jmp(usize),
    Jz(u8, usize, usize),
    Halt,
}

#[derive(Clone, Debug)]
struct Shape {
    body: Vec<Op>,
    /// Optional branch inside the loop body; both arms rejoin at the latch.
    split: Option<(u8, Vec<Op>, Vec<Op>)>,
    /// Forward-only blocks after the loop; block k may jump to any later one.
    dag: Vec<(Vec<Op>, Exit)>,
}

// Conditions favour r2 and low registers, which often hold delayed values.
fn cond_reg() -> impl Strategy<Value = u8> {
    prop_oneof![Just(2u8), Just(3u8), data_reg()]
}

fn shape() -> impl Strategy<Value = Shape> {
    let ops = || prop::collection::vec(op(), 0..5);
    let split = prop::option::of((cond_reg(), ops(), ops()));
    let dag = prop::collection::vec((ops(), (0u8..8, cond_reg(), any::<u8>(), any::<u8>())), 1..7);
    (ops(), split, dag).prop_map(|(body, split, raw)| {
        let n = raw.len();
        let dag = raw
            .into_iter()
            .enumerate()
            .map(|(k, (ops, (kind, r, a, b)))| {
                let later = n - k - 1;
                let exit = if later == 0 {
                    Exit::Halt
                } else {
                    let pick = |x: u8| k + 1 + x as usize % later;
                    match kind {
                        0 => Exit::Halt,
                        1 | 2 => Exit::Jmp(pick(a)),
                        _ => Exit::Jz(r, pick(a), pick(b)),
                    }
                };
                (ops, exit)
            })
            .collect();
        Shape { body, split, dag }
    })
}

fn source(s: &Shape) -> String {
    let mut t = String::from(
        "program random
region sup supplied words=8
region del delayed words=8
region scr scratch words=8
input r1 supplied
input r2 delayed
input sup supplied
input del delayed

block E:
  and r1, 3
  const r11, &sup
  const r12, &del
  const r13, &scr
  jmp H

block H:
  jz r1, D0, B

block B:
",
    );
    for op in &s.body {
        t += &format!("  {}\n", render(op));
    }
    match &s.split {
        None => t += "  jmp T\n",
        Some((c, left, right)) => {
            t += &format!("  jz r{c}, S0, S1\n");
            for (k, arm) in [left, right].into_iter().enumerate() {
                t += &format!("\nblock S{k}:\n");
                for op in arm {
                    t += &format!("  {}\n", render(op));
                }
                t += "  jmp T\n";
            }
        }
    }
    t += "\nblock T:\n  sub r1, 1\n  jmp H\n";
    for (k, (ops, exit)) in s.dag.iter().enumerate() {
        t += &format!("\nblock D{k}:\n");
        for op in ops {
            t += &format!("  {}\n", render(op));
        }
        t += &match exit {
            Exit::Halt => "  halt\n".to_owned(),
            Exit::Jmp(j) => format!("  jmp D{j}\n"),
            Exit::Jz(r, a, b) => format!("  jz r{r}, D{a}, D{b}\n"),
        };
    }
    t
}

fn reg(i: u8) -> Reg {
    Reg::new(i).unwrap()
}

fn inputs() -> impl Strategy<Value = (InputAssignment, Vec<InputAssignment>)> {
    let words = || prop::collection::vec(prop_oneof![0u64..4, any::<u64>()], 8);
    let delayed =
        (any::<u64>(), words()).prop_map(|(x, d)| InputAssignment::new().with_reg(reg(2), x).with_region("del", d));
    (any::<u64>(), words(), prop::collection::vec(delayed, 1..6))
        .prop_map(|(n, s, ds)| (InputAssignment::new().with_reg(reg(1), n).with_region("sup", s), ds))
}

fn program(s: &Shape) -> Program {
    let p = parse_program(&source(s)).expect("generated program parses");
    assert!(validate(&p).is_empty(), "{:?}", validate(&p));
    p
}

const FUEL: u64 = 1_000_000;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn residual_matches_original(s in shape(), (sup, delayed) in inputs()) {
        let p = program(&s);
        let bta = analyze(&p);
        prop_assert!(congruence_violations(&p, &bta).is_empty());
        let out = specialize(&p, &bta, &sup, SpecConfig::default()).unwrap();
        prop_assert!(validate(&out.residual).is_empty());
        for d in &delayed {
            let want = run_program(&p, &sup.merged(d), FUEL).unwrap();
            let got = run_program(&out.residual, d, FUEL).unwrap();
            prop_assert_eq!(got.observation(), want.observation());
        }
    }

    #[test]
    fn modes_agree(s in shape(), (sup, _) in inputs()) {
        let p = program(&s);
        let bta = analyze(&p);
        let runs: Vec<_> = [(false, false), (false, true), (true, false), (true, true)]
            .into_iter()
            .map(|(c, f)| specialize(&p, &bta, &sup, SpecConfig::with_modes(c, f)).unwrap())
            .collect();
        let canon = ir_text(&canonicalize_labels(&runs[0].residual));
        for r in &runs[1..] {
            prop_assert_eq!(&r.decisions, &runs[0].decisions);
            prop_assert_eq!(ir_text(&canonicalize_labels(&r.residual)), canon.clone());
            prop_assert_eq!(r.metrics.states_visited, runs[0].metrics.states_visited);
            prop_assert_eq!(r.metrics.dedup_hits, runs[0].metrics.dedup_hits);
        }
    }

    #[test]
    fn classification_is_congruent_and_monotone(s in shape(), mask in 0u32..16) {
        let p = program(&s);
        let g = build_dependence_graph(&p);
        let bta = classify(&p, &g);
        let class = |k: usize| bta.class(g.nodes[k].block, g.nodes[k].index);
        for &(a, b) in g.data.iter().chain(&g.memory) {
            if class(b) == BindingTime::Supplied {
                prop_assert_eq!(class(a), BindingTime::Supplied);
            }
        }
        let all: Vec<InputTarget> = p.inputs.iter().map(|i| i.target.clone()).collect();
        let some: Vec<InputTarget> = all.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| t.clone()).collect();
        prop_assert!(forward_slice(&p, &g, &some).instrs.is_subset(&forward_slice(&p, &g, &all).instrs));
    }

    #[test]
    fn cow_never_allocates_more(s in shape(), (sup, _) in inputs()) {
        let p = program(&s);
        let bta = analyze(&p);
        let no = specialize(&p, &bta, &sup, SpecConfig::with_modes(false, false)).unwrap();
        let yes = specialize(&p, &bta, &sup, SpecConfig::with_modes(true, false)).unwrap();
        prop_assert!(yes.metrics.pages_allocated_total <= no.metrics.pages_allocated_total);
        prop_assert_eq!(no.metrics.cow_faults, 0);
    }
}

fn ir_text(p: &Program) -> String {
    genext::ir::pretty_print(p)
}

#[test]
fn generator_exercises_delayed_control() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    let (mut branching, mut dedup) = (0, 0);
    for _ in 0..200 {
        let s = shape().new_tree(&mut runner).unwrap().current();
        let (sup, _) = inputs().new_tree(&mut runner).unwrap().current();
        let p = program(&s);
        let out = specialize(&p, &analyze(&p), &sup, SpecConfig::default()).unwrap();
        branching += usize::from(genext::residual::count_branches(&out.residual) > 0);
        dedup += usize::from(out.metrics.dedup_hits > 0);
    }
    assert!(branching >= 60, "only {branching} of 200 residuals keep a branch");
    assert!(dedup >= 40, "only {dedup} of 200 runs hit a duplicate state");
}
