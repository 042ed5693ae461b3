//! Binding-time analysis by forward slicing over a dependence graph.
//!
//! Register dependences come from reaching definitions; memory dependences
//! are tracked per region (any store that may write a region feeds every
//! load that may read it). Control dependences come from postdominators.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::ir::{BindingTime, InputTarget, Instr, Operand, Program, Reg, RegionClass, NUM_REGS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstrId {
    pub block: usize,
    pub index: usize,
}

/// Statically possible regions for an address or value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Regions {
    /// Could be anything, including any region.
    Top,
    /// One of these regions, or (if empty) no region at all.
    Set(BTreeSet<usize>),
}

impl Regions {
    fn empty() -> Regions {
        Regions::Set(BTreeSet::new())
    }

    fn join(&self, other: &Regions) -> Regions {
        match (self, other) {
            (Regions::Set(a), Regions::Set(b)) => Regions::Set(a.union(b).copied().collect()),
            _ => Regions::Top,
        }
    }

    pub fn contains(&self, region: usize) -> bool {
        match self {
            Regions::Top => true,
            Regions::Set(s) => s.contains(&region),
        }
    }

    pub fn iter(&self, n_regions: usize) -> Vec<usize> {
        match self {
            Regions::Top => (0..n_regions).collect(),
            Regions::Set(s) => s.iter().copied().collect(),
        }
    }

    fn intersects(&self, other: &Regions) -> bool {
        match (self, other) {
            (Regions::Set(a), Regions::Set(b)) => !a.is_disjoint(b),
            (Regions::Top, Regions::Set(s)) | (Regions::Set(s), Regions::Top) => !s.is_empty(),
            (Regions::Top, Regions::Top) => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Def {
    Entry(Reg),
    Instr(usize),
}

#[derive(Clone, Debug)]
pub struct DependenceGraph {
    pub nodes: Vec<InstrId>,
    /// Register def to use, from reaching definitions.
    pub data: Vec<(usize, usize)>,
    /// Store to load, when their region sets intersect.
    pub memory: Vec<(usize, usize)>,
    /// Conditional branch to each instruction of a block control dependent on it.
    pub control: Vec<(usize, usize)>,
    /// Uses reached by a register's value on entry.
    pub entry_uses: Vec<(Reg, usize)>,
    /// Regions a load may read or a store may write; `None` for other instructions.
    pub access: Vec<Option<Regions>>,
    region_classes: Vec<RegionClass>,
    first_node: Vec<usize>,
}

impl DependenceGraph {
    pub fn node(&self, id: InstrId) -> usize {
        self.first_node[id.block] + id.index
    }

    pub fn region_count(&self) -> usize {
        self.region_classes.len()
    }

    fn successors(&self, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in edges {
            out[a].push(b);
        }
        out
    }
}

fn operand_regions(v: &[Regions], o: &Operand, p: &Program) -> Regions {
    match o {
        Operand::Reg(r) => v[r.index()].clone(),
        Operand::Imm(x) => constant_regions(p, *x),
    }
}

fn constant_regions(p: &Program, x: u64) -> Regions {
    Regions::Set(p.region_at(x).into_iter().collect())
}

/// Transfer function of the region-set analysis for one instruction.
fn region_transfer(p: &Program, v: &mut [Regions], ins: &Instr) {
    match ins {
        Instr::Const { dst, value } => v[dst.index()] = constant_regions(p, *value),
        Instr::Mov { dst, src } => v[dst.index()] = operand_regions(v, src, p),
        Instr::Alu { op, dst, src } => {
            let a = v[dst.index()].clone();
            let b = operand_regions(v, src, p);
            v[dst.index()] = match op {
                crate::ir::AluOp::Add | crate::ir::AluOp::Sub => a.join(&b),
                _ if a == Regions::empty() && b == Regions::empty() => Regions::empty(),
                _ => Regions::Top,
            };
        }
        Instr::Load { dst, .. } => v[dst.index()] = Regions::Top,
        _ => {}
    }
}

/// Address set for an access through `base`. A base not derived from any
/// region constant could still hold an address, so it is widened to Top.
fn access_regions(base: &Regions) -> Regions {
    match base {
        Regions::Set(s) if !s.is_empty() => base.clone(),
        _ => Regions::Top,
    }
}

fn predecessors(p: &Program) -> Vec<Vec<usize>> {
    let mut preds = vec![Vec::new(); p.blocks.len()];
    for b in 0..p.blocks.len() {
        for s in p.successors(b) {
            if !preds[s].contains(&b) {
                preds[s].push(b);
            }
        }
    }
    preds
}

/// Postdominator sets with a virtual exit node at index `n`.
fn postdominators(p: &Program) -> Vec<BTreeSet<usize>> {
    let n = p.blocks.len();
    let all: BTreeSet<usize> = (0..=n).collect();
    let mut pdom = vec![all; n + 1];
    pdom[n] = BTreeSet::from([n]);
    let succs: Vec<Vec<usize>> = (0..n)
        .map(|b| match p.blocks[b].terminator() {
            Some(Instr::Halt) => vec![n],
            _ => p.successors(b),
        })
        .collect();
    let mut changed = true;
    while changed {
        changed = false;
        for b in (0..n).rev() {
            let mut acc: Option<BTreeSet<usize>> = None;
            for &s in &succs[b] {
                acc = Some(match acc {
                    None => pdom[s].clone(),
                    Some(a) => a.intersection(&pdom[s]).copied().collect(),
                });
            }
            let mut next = acc.unwrap_or_default();
            next.insert(b);
            if next != pdom[b] {
                pdom[b] = next;
                changed = true;
            }
        }
    }
    pdom
}

/// For each block, the blocks whose conditional branch it is control dependent on.
pub fn control_dependences(p: &Program) -> Vec<BTreeSet<usize>> {
    let pdom = postdominators(p);
    let mut deps = vec![BTreeSet::new(); p.blocks.len()];
    for (a, blk) in p.blocks.iter().enumerate() {
        if !matches!(blk.terminator(), Some(Instr::Jz { .. })) {
            continue;
        }
        for b in p.successors(a) {
            for &y in &pdom[b] {
                if y < p.blocks.len() && (y == a || !pdom[a].contains(&y)) {
                    deps[y].insert(a);
                }
            }
        }
    }
    deps
}

pub fn build_dependence_graph(p: &Program) -> DependenceGraph {
    let nb = p.blocks.len();
    let mut nodes = Vec::new();
    let mut first_node = Vec::with_capacity(nb);
    for (b, blk) in p.blocks.iter().enumerate() {
        first_node.push(nodes.len());
        nodes.extend((0..blk.instrs.len()).map(|index| InstrId { block: b, index }));
    }
    let preds = predecessors(p);
    let entry = p.entry_index().unwrap_or(0);

    // Reaching definitions, per register.
    type Defs = Vec<BTreeSet<Def>>;
    let entry_defs: Defs = Reg::all().map(|r| BTreeSet::from([Def::Entry(r)])).collect();
    let mut outs: Vec<Defs> = vec![vec![BTreeSet::new(); NUM_REGS]; nb];
    let block_in = |outs: &[Defs], b: usize| -> Defs {
        let mut acc: Defs = if b == entry {
            entry_defs.clone()
        } else {
            vec![BTreeSet::new(); NUM_REGS]
        };
        for &q in &preds[b] {
            for r in 0..NUM_REGS {
                acc[r].extend(outs[q][r].iter().copied());
            }
        }
        acc
    };
    let mut changed = true;
    while changed {
        changed = false;
        for b in 0..nb {
            let mut cur = block_in(&outs, b);
            for (i, ins) in p.blocks[b].instrs.iter().enumerate() {
                if let Some(d) = ins.def() {
                    cur[d.index()] = BTreeSet::from([Def::Instr(first_node[b] + i)]);
                }
            }
            if cur != outs[b] {
                outs[b] = cur;
                changed = true;
            }
        }
    }

    let mut data = Vec::new();
    let mut entry_uses = Vec::new();
    for b in 0..nb {
        let mut cur = block_in(&outs, b);
        for (i, ins) in p.blocks[b].instrs.iter().enumerate() {
            let node = first_node[b] + i;
            for r in ins.uses() {
                for d in &cur[r.index()] {
                    match d {
                        Def::Entry(reg) => entry_uses.push((*reg, node)),
                        Def::Instr(src) => data.push((*src, node)),
                    }
                }
            }
            if let Some(d) = ins.def() {
                cur[d.index()] = BTreeSet::from([Def::Instr(node)]);
            }
        }
    }
    data.sort_unstable();
    data.dedup();

    // Region sets of register values.
    let input_regs: BTreeSet<Reg> = p
        .inputs
        .iter()
        .filter_map(|b| match b.target {
            InputTarget::Reg(r) => Some(r),
            InputTarget::Region(_) => None,
        })
        .collect();
    let entry_vals: Vec<Regions> = Reg::all()
        .map(|r| {
            if input_regs.contains(&r) {
                Regions::Top
            } else {
                Regions::empty()
            }
        })
        .collect();
    let mut rin: Vec<Option<Vec<Regions>>> = vec![None; nb];
    rin[entry] = Some(entry_vals.clone());
    let mut queue: VecDeque<usize> = VecDeque::from([entry]);
    while let Some(b) = queue.pop_front() {
        let mut v = rin[b].clone().expect("queued blocks have input state");
        for ins in &p.blocks[b].instrs {
            region_transfer(p, &mut v, ins);
        }
        for s in p.successors(b) {
            let next = match &rin[s] {
                None => v.clone(),
                Some(old) => old.iter().zip(&v).map(|(a, b)| a.join(b)).collect(),
            };
            if rin[s].as_ref() != Some(&next) {
                rin[s] = Some(next);
                queue.push_back(s);
            }
        }
    }

    let mut access = vec![None; nodes.len()];
    for b in 0..nb {
        let mut v = rin[b].clone();
        for (i, ins) in p.blocks[b].instrs.iter().enumerate() {
            let base = match ins {
                Instr::Load { base, .. } | Instr::Store { base, .. } => Some(*base),
                _ => None,
            };
            if let Some(base) = base {
                // Blocks unreachable from the entry never execute.
                access[first_node[b] + i] = Some(match &v {
                    Some(vals) => access_regions(&vals[base.index()]),
                    None => Regions::empty(),
                });
            }
            if let Some(vals) = v.as_mut() {
                region_transfer(p, vals, ins);
            }
        }
    }

    let is_store = |n: usize| {
        let id = nodes[n];
        matches!(p.blocks[id.block].instrs[id.index], Instr::Store { .. })
    };
    let mut memory = Vec::new();
    for s in (0..nodes.len()).filter(|&n| is_store(n)) {
        for l in 0..nodes.len() {
            let id = nodes[l];
            if !matches!(p.blocks[id.block].instrs[id.index], Instr::Load { .. }) {
                continue;
            }
            if let (Some(w), Some(r)) = (&access[s], &access[l]) {
                if w.intersects(r) {
                    memory.push((s, l));
                }
            }
        }
    }

    let mut control = Vec::new();
    for (y, branches) in control_dependences(p).into_iter().enumerate() {
        for a in branches {
            let branch = first_node[a] + p.blocks[a].instrs.len() - 1;
            for i in 0..p.blocks[y].instrs.len() {
                control.push((branch, first_node[y] + i));
            }
        }
    }

    DependenceGraph {
        nodes,
        data,
        memory,
        control,
        entry_uses,
        access,
        region_classes: p.regions.iter().map(|r| r.class).collect(),
        first_node,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub instrs: BTreeSet<usize>,
    pub regions: BTreeSet<usize>,
}

/// Forward slice from the given delayed inputs.
///
/// Data and memory edges are followed transitively. Regions written by a
/// delayed store, or read by a delayed load, become delayed unless they
/// hold supplied input; every store that may write a delayed region is
/// delayed. Control edges delay only `out` and `halt`: an effect is
/// delayed when a delayed branch lies anywhere on its chain of control
/// dependences. Supplied code under a delayed branch keeps running in the
/// specializer once per path.
pub fn forward_slice(p: &Program, g: &DependenceGraph, seeds: &[InputTarget]) -> Slice {
    let n = g.nodes.len();
    let data_succ = g.successors(&g.data);
    let mem_succ = g.successors(&g.memory);
    let instr = |k: usize| &p.blocks[g.nodes[k].block].instrs[g.nodes[k].index];

    let mut regions: BTreeSet<usize> = seeds
        .iter()
        .filter_map(|t| match t {
            InputTarget::Region(name) => p.region_index(name),
            InputTarget::Reg(_) => None,
        })
        .collect();
    let seed_regs: BTreeSet<Reg> = seeds
        .iter()
        .filter_map(|t| match t {
            InputTarget::Reg(r) => Some(*r),
            InputTarget::Region(_) => None,
        })
        .collect();

    let mut delayed = vec![false; n];
    loop {
        let mut work: Vec<usize> = g
            .entry_uses
            .iter()
            .filter(|(r, _)| seed_regs.contains(r))
            .map(|(_, u)| *u)
            .collect();
        for k in 0..n {
            if let Some(acc) = &g.access[k] {
                if regions.iter().any(|r| acc.contains(*r)) {
                    work.push(k);
                }
            }
        }
        work.extend((0..n).filter(|&k| delayed[k]));
        while let Some(k) = work.pop() {
            delayed[k] = true;
            for &s in data_succ[k].iter().chain(&mem_succ[k]) {
                if !delayed[s] {
                    delayed[s] = true;
                    work.push(s);
                }
            }
        }

        let mut grown = false;
        for k in (0..n).filter(|&k| delayed[k]) {
            if let Some(acc) = &g.access[k] {
                for r in acc.iter(g.region_count()) {
                    if g.region_classes[r] == RegionClass::Scratch && regions.insert(r) {
                        grown = true;
                    }
                }
            }
        }
        if !grown {
            break;
        }
    }

    // Effects under delayed control.
    let ctrl_preds = {
        let mut v = vec![Vec::new(); n];
        for &(b, d) in &g.control {
            v[d].push(b);
        }
        v
    };
    for k in 0..n {
        if delayed[k] || !instr(k).is_effect() {
            continue;
        }
        let mut seen = BTreeSet::new();
        let mut stack = ctrl_preds[k].clone();
        while let Some(b) = stack.pop() {
            if !seen.insert(b) {
                continue;
            }
            if delayed[b] {
                delayed[k] = true;
                break;
            }
            stack.extend(ctrl_preds[b].iter().copied());
        }
    }

    Slice {
        instrs: (0..n).filter(|&k| delayed[k]).collect(),
        regions,
    }
}

#[derive(Clone, Debug)]
pub struct BtaResult {
    class: Vec<Vec<BindingTime>>,
    lifted: Vec<Vec<bool>>,
    /// Supplied input registers whose entry value reaches a delayed use.
    pub entry_lifts: Vec<Reg>,
    /// Binding time of each region, indexed like `Program::regions`.
    pub region_class: Vec<BindingTime>,
    /// Regions each load/store may touch, `[block][index]`.
    access: Vec<Vec<Option<Regions>>>,
    /// Registers whose value may be delayed where the instruction reads them.
    delayed_uses: Vec<Vec<Vec<Reg>>>,
}

impl BtaResult {
    pub fn class(&self, block: usize, index: usize) -> BindingTime {
        self.class[block][index]
    }

    pub fn is_lifted(&self, block: usize, index: usize) -> bool {
        self.lifted[block][index]
    }

    pub fn access(&self, block: usize, index: usize) -> Option<&Regions> {
        self.access[block][index].as_ref()
    }

    /// Whether `reg` may hold a delayed value when the instruction reads it.
    pub fn use_is_delayed(&self, block: usize, index: usize, reg: Reg) -> bool {
        self.delayed_uses[block][index].contains(&reg)
    }

    /// Class of the block's conditional branch, if it ends in one.
    pub fn branch_class(&self, p: &Program, block: usize) -> Option<BindingTime> {
        let blk = &p.blocks[block];
        match blk.terminator() {
            Some(Instr::Jz { .. }) => Some(self.class[block][blk.instrs.len() - 1]),
            _ => None,
        }
    }

    pub fn delayed_count(&self) -> usize {
        self.class
            .iter()
            .flatten()
            .filter(|c| **c == BindingTime::Delayed)
            .count()
    }

    pub fn lifted_count(&self) -> usize {
        self.lifted.iter().flatten().filter(|l| **l).count()
    }

    /// One line per instruction: `block:index opcode CLASS [LIFTED]`.
    pub fn render(&self, p: &Program) -> String {
        let mut out = String::new();
        for (b, blk) in p.blocks.iter().enumerate() {
            for (i, ins) in blk.instrs.iter().enumerate() {
                let class = match self.class[b][i] {
                    BindingTime::Supplied => "SUPPLIED",
                    BindingTime::Delayed => "DELAYED",
                };
                let lifted = if self.lifted[b][i] { " LIFTED" } else { "" };
                let _ = writeln!(out, "{}:{i} {} {class}{lifted}", blk.label, ins.opcode());
            }
        }
        out
    }
}

pub fn classify(p: &Program, g: &DependenceGraph) -> BtaResult {
    let seeds: Vec<InputTarget> = p
        .inputs
        .iter()
        .filter(|b| b.time == BindingTime::Delayed)
        .map(|b| b.target.clone())
        .collect();
    let slice = forward_slice(p, g, &seeds);
    let n = g.nodes.len();
    let delayed = |k: usize| slice.instrs.contains(&k);
    let instr = |k: usize| &p.blocks[g.nodes[k].block].instrs[g.nodes[k].index];
    let needs_value = |k: usize| delayed(k) || instr(k).is_effect();

    let mut lifted_flat = vec![false; n];
    for &(d, u) in &g.data {
        if !delayed(d) && needs_value(u) {
            lifted_flat[d] = true;
        }
    }
    let supplied_inputs: BTreeSet<Reg> = p
        .inputs
        .iter()
        .filter_map(|b| match (b.time, &b.target) {
            (BindingTime::Supplied, InputTarget::Reg(r)) => Some(*r),
            _ => None,
        })
        .collect();
    let entry_lifts: BTreeSet<Reg> = g
        .entry_uses
        .iter()
        .filter(|(r, u)| supplied_inputs.contains(r) && needs_value(*u))
        .map(|(r, _)| *r)
        .collect();

    let shape = |b: usize| p.blocks[b].instrs.len();
    let per_block = |f: &dyn Fn(usize) -> bool| -> Vec<Vec<bool>> {
        (0..p.blocks.len())
            .map(|b| (0..shape(b)).map(|i| f(g.first_node[b] + i)).collect())
            .collect()
    };
    let class = per_block(&|k| delayed(k))
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|d| if d { BindingTime::Delayed } else { BindingTime::Supplied })
                .collect()
        })
        .collect();
    let lifted = per_block(&|k| lifted_flat[k]);
    let access = (0..p.blocks.len())
        .map(|b| (0..shape(b)).map(|i| g.access[g.first_node[b] + i].clone()).collect())
        .collect();
    let mut delayed_uses: Vec<Vec<Vec<Reg>>> = p.blocks.iter().map(|b| vec![Vec::new(); b.instrs.len()]).collect();
    let mut mark = |u: usize, r: Reg| {
        let id = g.nodes[u];
        let slot = &mut delayed_uses[id.block][id.index];
        if !slot.contains(&r) {
            slot.push(r);
        }
    };
    for &(d, u) in &g.data {
        if let (true, Some(r)) = (delayed(d), instr(d).def()) {
            mark(u, r);
        }
    }
    for &(r, u) in &g.entry_uses {
        if seeds.contains(&InputTarget::Reg(r)) {
            mark(u, r);
        }
    }
    let region_class = (0..p.regions.len())
        .map(|r| {
            if slice.regions.contains(&r) {
                BindingTime::Delayed
            } else {
                BindingTime::Supplied
            }
        })
        .collect();

    BtaResult {
        class,
        lifted,
        entry_lifts: entry_lifts.into_iter().collect(),
        region_class,
        access,
        delayed_uses,
    }
}

/// Builds the dependence graph and classifies every instruction.
pub fn analyze(p: &Program) -> BtaResult {
    classify(p, &build_dependence_graph(p))
}

/// Static congruence problems: supplied instructions fed by delayed ones,
/// and delayed stores that may write a supplied region.
pub fn congruence_violations(p: &Program, bta: &BtaResult) -> Vec<String> {
    let g = build_dependence_graph(p);
    let class_of = |k: usize| bta.class(g.nodes[k].block, g.nodes[k].index);
    let name = |k: usize| {
        let id = g.nodes[k];
        format!("{}[{}]", p.blocks[id.block].label, id.index)
    };
    let mut out = Vec::new();
    for &(d, u) in g.data.iter().chain(&g.memory) {
        if class_of(d) == BindingTime::Delayed && class_of(u) == BindingTime::Supplied {
            out.push(format!("supplied {} depends on delayed {}", name(u), name(d)));
        }
    }
    for (k, id) in g.nodes.iter().enumerate() {
        let ins = &p.blocks[id.block].instrs[id.index];
        if !matches!(ins, Instr::Store { .. }) || class_of(k) != BindingTime::Delayed {
            continue;
        }
        let acc = g.access[k].as_ref().expect("stores have access sets");
        for r in acc.iter(p.regions.len()) {
            if bta.region_class[r] == BindingTime::Supplied {
                out.push(format!(
                    "delayed store {} may write supplied region {}",
                    name(k),
                    p.regions[r].name
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn prog(body: &str) -> Program {
        parse_program(body).unwrap()
    }

    fn node(p: &Program, g: &DependenceGraph, label: &str, index: usize) -> usize {
        g.node(InstrId {
            block: p.block_index(label).unwrap(),
            index,
        })
    }

    const MATCHER: &str = "program matcher
region pat supplied words=64
region str delayed words=64
input pat supplied
input str delayed
input r1 delayed
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
";

    #[test]
    fn direct_def_use_edge() {
        let p = prog("program x\nblock L1:\n  const r1, 5\n  mov r2, r1\n  halt\n");
        let g = build_dependence_graph(&p);
        assert!(g.data.contains(&(0, 1)));
    }

    #[test]
    fn redefinition_kills_earlier_def() {
        let p = prog("program x\nblock L1:\n  const r1, 1\n  const r1, 2\n  mov r2, r1\n  halt\n");
        let g = build_dependence_graph(&p);
        let into_mov: Vec<_> = g.data.iter().filter(|(_, u)| *u == 2).collect();
        assert_eq!(into_mov, vec![&(1, 2)]);
    }

    #[test]
    fn reaching_defs_merge_at_joins() {
        let p = prog(
            "program x\ninput r9 delayed\nblock A:\n  jz r9, B, C\nblock B:\n  const r1, 1\n  jmp D\nblock C:\n  const r1, 2\n  jmp D\nblock D:\n  out r1\n  halt\n",
        );
        let g = build_dependence_graph(&p);
        let out = node(&p, &g, "D", 0);
        let srcs: BTreeSet<usize> = g.data.iter().filter(|(_, u)| *u == out).map(|(d, _)| *d).collect();
        assert_eq!(srcs, BTreeSet::from([node(&p, &g, "B", 0), node(&p, &g, "C", 0)]));
    }

    #[test]
    fn empty_seeds_give_empty_slice() {
        let p = prog(MATCHER);
        let g = build_dependence_graph(&p);
        assert!(forward_slice(&p, &g, &[]).instrs.is_empty());
    }

    #[test]
    fn matcher_classification() {
        let p = prog(MATCHER);
        let g = build_dependence_graph(&p);
        let bta = classify(&p, &g);
        let c = |l: &str, i| bta.class(p.block_index(l).unwrap(), i);
        let lifted = |l: &str, i| bta.is_lifted(p.block_index(l).unwrap(), i);
        use BindingTime::*;

        // L4's delayed branch controls the outer-loop body.
        let l4_jz = node(&p, &g, "L4", 2);
        assert!(g.control.contains(&(l4_jz, node(&p, &g, "L2", 0))));

        assert_eq!(c("L2", 0), Delayed);
        assert_eq!(c("L2", 1), Supplied);
        assert_eq!(c("L2", 2), Delayed);
        assert_eq!(c("L2", 3), Delayed);
        assert_eq!((c("L3", 0), lifted("L3", 0)), (Supplied, true));
        assert_eq!(c("L3", 1), Supplied);
        assert_eq!(c("L4", 0), Delayed);
        assert_eq!(c("L4", 1), Delayed);
        assert_eq!(c("L4", 2), Delayed);
        assert_eq!(c("L5", 0), Delayed);
        assert_eq!((c("L5", 1), lifted("L5", 1)), (Supplied, false));
        assert_eq!(c("L6", 0), Delayed);
        // `return 1` sits under the delayed outer-loop test.
        assert_eq!(c("L7", 1), Delayed);
        assert!(lifted("L7", 0));
        assert_eq!(bta.branch_class(&p, p.block_index("L3").unwrap()), Some(Supplied));
        assert_eq!(bta.branch_class(&p, p.block_index("L4").unwrap()), Some(Delayed));
        assert_eq!(bta.region_class, vec![Supplied, Delayed]);
        assert!(congruence_violations(&p, &bta).is_empty());
        assert!(bta.render(&p).contains("L3:0 load SUPPLIED LIFTED\n"));
    }

    #[test]
    fn delayed_store_makes_scratch_region_delayed() {
        let p = prog(
            "program x\nregion buf scratch words=4\nregion k supplied words=4\ninput k supplied\ninput r1 delayed\nblock L1:\n  const r2, &buf\n  const r3, &k\n  load r4, [r3+0]\n  store [r2+0], r1\n  store [r2+1], r4\n  load r5, [r2+1]\n  out r5\n  halt\n",
        );
        let bta = analyze(&p);
        use BindingTime::*;
        assert_eq!(bta.region_class, vec![Delayed, Supplied]);
        // The supplied-valued store into a delayed region must be emitted too.
        assert_eq!(bta.class(0, 4), Delayed);
        assert!(bta.is_lifted(0, 2));
        assert_eq!(bta.class(0, 5), Delayed);
        assert!(bta.is_lifted(0, 0));
        assert!(congruence_violations(&p, &bta).is_empty());
    }

    #[test]
    fn delayed_store_into_supplied_region_is_flagged() {
        let p = prog(
            "program x\nregion k supplied words=4\ninput k supplied\ninput r1 delayed\nblock L1:\n  const r2, &k\n  store [r2+0], r1\n  halt\n",
        );
        let bta = analyze(&p);
        let v = congruence_violations(&p, &bta);
        assert_eq!(v, vec!["delayed store L1[1] may write supplied region k".to_owned()]);
    }

    #[test]
    fn supplied_input_register_reaching_delayed_use_needs_entry_lift() {
        let p = prog("program x\ninput r1 supplied\ninput r2 delayed\nblock L1:\n  add r2, r1\n  mov r0, r2\n  halt\n");
        let bta = analyze(&p);
        assert_eq!(bta.entry_lifts, vec![Reg::new(1).unwrap()]);
    }

    #[test]
    fn delayed_branch_in_l4_controls_l2() {
        let p = prog(MATCHER);
        let g = build_dependence_graph(&p);
        let branch = node(&p, &g, "L4", 2);
        for i in 0..4 {
            assert!(g.control.contains(&(branch, node(&p, &g, "L2", i))), "L2[{i}]");
        }
        assert!(!g.control.contains(&(branch, node(&p, &g, "L1", 0))));
    }

    /// Breadth-first reachability over the explicit edge lists: data and
    /// memory edges, and control edges into effects.
    fn bfs_slice(p: &Program, g: &DependenceGraph) -> BTreeSet<usize> {
        let inputs: Vec<usize> = p
            .inputs
            .iter()
            .filter_map(|b| match &b.target {
                InputTarget::Region(n) => p.region_index(n),
                InputTarget::Reg(_) => None,
            })
            .collect();
        let mut frontier: VecDeque<usize> = g
            .entry_uses
            .iter()
            .filter(|(r, _)| p.binding(&InputTarget::Reg(*r)).is_some())
            .map(|(_, u)| *u)
            .collect();
        for (k, acc) in g.access.iter().enumerate() {
            if acc.as_ref().is_some_and(|a| inputs.iter().any(|r| a.contains(*r))) {
                frontier.push_back(k);
            }
        }
        let effect = |k: usize| p.blocks[g.nodes[k].block].instrs[g.nodes[k].index].is_effect();
        let mut seen = BTreeSet::new();
        while let Some(k) = frontier.pop_front() {
            if !seen.insert(k) {
                continue;
            }
            let data = g.data.iter().chain(&g.memory).filter(|e| e.0 == k).map(|e| e.1);
            let ctrl = g.control.iter().filter(|e| e.0 == k && effect(e.1)).map(|e| e.1);
            frontier.extend(data.chain(ctrl));
        }
        seen
    }

    #[test]
    fn all_inputs_delayed_matches_reachability() {
        for spec in ["matcher", "dotproduct", "filter"] {
            let b = crate::bench::make_benchmark(&crate::bench::BenchSpec::parse(spec).unwrap()).unwrap();
            let p = &b.program;
            let g = build_dependence_graph(p);
            let seeds: Vec<InputTarget> = p.inputs.iter().map(|i| i.target.clone()).collect();
            assert_eq!(forward_slice(p, &g, &seeds).instrs, bfs_slice(p, &g), "{spec}");
        }
    }

    #[test]
    fn slice_grows_with_seeds() {
        let p = prog(MATCHER);
        let g = build_dependence_graph(&p);
        let str_only = forward_slice(&p, &g, &[InputTarget::Region("str".into())]);
        let both = forward_slice(
            &p,
            &g,
            &[
                InputTarget::Region("str".into()),
                InputTarget::Reg(Reg::new(1).unwrap()),
            ],
        );
        assert!(str_only.instrs.is_subset(&both.instrs));
        let all = forward_slice(
            &p,
            &g,
            &[
                InputTarget::Region("str".into()),
                InputTarget::Region("pat".into()),
                InputTarget::Reg(Reg::new(1).unwrap()),
            ],
        );
        assert!(both.instrs.is_subset(&all.instrs));
        assert!(all.instrs.contains(&node(&p, &g, "L3", 0)));
    }
}
