//! The specialization engine: a FIFO worklist over (state, block) pairs.
//! Each dequeued pair runs the block's supplied instructions on a working
//! copy of the state and emits the delayed ones into a residual block.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::bta::BtaResult;
use crate::ir::{self, BindingTime, InputAssignment, InputTarget, Instr, Operand, Program, Reg, RegionClass, NUM_REGS};
use crate::residual::{ResidualBuilder, ResidualError, SpecLabel};
use crate::statestore::{Admission, Metrics, MutableState, Regs, Snapshot, StateStore, StoreConfig, StoreError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecConfig {
    pub cow: bool,
    pub fingerprint: bool,
    /// Upper bound on dequeued states.
    pub max_states: u64,
    /// Upper bound on instructions executed for one block instance.
    pub block_fuel: u64,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig {
            cow: true,
            fingerprint: true,
            max_states: 200_000,
            block_fuel: 1 << 20,
        }
    }
}

impl SpecConfig {
    pub fn with_modes(cow: bool, fingerprint: bool) -> Self {
        SpecConfig {
            cow,
            fingerprint,
            ..Self::default()
        }
    }

    fn store(&self) -> StoreConfig {
        StoreConfig {
            cow: self.cow,
            fingerprint: self.fingerprint,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("bad supplied input: {0}")]
    Input(String),
    #[error("state budget of {0} exhausted; the supplied state may grow without bound")]
    Budget(u64),
    #[error("{block}[{index}]: out-of-region access at address {addr}")]
    Fault { block: String, index: usize, addr: u64 },
    #[error("{block}[{index}]: congruence violation: {message}")]
    Congruence {
        block: String,
        index: usize,
        message: String,
    },
    #[error("{block}: block fuel exhausted")]
    Fuel { block: String },
    #[error(transparent)]
    Residual(#[from] ResidualError),
}

#[derive(Debug)]
pub struct SpecOutput {
    pub residual: Program,
    pub metrics: Metrics,
    /// Outcome of every enqueue attempt, in order (`true` = fresh).
    pub decisions: Vec<bool>,
}

struct Item {
    state: Arc<Snapshot>,
    block: usize,
    label: SpecLabel,
}

struct Engine<'a> {
    p: &'a Program,
    bta: &'a BtaResult,
    cfg: SpecConfig,
    store: StateStore,
    builder: ResidualBuilder,
    worklist: VecDeque<Item>,
    decisions: Vec<bool>,
}

fn operand(regs: &Regs, o: &Operand) -> u64 {
    match o {
        Operand::Reg(r) => regs[r.index()],
        Operand::Imm(v) => *v,
    }
}

impl Engine<'_> {
    fn congruence(&self, block: usize, index: usize, message: String) -> SpecError {
        SpecError::Congruence {
            block: self.p.blocks[block].label.clone(),
            index,
            message,
        }
    }

    fn fault(&self, block: usize, index: usize, addr: u64) -> SpecError {
        SpecError::Fault {
            block: self.p.blocks[block].label.clone(),
            index,
            addr,
        }
    }

    /// Region index for a supplied access, rejecting delayed regions.
    fn supplied_region(&self, block: usize, index: usize, addr: u64) -> Result<usize, SpecError> {
        let r = self.p.region_at(addr).ok_or_else(|| self.fault(block, index, addr))?;
        if self.bta.region_class[r] == BindingTime::Delayed {
            return Err(self.congruence(
                block,
                index,
                format!("supplied access to delayed region {}", self.p.regions[r].name),
            ));
        }
        Ok(r)
    }

    /// Defense in depth for delayed stores: they may never write supplied memory.
    fn check_delayed_store(
        &self,
        m: &MutableState,
        block: usize,
        index: usize,
        base: Reg,
        offset: i64,
    ) -> Result<(), SpecError> {
        let supplied = |r: usize| self.bta.region_class[r] == BindingTime::Supplied;
        if !self.bta.use_is_delayed(block, index, base) {
            let addr = m.regs[base.index()].wrapping_add(offset as u64);
            if let Some(r) = self.p.region_at(addr).filter(|&r| supplied(r)) {
                return Err(self.congruence(
                    block,
                    index,
                    format!(
                        "delayed store to supplied region {} at address {addr}",
                        self.p.regions[r].name
                    ),
                ));
            }
            return Ok(());
        }
        let may = self
            .bta
            .access(block, index)
            .map(|a| a.iter(self.p.regions.len()))
            .unwrap_or_default();
        if let Some(r) = may.into_iter().find(|&r| supplied(r)) {
            return Err(self.congruence(
                block,
                index,
                format!("delayed store may write supplied region {}", self.p.regions[r].name),
            ));
        }
        Ok(())
    }

    fn enqueue(&mut self, state: &Arc<Snapshot>, block: usize) -> SpecLabel {
        let admission = self.store.check_and_insert(block, state);
        self.store.metrics.enqueues += 1;
        self.decisions.push(admission.is_fresh());
        let label = SpecLabel::new(&self.p.blocks[block].label, admission.tag());
        if let Admission::Fresh { .. } = admission {
            self.worklist.push_back(Item {
                state: state.clone(),
                block,
                label: label.clone(),
            });
        }
        label
    }

    fn exec_block(&mut self, item: Item) -> Result<(), SpecError> {
        let Item { state, block, label } = item;
        let mut m = self.store.restore(&state);
        drop(state);
        self.builder.open_block(&label)?;
        let p = self.p;
        let blk = &p.blocks[block];
        if blk.instrs.len() as u64 > self.cfg.block_fuel {
            return Err(SpecError::Fuel {
                block: blk.label.clone(),
            });
        }

        for (i, ins) in blk.instrs.iter().enumerate() {
            let class = self.bta.class(block, i);
            match ins {
                Instr::Jmp { target } => {
                    let next = p.block_index(target).expect("validated");
                    let sealed = self.store.seal(m);
                    let to = self.enqueue(&sealed, next);
                    self.builder.emit_jump(&to)?;
                    return Ok(());
                }
                Instr::Jz {
                    cond,
                    if_zero,
                    if_nonzero,
                } => {
                    let z = p.block_index(if_zero).expect("validated");
                    let nz = p.block_index(if_nonzero).expect("validated");
                    if class == BindingTime::Supplied {
                        let next = if m.regs[cond.index()] == 0 { z } else { nz };
                        let sealed = self.store.seal(m);
                        let to = self.enqueue(&sealed, next);
                        self.builder.emit_jump(&to)?;
                    } else {
                        let sealed = self.store.seal(m);
                        let to_z = self.enqueue(&sealed, z);
                        let to_nz = self.enqueue(&sealed, nz);
                        self.builder.emit_cond_jump(*cond, &to_z, &to_nz)?;
                    }
                    return Ok(());
                }
                Instr::Halt => {
                    self.builder.emit_halt()?;
                    return Ok(());
                }
                Instr::Out { .. } => self.builder.emit_instr(ins.clone())?,
                _ if class == BindingTime::Delayed => {
                    if let Instr::Store { base, offset, .. } = ins {
                        self.check_delayed_store(&m, block, i, *base, *offset)?;
                    }
                    self.builder.emit_instr(ins.clone())?;
                    if let Some(d) = ins.def() {
                        m.regs[d.index()] = 0;
                    }
                }
                _ => {
                    self.exec_supplied(&mut m, block, i, ins)?;
                    if let (true, Some(d)) = (self.bta.is_lifted(block, i), ins.def()) {
                        self.builder.emit_lift(d, m.regs[d.index()])?;
                    }
                }
            }
        }
        unreachable!("validated blocks end in a terminator")
    }

    fn exec_supplied(&self, m: &mut MutableState, block: usize, i: usize, ins: &Instr) -> Result<(), SpecError> {
        match ins {
            Instr::Const { dst, value } => m.regs[dst.index()] = *value,
            Instr::Mov { dst, src } => m.regs[dst.index()] = operand(&m.regs, src),
            Instr::Alu { op, dst, src } => m.regs[dst.index()] = op.apply(m.regs[dst.index()], operand(&m.regs, src)),
            Instr::Load { dst, base, offset } => {
                let addr = m.regs[base.index()].wrapping_add(*offset as u64);
                self.supplied_region(block, i, addr)?;
                m.regs[dst.index()] = m.read_word(addr);
            }
            Instr::Store { base, offset, src } => {
                let addr = m.regs[base.index()].wrapping_add(*offset as u64);
                self.supplied_region(block, i, addr)?;
                let v = operand(&m.regs, src);
                m.write_word(addr, v).map_err(|e| match e {
                    StoreError::OutOfRegion(a) => self.fault(block, i, a),
                    other => SpecError::Input(other.to_string()),
                })?;
            }
            Instr::Out { .. } | Instr::Jmp { .. } | Instr::Jz { .. } | Instr::Halt => {}
        }
        Ok(())
    }
}

/// Checks that `supplied` binds exactly the supplied inputs of `p`.
fn check_supplied(p: &Program, supplied: &InputAssignment) -> Result<(), SpecError> {
    for t in supplied.targets() {
        match p.binding(&t) {
            Some(BindingTime::Supplied) => {}
            Some(BindingTime::Delayed) => return Err(SpecError::Input(format!("{t} is a delayed input"))),
            None => return Err(SpecError::Input(format!("{t} is not an input of {}", p.name))),
        }
    }
    for b in p.inputs.iter().filter(|b| b.time == BindingTime::Supplied) {
        let present = match &b.target {
            InputTarget::Reg(r) => supplied.regs.contains_key(r),
            InputTarget::Region(n) => supplied.regions.contains_key(n),
        };
        if !present {
            return Err(SpecError::Input(format!("supplied input {} is not bound", b.target)));
        }
    }
    for (name, words) in &supplied.regions {
        let r = p.region(name).expect("checked above");
        if words.len() as u64 > r.words {
            return Err(SpecError::Input(format!(
                "{name}: {} words exceed region size {}",
                words.len(),
                r.words
            )));
        }
    }
    Ok(())
}

/// Produces the residual program of `p` for the supplied inputs.
pub fn specialize(
    p: &Program,
    bta: &BtaResult,
    supplied: &InputAssignment,
    cfg: SpecConfig,
) -> Result<SpecOutput, SpecError> {
    let start = Instant::now();
    let diags = ir::validate(p);
    if !diags.is_empty() {
        return Err(SpecError::InvalidProgram(diags.join("; ")));
    }
    check_supplied(p, supplied)?;

    let mut regs = [0u64; NUM_REGS];
    for (r, v) in &supplied.regs {
        regs[r.index()] = *v;
    }
    let regions: Vec<(u64, &[u64])> = supplied
        .regions
        .iter()
        .map(|(n, w)| (p.region(n).expect("checked").base, w.as_slice()))
        .collect();
    debug_assert!(supplied
        .regions
        .keys()
        .all(|n| p.region(n).is_some_and(|r| r.class == RegionClass::Supplied)));

    let mut engine = Engine {
        p,
        bta,
        cfg,
        store: StateStore::new(p, cfg.store()),
        builder: ResidualBuilder::new(),
        worklist: VecDeque::new(),
        decisions: Vec::new(),
    };
    let initial = engine
        .store
        .create_initial(regs, &regions)
        .map_err(|e| SpecError::Input(e.to_string()))?;
    let entry = p.entry_index().expect("validated");
    let entry_label = engine.enqueue(&initial, entry);
    drop(initial);

    while let Some(item) = engine.worklist.pop_front() {
        engine.store.metrics.states_visited += 1;
        if engine.store.metrics.states_visited > cfg.max_states {
            return Err(SpecError::Budget(cfg.max_states));
        }
        engine.exec_block(item)?;
    }

    let prologue: Vec<(Reg, u64)> = bta.entry_lifts.iter().map(|r| (*r, regs[r.index()])).collect();
    let residual = engine.builder.finalize(&entry_label, p, &prologue)?;
    let mut metrics = engine.store.metrics();
    metrics.wall_ms = start.elapsed().as_millis() as u64;
    Ok(SpecOutput {
        residual,
        metrics,
        decisions: engine.decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bta::analyze;
    use crate::ir::{parse_program, run_program};
    use crate::residual::count_branches;

    fn spec(text: &str, supplied: InputAssignment) -> Result<SpecOutput, SpecError> {
        let p = parse_program(text).unwrap();
        specialize(&p, &analyze(&p), &supplied, SpecConfig::default())
    }

    fn r(i: u8) -> Reg {
        Reg::new(i).unwrap()
    }

    const POWER: &str = "program power
input r1 supplied
input r2 delayed
block L1:
  const r0, 1
  jmp L2
block L2:
  jz r1, L4, L3
block L3:
  mul r0, r2
  sub r1, 1
  jmp L2
block L4:
  halt
";

    #[test]
    fn power_unrolls_completely() {
        let out = spec(POWER, InputAssignment::new().with_reg(r(1), 3)).unwrap();
        assert_eq!(count_branches(&out.residual), 0);
        let p = parse_program(POWER).unwrap();
        for x in [0u64, 1, 2, 7, u64::MAX] {
            let a = InputAssignment::new().with_reg(r(2), x);
            let res = run_program(&out.residual, &a, 1000).unwrap();
            let orig = run_program(&p, &a.clone().with_reg(r(1), 3), 1000).unwrap();
            assert_eq!(res.observation(), orig.observation());
            assert_eq!(res.r0, x.wrapping_mul(x).wrapping_mul(x));
        }
        assert_eq!(out.metrics.dedup_hits, 0);
        assert!(out.decisions.iter().all(|d| *d));
    }

    #[test]
    fn supplied_only_block_leaves_just_a_jump() {
        let out = spec(
            "program x\ninput r1 delayed\nblock L1:\n  const r2, 4\n  add r2, 3\n  jmp L2\nblock L2:\n  mov r0, r1\n  halt\n",
            InputAssignment::new(),
        )
        .unwrap();
        assert_eq!(out.residual.blocks[0].instrs.len(), 1);
        assert!(matches!(out.residual.blocks[0].instrs[0], Instr::Jmp { .. }));
    }

    #[test]
    fn unbounded_supplied_state_hits_budget() {
        let p = parse_program("program x\ninput r9 delayed\nblock L1:\n  add r1, 1\n  jmp L1\n").unwrap();
        let cfg = SpecConfig {
            max_states: 50,
            ..SpecConfig::default()
        };
        let err = specialize(&p, &analyze(&p), &InputAssignment::new(), cfg).unwrap_err();
        assert_eq!(err, SpecError::Budget(50));
    }

    #[test]
    fn delayed_store_to_supplied_region_is_rejected() {
        let err = spec(
            "program x\nregion k supplied words=4\ninput k supplied\ninput r1 delayed\nblock L1:\n  const r2, &k\n  store [r2+1], r1\n  halt\n",
            InputAssignment::new().with_region("k", vec![1, 2]),
        )
        .unwrap_err();
        assert!(matches!(err, SpecError::Congruence { index: 1, .. }), "{err}");
    }

    #[test]
    fn supplied_fault_is_reported() {
        let err = spec(
            "program x\nregion k supplied words=4\ninput k supplied\nblock L1:\n  const r2, &k\n  load r3, [r2+4]\n  halt\n",
            InputAssignment::new().with_region("k", vec![]),
        )
        .unwrap_err();
        assert_eq!(
            err,
            SpecError::Fault {
                block: "L1".into(),
                index: 1,
                addr: 516
            }
        );
    }

    #[test]
    fn supplied_inputs_must_be_complete_and_exact() {
        let e = spec(POWER, InputAssignment::new()).unwrap_err();
        assert!(matches!(e, SpecError::Input(_)));
        let e = spec(POWER, InputAssignment::new().with_reg(r(1), 1).with_reg(r(2), 1)).unwrap_err();
        assert!(matches!(e, SpecError::Input(_)));
    }

    #[test]
    fn supplied_input_register_used_late_is_lifted_in_prologue() {
        let text = "program x\ninput r1 supplied\ninput r2 delayed\nblock L1:\n  add r2, r1\n  mov r0, r2\n  halt\n";
        let out = spec(text, InputAssignment::new().with_reg(r(1), 40)).unwrap();
        assert_eq!(out.residual.entry, "prologue");
        let res = run_program(&out.residual, &InputAssignment::new().with_reg(r(2), 2), 100).unwrap();
        assert_eq!(res.r0, 42);
    }

    #[test]
    fn delayed_branch_emits_conditional() {
        let text = "program x\ninput r1 delayed\nblock L1:\n  const r3, 5\n  jz r1, L2, L3\nblock L2:\n  out r3\n  halt\nblock L3:\n  out 9\n  halt\n";
        let out = spec(text, InputAssignment::new()).unwrap();
        assert_eq!(count_branches(&out.residual), 1);
        assert_eq!(out.decisions, vec![true, true, true]);
        for (x, want) in [(0u64, 5u64), (1, 9)] {
            let res = run_program(&out.residual, &InputAssignment::new().with_reg(r(1), x), 100).unwrap();
            assert_eq!(res.tape, vec![want]);
        }
    }
}
