//! Builder for residual programs. Each residual block is a specialized
//! copy of a subject block for one partial state.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::ir::{self, BindingTime, Block, InputBinding, Instr, Operand, Program, Reg};

/// A subject block specialized for one state: `<origin>__<32 hex digits>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpecLabel {
    pub origin: String,
    pub tag: u128,
}

impl SpecLabel {
    pub fn new(origin: &str, tag: u128) -> Self {
        SpecLabel {
            origin: origin.to_owned(),
            tag,
        }
    }
}

impl fmt::Display for SpecLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}__{:032x}", self.origin, self.tag)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResidualError {
    #[error("residual block {0} opened twice")]
    DuplicateBlock(String),
    #[error("labels for distinct states render identically as {0}")]
    LabelCollision(String),
    #[error("no residual block is open")]
    NoOpenBlock,
    #[error("emission into {0} after its terminator")]
    AfterTerminator(String),
    #[error("jump to {0}, which was never opened")]
    Dangling(String),
    #[error("residual block {0} has no terminator")]
    Unterminated(String),
    #[error("residual program is invalid: {0}")]
    Invalid(String),
}

#[derive(Default)]
pub struct ResidualBuilder {
    blocks: Vec<Block>,
    opened: HashMap<SpecLabel, usize>,
    rendered: HashMap<String, SpecLabel>,
    targets: BTreeSet<String>,
    open: Option<usize>,
    /// Register contents known from lifts in the open block.
    lifted: HashMap<Reg, u64>,
}

impl ResidualBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn render(&mut self, label: &SpecLabel) -> Result<String, ResidualError> {
        let text = label.to_string();
        match self.rendered.get(&text) {
            Some(existing) if existing != label => Err(ResidualError::LabelCollision(text)),
            Some(_) => Ok(text),
            None => {
                self.rendered.insert(text.clone(), label.clone());
                Ok(text)
            }
        }
    }

    pub fn open_block(&mut self, label: &SpecLabel) -> Result<(), ResidualError> {
        let text = self.render(label)?;
        if self.opened.contains_key(label) {
            return Err(ResidualError::DuplicateBlock(text));
        }
        self.opened.insert(label.clone(), self.blocks.len());
        self.blocks.push(Block {
            label: text,
            instrs: Vec::new(),
        });
        self.open = Some(self.blocks.len() - 1);
        self.lifted.clear();
        Ok(())
    }

    pub fn is_opened(&self, label: &SpecLabel) -> bool {
        self.opened.contains_key(label)
    }

    fn current(&mut self) -> Result<&mut Block, ResidualError> {
        let i = self.open.ok_or(ResidualError::NoOpenBlock)?;
        let block = &mut self.blocks[i];
        if block.terminator().is_some() {
            return Err(ResidualError::AfterTerminator(block.label.clone()));
        }
        Ok(block)
    }

    fn push(&mut self, ins: Instr) -> Result<(), ResidualError> {
        self.current()?.instrs.push(ins);
        Ok(())
    }

    /// Appends a non-terminator instruction unchanged.
    pub fn emit_instr(&mut self, ins: Instr) -> Result<(), ResidualError> {
        debug_assert!(!ins.is_terminator());
        if let Some(d) = ins.def() {
            self.lifted.remove(&d);
        }
        self.push(ins)
    }

    /// Materializes a supplied value: `const r, v`. Skipped when the open
    /// block already set `r` to `v`.
    pub fn emit_lift(&mut self, r: Reg, v: u64) -> Result<(), ResidualError> {
        self.current()?;
        if self.lifted.get(&r) == Some(&v) {
            return Ok(());
        }
        self.lifted.insert(r, v);
        self.push(Instr::Const { dst: r, value: v })
    }

    pub fn emit_jump(&mut self, target: &SpecLabel) -> Result<(), ResidualError> {
        let target = self.render(target)?;
        self.targets.insert(target.clone());
        self.push(Instr::Jmp { target })
    }

    pub fn emit_cond_jump(
        &mut self,
        cond: Reg,
        if_zero: &SpecLabel,
        if_nonzero: &SpecLabel,
    ) -> Result<(), ResidualError> {
        let (z, nz) = (self.render(if_zero)?, self.render(if_nonzero)?);
        self.targets.insert(z.clone());
        self.targets.insert(nz.clone());
        self.push(Instr::Jz {
            cond,
            if_zero: z,
            if_nonzero: nz,
        })
    }

    pub fn emit_halt(&mut self) -> Result<(), ResidualError> {
        self.push(Instr::Halt)
    }

    /// Assembles the residual program. `prologue` holds register values
    /// that must be set before the entry block runs.
    pub fn finalize(
        self,
        entry: &SpecLabel,
        source: &Program,
        prologue: &[(Reg, u64)],
    ) -> Result<Program, ResidualError> {
        let names: BTreeSet<String> = self.blocks.iter().map(|b| b.label.clone()).collect();
        if let Some(t) = self.targets.iter().find(|t| !names.contains(*t)) {
            return Err(ResidualError::Dangling(t.clone()));
        }
        if let Some(b) = self.blocks.iter().find(|b| b.terminator().is_none()) {
            return Err(ResidualError::Unterminated(b.label.clone()));
        }
        let entry_text = entry.to_string();
        if !names.contains(&entry_text) {
            return Err(ResidualError::Dangling(entry_text));
        }

        let mut blocks = self.blocks;
        let mut entry_label = entry_text;
        if !prologue.is_empty() {
            let mut label = "prologue".to_owned();
            while names.contains(&label) {
                label.push('_');
            }
            let mut instrs: Vec<Instr> = prologue
                .iter()
                .map(|&(dst, value)| Instr::Const { dst, value })
                .collect();
            instrs.push(Instr::Jmp { target: entry_label });
            blocks.insert(
                0,
                Block {
                    label: label.clone(),
                    instrs,
                },
            );
            entry_label = label;
        }

        let program = Program {
            name: format!("{}_spec", source.name),
            regions: source.regions.clone(),
            inputs: source
                .inputs
                .iter()
                .filter(|b| b.time == BindingTime::Delayed)
                .cloned()
                .collect::<Vec<InputBinding>>(),
            blocks,
            entry: entry_label,
        };
        let diags = ir::validate(&program);
        if !diags.is_empty() {
            return Err(ResidualError::Invalid(diags.join("; ")));
        }
        Ok(program)
    }
}

/// Renames blocks to `B0, B1, ...` in block order so residuals built under
/// different state keys can be compared textually.
pub fn canonicalize_labels(p: &Program) -> Program {
    let names: HashMap<&str, String> = p
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.label.as_str(), format!("B{i}")))
        .collect();
    let rename = |l: &str| names.get(l).cloned().unwrap_or_else(|| l.to_owned());
    let blocks = p
        .blocks
        .iter()
        .map(|b| Block {
            label: rename(&b.label),
            instrs: b
                .instrs
                .iter()
                .map(|ins| match ins {
                    Instr::Jmp { target } => Instr::Jmp { target: rename(target) },
                    Instr::Jz {
                        cond,
                        if_zero,
                        if_nonzero,
                    } => Instr::Jz {
                        cond: *cond,
                        if_zero: rename(if_zero),
                        if_nonzero: rename(if_nonzero),
                    },
                    other => other.clone(),
                })
                .collect(),
        })
        .collect();
    Program {
        blocks,
        entry: rename(&p.entry),
        ..p.clone()
    }
}

/// Number of `jz` instructions; a fully unrolled supplied loop leaves none.
pub fn count_branches(p: &Program) -> usize {
    p.blocks
        .iter()
        .flat_map(|b| &b.instrs)
        .filter(|i| matches!(i, Instr::Jz { .. }))
        .count()
}

/// Immediate operands of `const` instructions writing `r`, in block order.
pub fn constants_into(block: &Block, r: Reg) -> Vec<u64> {
    block
        .instrs
        .iter()
        .filter_map(|i| match i {
            Instr::Const { dst, value } if *dst == r => Some(*value),
            Instr::Mov {
                dst,
                src: Operand::Imm(v),
            } if *dst == r => Some(*v),
            _ => None,
        })
        .collect()
}
