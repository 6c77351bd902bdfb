//! Running one fault over a fixed input batch, with exact pruning of faults
//! that a fault-free trace proves can never be excited.

use serde::{Deserialize, Serialize};

use super::fault::{ExcitationCounter, IsaFault};
use super::inst::Program;
use super::vm::{execute, execute_with, SiteMasks, Termination};

#[derive(Debug, Clone)]
struct Golden {
    logits: Vec<f32>,
    instructions: u64,
    masks: SiteMasks,
}

/// A lowered program plus the fault-free reference for each batch input.
#[derive(Debug, Clone)]
pub struct IsaBatch {
    pub program: Program,
    inputs: Vec<Vec<f32>>,
    golden: Vec<Golden>,
}

/// Outcome of one fault over the batch. Execution stops at the first input
/// that does not complete; `logits` then holds only the completed inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsaRun {
    pub termination: Termination,
    pub counter: ExcitationCounter,
    pub logits: Vec<Vec<f32>>,
    /// Number of inputs whose execution was skipped because the trace shows
    /// the fault cannot be excited there.
    pub pruned: usize,
}

impl IsaBatch {
    pub fn new(program: Program, inputs: Vec<Vec<f32>>) -> Self {
        let golden = inputs
            .iter()
            .map(|x| {
                let mut masks = SiteMasks::default();
                let ex = execute_with(&program, program.memory_with_input(x), &mut masks, u64::MAX);
                assert_eq!(ex.termination, Termination::Completed, "fault-free program must complete");
                Golden { logits: program.read_output(&ex.memory), instructions: ex.instructions, masks }
            })
            .collect();
        Self { program, inputs, golden }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn golden_logits(&self) -> Vec<Vec<f32>> {
        self.golden.iter().map(|g| g.logits.clone()).collect()
    }

    pub fn golden_instructions(&self) -> Vec<u64> {
        self.golden.iter().map(|g| g.instructions).collect()
    }

    /// Inject `fault` on every input in order. The watchdog for each input is
    /// `watchdog_mult` times its fault-free instruction count. With `prune`,
    /// inputs on which the fault provably never excites reuse the golden
    /// result; the outcome is identical either way.
    pub fn run(&self, fault: &IsaFault, watchdog_mult: u64, prune: bool) -> IsaRun {
        let mut counter = ExcitationCounter::default();
        let mut logits = Vec::with_capacity(self.inputs.len());
        let mut pruned = 0;
        for (x, g) in self.inputs.iter().zip(&self.golden) {
            if prune {
                if let Some(uses) = g.masks.unexcitable(fault) {
                    counter.uses += uses;
                    logits.push(g.logits.clone());
                    pruned += 1;
                    continue;
                }
            }
            let watchdog = g.instructions.saturating_mul(watchdog_mult.max(1));
            let ex = execute(&self.program, self.program.memory_with_input(x), Some(fault), watchdog);
            counter = counter.merge(ex.counter);
            if ex.termination != Termination::Completed {
                return IsaRun { termination: ex.termination, counter, logits, pruned };
            }
            logits.push(self.program.read_output(&ex.memory));
        }
        IsaRun { termination: Termination::Completed, counter, logits, pruned }
    }
}
