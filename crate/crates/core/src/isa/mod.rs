//! A small deterministic register machine, the lowering of models into it,
//! and permanent stuck-at fault injection on its registers and FU ports.

pub mod fault;
pub mod inst;
pub mod lower;
pub mod sweep;
pub mod vm;

pub use fault::{enumerate_fault_space, ExcitationCounter, FaultTarget, IsaFault, Port};
pub use inst::{FuKind, Op, Program, Reg, RegRole, NUM_REGS};
pub use lower::{lower, LowerError};
pub use sweep::{IsaBatch, IsaRun};
pub use vm::{execute, execute_traced, Execution, Termination, TrapKind};
