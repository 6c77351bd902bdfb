use std::fmt;

use serde::{Deserialize, Serialize};

pub type Reg = u8;

/// Architectural register file size.
pub const NUM_REGS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Reg(Reg),
    Imm(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    F32,
    S32,
    U32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

/// One machine instruction. Memory operands are byte addresses
/// `reg[base] + off`; accesses must be 4-byte aligned and in bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Ld { rd: Reg, base: Reg, off: i32 },
    St { rs: Reg, base: Reg, off: i32 },
    Mov { rd: Reg, ra: Reg },
    Movi { rd: Reg, imm: u32 },
    Add { ty: Ty, rd: Reg, ra: Reg, b: Src },
    Mul { ty: Ty, rd: Reg, ra: Reg, b: Src },
    /// `rd = ra * rb + rc`, single rounding.
    Fma { rd: Reg, ra: Reg, rb: Reg, rc: Reg },
    Max { rd: Reg, ra: Reg, rb: Reg },
    Min { rd: Reg, ra: Reg, rb: Reg },
    Cvt { rd: Reg, ra: Reg, to: Ty, from: Ty },
    /// `rd = (ra cmp b) as u32`.
    Setp { cmp: Cmp, ty: Ty, rd: Reg, ra: Reg, b: Src },
    /// Branch to `target` when `pred` is absent or holds a nonzero word.
    Bra { pred: Option<Reg>, target: u32 },
    Halt,
}

/// Functional units an instruction can be dispatched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuKind {
    FpAdd,
    FpMul,
    FpFma,
    FpMinMax,
    Lsu,
    IntAlu,
}

impl FuKind {
    /// Units whose ports carry injectable datapath values.
    pub const VALUE_UNITS: [FuKind; 4] = [FuKind::FpAdd, FuKind::FpMul, FuKind::FpFma, FuKind::FpMinMax];

    pub fn short(self) -> &'static str {
        match self {
            FuKind::FpAdd => "add",
            FuKind::FpMul => "mul",
            FuKind::FpFma => "fma",
            FuKind::FpMinMax => "minmax",
            FuKind::Lsu => "lsu",
            FuKind::IntAlu => "alu",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        [FuKind::FpAdd, FuKind::FpMul, FuKind::FpFma, FuKind::FpMinMax, FuKind::Lsu, FuKind::IntAlu]
            .into_iter()
            .find(|f| f.short() == s)
    }
}

impl Op {
    pub fn unit(&self) -> Option<FuKind> {
        match *self {
            Op::Ld { .. } | Op::St { .. } => Some(FuKind::Lsu),
            Op::Add { ty: Ty::F32, .. } => Some(FuKind::FpAdd),
            Op::Mul { ty: Ty::F32, .. } => Some(FuKind::FpMul),
            Op::Fma { .. } => Some(FuKind::FpFma),
            Op::Max { .. } | Op::Min { .. } => Some(FuKind::FpMinMax),
            Op::Add { .. } | Op::Mul { .. } | Op::Cvt { .. } | Op::Setp { .. } => Some(FuKind::IntAlu),
            Op::Mov { .. } | Op::Movi { .. } | Op::Bra { .. } | Op::Halt => None,
        }
    }

    /// Registers read, in evaluation order.
    pub fn reads(&self) -> Vec<Reg> {
        let src = |b: Src| match b {
            Src::Reg(r) => Some(r),
            Src::Imm(_) => None,
        };
        match *self {
            Op::Ld { base, .. } => vec![base],
            Op::St { rs, base, .. } => vec![base, rs],
            Op::Mov { ra, .. } | Op::Cvt { ra, .. } => vec![ra],
            Op::Movi { .. } | Op::Halt => vec![],
            Op::Add { ra, b, .. } | Op::Mul { ra, b, .. } | Op::Setp { ra, b, .. } => {
                std::iter::once(ra).chain(src(b)).collect()
            }
            Op::Fma { ra, rb, rc, .. } => vec![ra, rb, rc],
            Op::Max { ra, rb, .. } | Op::Min { ra, rb, .. } => vec![ra, rb],
            Op::Bra { pred, .. } => pred.into_iter().collect(),
        }
    }

    pub fn writes(&self) -> Option<Reg> {
        match *self {
            Op::Ld { rd, .. }
            | Op::Mov { rd, .. }
            | Op::Movi { rd, .. }
            | Op::Add { rd, .. }
            | Op::Mul { rd, .. }
            | Op::Fma { rd, .. }
            | Op::Max { rd, .. }
            | Op::Min { rd, .. }
            | Op::Cvt { rd, .. }
            | Op::Setp { rd, .. } => Some(rd),
            Op::St { .. } | Op::Bra { .. } | Op::Halt => None,
        }
    }
}

fn ty_suffix(t: Ty) -> &'static str {
    match t {
        Ty::F32 => "F32",
        Ty::S32 => "S32",
        Ty::U32 => "U32",
    }
}

impl fmt::Display for Src {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Src::Reg(r) => write!(f, "R{r}"),
            Src::Imm(v) => write!(f, "#{v:#x}"),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Op::Ld { rd, base, off } => write!(f, "LD R{rd}, R{base}, #{off}"),
            Op::St { rs, base, off } => write!(f, "ST R{rs}, R{base}, #{off}"),
            Op::Mov { rd, ra } => write!(f, "MOV R{rd}, R{ra}"),
            Op::Movi { rd, imm } => write!(f, "MOVI R{rd}, #{imm:#x}"),
            Op::Add { ty, rd, ra, b } => write!(f, "ADD.{} R{rd}, R{ra}, {b}", ty_suffix(ty)),
            Op::Mul { ty, rd, ra, b } => write!(f, "MUL.{} R{rd}, R{ra}, {b}", ty_suffix(ty)),
            Op::Fma { rd, ra, rb, rc } => write!(f, "FMA R{rd}, R{ra}, R{rb}, R{rc}"),
            Op::Max { rd, ra, rb } => write!(f, "MAX R{rd}, R{ra}, R{rb}"),
            Op::Min { rd, ra, rb } => write!(f, "MIN R{rd}, R{ra}, R{rb}"),
            Op::Cvt { rd, ra, to, from } => {
                write!(f, "CVT.{}.{} R{rd}, R{ra}", ty_suffix(to), ty_suffix(from))
            }
            Op::Setp { cmp, ty, rd, ra, b } => {
                write!(f, "SETP.{:?}.{} R{rd}, R{ra}, {b}", cmp, ty_suffix(ty))
                    .map(|_| ())?;
                Ok(())
            }
            Op::Bra { pred: Some(p), target } => write!(f, "BRA R{p}, #{target}"),
            Op::Bra { pred: None, target } => write!(f, "BRA #{target}"),
            Op::Halt => write!(f, "HALT"),
        }
    }
}

/// What the lowering uses a register for. Registers never change role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegRole {
    /// Pointers, loop bounds and other address arithmetic.
    Address,
    /// Branch predicates written by `SETP`.
    Predicate,
    /// FP32 activations, weights and accumulators.
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    /// First word index.
    pub start: usize,
    pub len: usize,
}

impl Region {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    pub fn byte_addr(&self) -> u32 {
        (self.start * 4) as u32
    }
}

/// A lowered, validated program plus its initial memory image.
#[derive(Debug, Clone)]
pub struct Program {
    pub code: Vec<Op>,
    pub memory: Vec<u32>,
    pub input: Region,
    pub output: Region,
    pub roles: [Option<RegRole>; NUM_REGS],
    /// `(pc, label)` markers for the disassembly listing.
    pub labels: Vec<(usize, String)>,
}

impl Program {
    /// Memory image with `input` written into the input region.
    pub fn memory_with_input(&self, input: &[f32]) -> Vec<u32> {
        assert_eq!(input.len(), self.input.len, "input length must match the input region");
        let mut mem = self.memory.clone();
        for (m, v) in mem[self.input.range()].iter_mut().zip(input) {
            *m = v.to_bits();
        }
        mem
    }

    pub fn read_output(&self, memory: &[u32]) -> Vec<f32> {
        memory[self.output.range()].iter().map(|&w| f32::from_bits(w)).collect()
    }

    /// Registers referenced by any instruction, ascending.
    pub fn used_registers(&self) -> Vec<Reg> {
        let mut used = [false; NUM_REGS];
        for op in &self.code {
            for r in op.reads().into_iter().chain(op.writes()) {
                used[r as usize] = true;
            }
        }
        (0..NUM_REGS as u8).filter(|&r| used[r as usize]).collect()
    }

    /// Value-carrying functional units the program dispatches to, in canonical order.
    pub fn used_value_units(&self) -> Vec<FuKind> {
        FuKind::VALUE_UNITS
            .into_iter()
            .filter(|u| self.code.iter().any(|op| op.unit() == Some(*u)))
            .collect()
    }

    /// `PC: OPCODE operands`, one instruction per line.
    pub fn disassemble(&self) -> String {
        let mut out = String::new();
        let mut labels = self.labels.iter().peekable();
        for (pc, op) in self.code.iter().enumerate() {
            while let Some((at, name)) = labels.peek() {
                if *at != pc {
                    break;
                }
                out.push_str(&format!("; {name}\n"));
                labels.next();
            }
            out.push_str(&format!("{pc}: {op}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), String> {
        for (pc, op) in self.code.iter().enumerate() {
            for r in op.reads().into_iter().chain(op.writes()) {
                if r as usize >= NUM_REGS {
                    return Err(format!("pc {pc}: register R{r} out of range"));
                }
            }
            if let Op::Bra { target, .. } = op {
                if *target as usize >= self.code.len() {
                    return Err(format!("pc {pc}: branch target {target} outside program"));
                }
            }
        }
        for (name, r) in [("input", self.input), ("output", self.output)] {
            if r.start + r.len > self.memory.len() {
                return Err(format!("{name} region exceeds memory"));
            }
        }
        Ok(())
    }
}
