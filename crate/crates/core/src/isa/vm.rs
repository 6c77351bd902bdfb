//! The interpreter. Fault behaviour is injected through a [`Probe`] that sees
//! every register read/write and every FU port value; the fault-free probe
//! compiles away.

use serde::{Deserialize, Serialize};

use super::fault::{ExcitationCounter, FaultTarget, IsaFault, Port};
use super::inst::{Cmp, FuKind, Op, Program, Reg, Src, Ty, NUM_REGS};
use crate::numeric::{force_bit, max_num, min_num};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "trap", rename_all = "snake_case")]
pub enum TrapKind {
    OutOfBounds { pc: u32, addr: u32 },
    Misaligned { pc: u32, addr: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Trap(TrapKind),
    Timeout,
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub termination: Termination,
    pub memory: Vec<u32>,
    pub counter: ExcitationCounter,
    pub instructions: u64,
}

/// Observation and corruption hooks. `cycle` is the 0-based instruction count.
pub trait Probe {
    fn read(&mut self, cycle: u64, pc: u32, reg: Reg, raw: u32) -> u32;
    fn write(&mut self, cycle: u64, pc: u32, reg: Reg, value: u32);
    fn port(&mut self, cycle: u64, pc: u32, unit: FuKind, port: Port, value: u32) -> u32;
    fn counter(&self) -> ExcitationCounter {
        ExcitationCounter::default()
    }
}

pub struct NoFault;

impl Probe for NoFault {
    #[inline(always)]
    fn read(&mut self, _: u64, _: u32, _: Reg, raw: u32) -> u32 {
        raw
    }
    #[inline(always)]
    fn write(&mut self, _: u64, _: u32, _: Reg, _: u32) {}
    #[inline(always)]
    fn port(&mut self, _: u64, _: u32, _: FuKind, _: Port, v: u32) -> u32 {
        v
    }
}

/// Register stuck-at: the register file keeps the written word, every read
/// sees the forced bit. Each read and each write is a use.
pub struct RegisterStuck {
    reg: Reg,
    bit: u8,
    stuck: bool,
    counter: ExcitationCounter,
}

impl Probe for RegisterStuck {
    #[inline(always)]
    fn read(&mut self, _: u64, _: u32, reg: Reg, raw: u32) -> u32 {
        if reg != self.reg {
            return raw;
        }
        self.counter.uses += 1;
        if ((raw >> self.bit) & 1 == 1) != self.stuck {
            self.counter.excitations += 1;
        }
        let seen = force_bit(raw, self.bit, self.stuck);
        debug_assert_eq!((seen >> self.bit) & 1 == 1, self.stuck, "read observed the un-stuck bit");
        seen
    }
    #[inline(always)]
    fn write(&mut self, _: u64, _: u32, reg: Reg, value: u32) {
        if reg == self.reg {
            self.counter.uses += 1;
            if ((value >> self.bit) & 1 == 1) != self.stuck {
                self.counter.excitations += 1;
            }
        }
    }
    #[inline(always)]
    fn port(&mut self, _: u64, _: u32, _: FuKind, _: Port, v: u32) -> u32 {
        v
    }
    fn counter(&self) -> ExcitationCounter {
        self.counter
    }
}

/// FU port stuck-at: every operation dispatched to `unit` has `port` forced.
/// Each dispatched operation is one use.
pub struct PortStuck {
    unit: FuKind,
    port: Port,
    bit: u8,
    stuck: bool,
    counter: ExcitationCounter,
}

impl Probe for PortStuck {
    #[inline(always)]
    fn read(&mut self, _: u64, _: u32, _: Reg, raw: u32) -> u32 {
        raw
    }
    #[inline(always)]
    fn write(&mut self, _: u64, _: u32, _: Reg, _: u32) {}
    #[inline(always)]
    fn port(&mut self, _: u64, _: u32, unit: FuKind, port: Port, v: u32) -> u32 {
        if unit != self.unit || port != self.port {
            return v;
        }
        self.counter.uses += 1;
        let forced = force_bit(v, self.bit, self.stuck);
        if forced != v {
            self.counter.excitations += 1;
        }
        forced
    }
    fn counter(&self) -> ExcitationCounter {
        self.counter
    }
}

/// One observed site use. `raw` is the fault-free-side value at the site,
/// `seen` what the datapath actually consumed after forcing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Read { cycle: u64, pc: u32, reg: Reg, raw: u32, seen: u32 },
    Write { cycle: u64, pc: u32, reg: Reg, value: u32 },
    Port { cycle: u64, pc: u32, unit: FuKind, port: Port, raw: u32, seen: u32 },
}

impl std::fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            TraceEvent::Read { cycle, pc, reg, raw, seen } => {
                write!(f, "{cycle} {pc} rd R{reg} {raw:08x} {seen:08x}")
            }
            TraceEvent::Write { cycle, pc, reg, value } => {
                write!(f, "{cycle} {pc} wr R{reg} {value:08x} {value:08x}")
            }
            TraceEvent::Port { cycle, pc, unit, port, raw, seen } => {
                write!(f, "{cycle} {pc} fu {}:{port:?} {raw:08x} {seen:08x}", unit.short())
            }
        }
    }
}

/// Records every site use while delegating corruption to `inner`.
pub struct Tracer<P> {
    pub inner: P,
    pub events: Vec<TraceEvent>,
}

impl<P: Probe> Probe for Tracer<P> {
    fn read(&mut self, cycle: u64, pc: u32, reg: Reg, raw: u32) -> u32 {
        let seen = self.inner.read(cycle, pc, reg, raw);
        self.events.push(TraceEvent::Read { cycle, pc, reg, raw, seen });
        seen
    }
    fn write(&mut self, cycle: u64, pc: u32, reg: Reg, value: u32) {
        self.inner.write(cycle, pc, reg, value);
        self.events.push(TraceEvent::Write { cycle, pc, reg, value });
    }
    fn port(&mut self, cycle: u64, pc: u32, unit: FuKind, port: Port, v: u32) -> u32 {
        let seen = self.inner.port(cycle, pc, unit, port, v);
        self.events.push(TraceEvent::Port { cycle, pc, unit, port, raw: v, seen });
        seen
    }
    fn counter(&self) -> ExcitationCounter {
        self.inner.counter()
    }
}

/// Per-site OR/AND masks over every value a fault-free run presents at that
/// site. A stuck-at-v fault on bit b can only be excited if some use had
/// bit b != v, which the masks answer exactly.
#[derive(Debug, Clone)]
pub struct SiteMasks {
    reg_or: [u32; NUM_REGS],
    reg_and: [u32; NUM_REGS],
    reg_uses: [u64; NUM_REGS],
    port_or: [[u32; 3]; 6],
    port_and: [[u32; 3]; 6],
    port_uses: [u64; 6],
}

impl Default for SiteMasks {
    fn default() -> Self {
        Self {
            reg_or: [0; NUM_REGS],
            reg_and: [u32::MAX; NUM_REGS],
            reg_uses: [0; NUM_REGS],
            port_or: [[0; 3]; 6],
            port_and: [[u32::MAX; 3]; 6],
            port_uses: [0; 6],
        }
    }
}

impl SiteMasks {
    /// `Some(uses)` when `fault` can never be excited along this run.
    pub fn unexcitable(&self, fault: &IsaFault) -> Option<u64> {
        let (or, and, uses) = match fault.target {
            FaultTarget::RegisterBit { reg, .. } => {
                let r = reg as usize;
                (self.reg_or[r], self.reg_and[r], self.reg_uses[r])
            }
            FaultTarget::FuPort { unit, port, .. } => {
                let (u, p) = (unit as usize, port as usize);
                (self.port_or[u][p], self.port_and[u][p], self.port_uses[u])
            }
        };
        let mask = 1u32 << fault.bit();
        let varies = if fault.stuck { and & mask == 0 } else { or & mask != 0 };
        (!varies || uses == 0).then_some(uses)
    }
}

impl Probe for SiteMasks {
    #[inline(always)]
    fn read(&mut self, _: u64, _: u32, reg: Reg, raw: u32) -> u32 {
        let r = reg as usize & (NUM_REGS - 1);
        self.reg_or[r] |= raw;
        self.reg_and[r] &= raw;
        self.reg_uses[r] += 1;
        raw
    }
    #[inline(always)]
    fn write(&mut self, _: u64, _: u32, reg: Reg, value: u32) {
        let r = reg as usize & (NUM_REGS - 1);
        self.reg_or[r] |= value;
        self.reg_and[r] &= value;
        self.reg_uses[r] += 1;
    }
    #[inline(always)]
    fn port(&mut self, _: u64, _: u32, unit: FuKind, port: Port, v: u32) -> u32 {
        let (u, p) = (unit as usize, port as usize);
        self.port_or[u][p] |= v;
        self.port_and[u][p] &= v;
        if port == Port::InA {
            self.port_uses[u] += 1;
        }
        v
    }
}

pub fn probe_for(fault: &IsaFault) -> FaultProbe {
    match fault.target {
        FaultTarget::RegisterBit { reg, bit } => FaultProbe::Register(RegisterStuck {
            reg,
            bit,
            stuck: fault.stuck,
            counter: ExcitationCounter::default(),
        }),
        FaultTarget::FuPort { unit, port, bit } => FaultProbe::Port(PortStuck {
            unit,
            port,
            bit,
            stuck: fault.stuck,
            counter: ExcitationCounter::default(),
        }),
    }
}

pub enum FaultProbe {
    Register(RegisterStuck),
    Port(PortStuck),
}

/// Run `program` from `memory` until `HALT`, a trap, or `watchdog`
/// instructions without halting.
pub fn execute(program: &Program, memory: Vec<u32>, fault: Option<&IsaFault>, watchdog: u64) -> Execution {
    match fault.map(probe_for) {
        None => execute_with(program, memory, &mut NoFault, watchdog),
        Some(FaultProbe::Register(mut p)) => execute_with(program, memory, &mut p, watchdog),
        Some(FaultProbe::Port(mut p)) => execute_with(program, memory, &mut p, watchdog),
    }
}

/// Like [`execute`], also returning every site-use event.
pub fn execute_traced(
    program: &Program,
    memory: Vec<u32>,
    fault: Option<&IsaFault>,
    watchdog: u64,
) -> (Execution, Vec<TraceEvent>) {
    fn go<P: Probe>(program: &Program, memory: Vec<u32>, inner: P, watchdog: u64) -> (Execution, Vec<TraceEvent>) {
        let mut t = Tracer { inner, events: Vec::new() };
        let e = execute_with(program, memory, &mut t, watchdog);
        (e, t.events)
    }
    match fault.map(probe_for) {
        None => go(program, memory, NoFault, watchdog),
        Some(FaultProbe::Register(p)) => go(program, memory, p, watchdog),
        Some(FaultProbe::Port(p)) => go(program, memory, p, watchdog),
    }
}

#[inline(always)]
fn addr_index(addr: u32, len: usize, pc: u32) -> Result<usize, TrapKind> {
    if addr & 3 != 0 {
        return Err(TrapKind::Misaligned { pc, addr });
    }
    let i = (addr >> 2) as usize;
    if i >= len {
        return Err(TrapKind::OutOfBounds { pc, addr });
    }
    Ok(i)
}

#[inline(always)]
fn fp(v: u32) -> f32 {
    f32::from_bits(v)
}

fn compare(cmp: Cmp, ty: Ty, a: u32, b: u32) -> bool {
    use std::cmp::Ordering;
    let ord = match ty {
        Ty::F32 => fp(a).partial_cmp(&fp(b)),
        Ty::S32 => Some((a as i32).cmp(&(b as i32))),
        Ty::U32 => Some(a.cmp(&b)),
    };
    match (cmp, ord) {
        (Cmp::Ne, None) => true,
        (_, None) => false,
        (Cmp::Lt, Some(o)) => o == Ordering::Less,
        (Cmp::Le, Some(o)) => o != Ordering::Greater,
        (Cmp::Eq, Some(o)) => o == Ordering::Equal,
        (Cmp::Ne, Some(o)) => o != Ordering::Equal,
        (Cmp::Ge, Some(o)) => o != Ordering::Less,
        (Cmp::Gt, Some(o)) => o == Ordering::Greater,
    }
}

pub fn execute_with<P: Probe>(program: &Program, mut mem: Vec<u32>, probe: &mut P, watchdog: u64) -> Execution {
    let code = &program.code[..];
    let mut regs = [0u32; NUM_REGS];
    let mut pc: usize = 0;
    let mut cycle: u64 = 0;
    let len = mem.len();

    macro_rules! rd {
        ($r:expr) => {{
            let r = $r;
            probe.read(cycle, pc as u32, r, regs[r as usize & (NUM_REGS - 1)])
        }};
    }
    macro_rules! wr {
        ($r:expr, $v:expr) => {{
            let (r, v) = ($r, $v);
            probe.write(cycle, pc as u32, r, v);
            regs[r as usize & (NUM_REGS - 1)] = v;
        }};
    }
    macro_rules! src {
        ($b:expr) => {
            match $b {
                Src::Reg(r) => rd!(r),
                Src::Imm(v) => v,
            }
        };
    }
    macro_rules! port {
        ($u:expr, $p:expr, $v:expr) => {
            probe.port(cycle, pc as u32, $u, $p, $v)
        };
    }

    let termination = loop {
        if cycle >= watchdog {
            break Termination::Timeout;
        }
        let Some(op) = code.get(pc) else {
            // validated programs end in HALT; running off the end is a PC trap
            break Termination::Trap(TrapKind::OutOfBounds { pc: pc as u32, addr: u32::MAX });
        };
        let mut next = pc + 1;
        match *op {
            Op::Ld { rd, base, off } => {
                let addr = rd!(base).wrapping_add(off as u32);
                match addr_index(addr, len, pc as u32) {
                    Ok(i) => wr!(rd, mem[i]),
                    Err(t) => {
                        cycle += 1;
                        break Termination::Trap(t);
                    }
                }
            }
            Op::St { rs, base, off } => {
                let addr = rd!(base).wrapping_add(off as u32);
                let v = rd!(rs);
                match addr_index(addr, len, pc as u32) {
                    Ok(i) => mem[i] = v,
                    Err(t) => {
                        cycle += 1;
                        break Termination::Trap(t);
                    }
                }
            }
            Op::Mov { rd, ra } => {
                let v = rd!(ra);
                wr!(rd, v);
            }
            Op::Movi { rd, imm } => wr!(rd, imm),
            Op::Add { ty, rd, ra, b } => {
                let a = rd!(ra);
                let b = src!(b);
                let v = match ty {
                    Ty::F32 => {
                        let a = port!(FuKind::FpAdd, Port::InA, a);
                        let b = port!(FuKind::FpAdd, Port::InB, b);
                        port!(FuKind::FpAdd, Port::Out, (fp(a) + fp(b)).to_bits())
                    }
                    Ty::S32 | Ty::U32 => a.wrapping_add(b),
                };
                wr!(rd, v);
            }
            Op::Mul { ty, rd, ra, b } => {
                let a = rd!(ra);
                let b = src!(b);
                let v = match ty {
                    Ty::F32 => {
                        let a = port!(FuKind::FpMul, Port::InA, a);
                        let b = port!(FuKind::FpMul, Port::InB, b);
                        port!(FuKind::FpMul, Port::Out, (fp(a) * fp(b)).to_bits())
                    }
                    Ty::S32 | Ty::U32 => a.wrapping_mul(b),
                };
                wr!(rd, v);
            }
            Op::Fma { rd, ra, rb, rc } => {
                let (a, b, c) = (rd!(ra), rd!(rb), rd!(rc));
                let a = port!(FuKind::FpFma, Port::InA, a);
                let b = port!(FuKind::FpFma, Port::InB, b);
                let v = port!(FuKind::FpFma, Port::Out, fp(a).mul_add(fp(b), fp(c)).to_bits());
                wr!(rd, v);
            }
            Op::Max { rd, ra, rb } => {
                let (a, b) = (rd!(ra), rd!(rb));
                let a = port!(FuKind::FpMinMax, Port::InA, a);
                let b = port!(FuKind::FpMinMax, Port::InB, b);
                let v = port!(FuKind::FpMinMax, Port::Out, max_num(fp(a), fp(b)).to_bits());
                wr!(rd, v);
            }
            Op::Min { rd, ra, rb } => {
                let (a, b) = (rd!(ra), rd!(rb));
                let a = port!(FuKind::FpMinMax, Port::InA, a);
                let b = port!(FuKind::FpMinMax, Port::InB, b);
                let v = port!(FuKind::FpMinMax, Port::Out, min_num(fp(a), fp(b)).to_bits());
                wr!(rd, v);
            }
            Op::Cvt { rd, ra, to, from } => {
                let a = rd!(ra);
                let v = match (from, to) {
                    (Ty::F32, Ty::S32) => (fp(a) as i32) as u32,
                    (Ty::F32, Ty::U32) => fp(a) as u32,
                    (Ty::S32, Ty::F32) => (a as i32 as f32).to_bits(),
                    (Ty::U32, Ty::F32) => (a as f32).to_bits(),
                    _ => a,
                };
                wr!(rd, v);
            }
            Op::Setp { cmp, ty, rd, ra, b } => {
                let a = rd!(ra);
                let b = src!(b);
                wr!(rd, compare(cmp, ty, a, b) as u32);
            }
            Op::Bra { pred, target } => {
                let taken = match pred {
                    None => true,
                    Some(p) => rd!(p) != 0,
                };
                if taken {
                    next = target as usize;
                }
            }
            Op::Halt => {
                cycle += 1;
                break Termination::Completed;
            }
        }
        cycle += 1;
        pc = next;
    };
    Execution { termination, memory: mem, counter: probe.counter(), instructions: cycle }
}
