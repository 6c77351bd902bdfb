use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::inst::{FuKind, Program, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Port {
    InA,
    InB,
    Out,
}

impl Port {
    pub const ALL: [Port; 3] = [Port::InA, Port::InB, Port::Out];

    fn short(self) -> &'static str {
        match self {
            Port::InA => "ina",
            Port::InB => "inb",
            Port::Out => "out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "site", rename_all = "snake_case")]
pub enum FaultTarget {
    RegisterBit { reg: Reg, bit: u8 },
    FuPort { unit: FuKind, port: Port, bit: u8 },
}

/// A permanent stuck-at fault on one register bit or one FU port bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IsaFault {
    #[serde(flatten)]
    pub target: FaultTarget,
    /// Stuck value: `true` = stuck-at-1.
    pub stuck: bool,
}

impl IsaFault {
    pub fn register(reg: Reg, bit: u8, stuck: bool) -> Self {
        Self { target: FaultTarget::RegisterBit { reg, bit }, stuck }
    }

    pub fn fu(unit: FuKind, port: Port, bit: u8, stuck: bool) -> Self {
        Self { target: FaultTarget::FuPort { unit, port, bit }, stuck }
    }

    pub fn bit(&self) -> u8 {
        match self.target {
            FaultTarget::RegisterBit { bit, .. } | FaultTarget::FuPort { bit, .. } => bit,
        }
    }

    pub fn is_register(&self) -> bool {
        matches!(self.target, FaultTarget::RegisterBit { .. })
    }
}

impl fmt::Display for IsaFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sa = if self.stuck { "sa1" } else { "sa0" };
        match self.target {
            FaultTarget::RegisterBit { reg, bit } => write!(f, "reg:R{reg}:bit{bit}:{sa}"),
            FaultTarget::FuPort { unit, port, bit } => {
                write!(f, "fu:{}:{}:bit{bit}:{sa}", unit.short(), port.short())
            }
        }
    }
}

impl FromStr for IsaFault {
    type Err = String;

    /// `reg:R7:bit12:sa1` or `fu:fma:out:bit30:sa0`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || format!("bad fault '{s}' (expected reg:R<n>:bit<b>:sa<0|1> or fu:<unit>:<port>:bit<b>:sa<0|1>)");
        let bit = |p: &str| -> Result<u8, String> {
            p.strip_prefix("bit")
                .and_then(|b| b.parse::<u8>().ok())
                .filter(|&b| b < 32)
                .ok_or_else(bad)
        };
        let stuck = |p: &str| match p {
            "sa0" => Ok(false),
            "sa1" => Ok(true),
            _ => Err(bad()),
        };
        match parts.as_slice() {
            ["reg", r, b, sa] => {
                let reg = r
                    .strip_prefix(['R', 'r'])
                    .and_then(|n| n.parse::<u8>().ok())
                    .filter(|&n| (n as usize) < super::NUM_REGS)
                    .ok_or_else(bad)?;
                Ok(IsaFault::register(reg, bit(b)?, stuck(sa)?))
            }
            ["fu", u, p, b, sa] => {
                let unit = FuKind::from_short(u)
                    .filter(|u| FuKind::VALUE_UNITS.contains(u))
                    .ok_or_else(bad)?;
                let port = Port::ALL.into_iter().find(|x| x.short() == *p).ok_or_else(bad)?;
                Ok(IsaFault::fu(unit, port, bit(b)?, stuck(sa)?))
            }
            _ => Err(bad()),
        }
    }
}

/// Excitations and uses of the faulty site over one or more executions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcitationCounter {
    pub excitations: u64,
    pub uses: u64,
}

impl ExcitationCounter {
    pub fn merge(self, other: Self) -> Self {
        Self { excitations: self.excitations + other.excitations, uses: self.uses + other.uses }
    }

    /// `excitations / uses`, or `None` for a never-used site.
    pub fn induced_ber(&self) -> Option<f64> {
        (self.uses > 0).then(|| self.excitations as f64 / self.uses as f64)
    }
}

/// Every single register fault: used registers x 32 bits x {sa0, sa1}.
pub fn enumerate_register_faults(program: &Program) -> Vec<IsaFault> {
    let mut out = Vec::new();
    for reg in program.used_registers() {
        for bit in 0..32 {
            for stuck in [false, true] {
                out.push(IsaFault::register(reg, bit, stuck));
            }
        }
    }
    out
}

/// Every single FU port fault: used value units x {inA, inB, out} x 32 x 2.
pub fn enumerate_fu_faults(program: &Program) -> Vec<IsaFault> {
    let mut out = Vec::new();
    for unit in program.used_value_units() {
        for port in Port::ALL {
            for bit in 0..32 {
                for stuck in [false, true] {
                    out.push(IsaFault::fu(unit, port, bit, stuck));
                }
            }
        }
    }
    out
}

pub fn enumerate_fault_space(program: &Program) -> Vec<IsaFault> {
    let mut all = enumerate_register_faults(program);
    all.extend(enumerate_fu_faults(program));
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["reg:R7:bit12:sa1", "fu:fma:out:bit30:sa1", "fu:minmax:ina:bit0:sa0"] {
            assert_eq!(s.parse::<IsaFault>().unwrap().to_string(), s);
        }
        assert!("reg:R40:bit1:sa1".parse::<IsaFault>().is_err());
        assert!("reg:R4:bit32:sa1".parse::<IsaFault>().is_err());
        assert!("fu:lsu:out:bit3:sa1".parse::<IsaFault>().is_err());
    }

    #[test]
    fn induced_ber_values() {
        assert_eq!(ExcitationCounter { excitations: 0, uses: 1000 }.induced_ber(), Some(0.0));
        assert_eq!(ExcitationCounter { excitations: 5, uses: 1000 }.induced_ber(), Some(0.005));
        assert_eq!(ExcitationCounter::default().induced_ber(), None);
    }
}
