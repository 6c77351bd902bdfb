//! Lowering of a [`Model`] into a single-thread register-machine program.
//!
//! Memory layout (word addresses, ascending): input, per-layer parameters,
//! per-layer output buffers, zero-bordered scratch planes for padded convs.
//! Loops are do-while with `ADD.U32` pointer bumps, `SETP.Lt.U32` and a
//! predicated `BRA`; kernel taps are fully unrolled in the same
//! `(ci, ky, kx)` order as the golden kernels.

use thiserror::Error;

use super::inst::{Cmp, Op, Program, Reg, RegRole, Region, Src, Ty, NUM_REGS};
use crate::nn::{LayerKind, Model};
use crate::nn::ops::avgpool_scale;

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("layer {index} ({kind}) cannot be lowered: {reason}")]
    Unsupported { index: usize, kind: &'static str, reason: String },
    #[error("register pool {0:?} exhausted")]
    Registers(RegRole),
    #[error("program memory of {0} words exceeds the 32-bit address space")]
    TooLarge(usize),
}

const ADDRESS_POOL: std::ops::Range<Reg> = 0..12;
const PREDICATE_POOL: std::ops::Range<Reg> = 12..14;
const DATA_POOL: std::ops::Range<Reg> = 14..NUM_REGS as Reg;

/// Fixed linear-scan allocator; reset at every layer boundary.
struct Pools {
    next: [Reg; 3],
}

impl Pools {
    fn new() -> Self {
        Self { next: [ADDRESS_POOL.start, PREDICATE_POOL.start, DATA_POOL.start] }
    }

    fn take(&mut self, role: RegRole, roles: &mut [Option<RegRole>; NUM_REGS]) -> Result<Reg, LowerError> {
        let (slot, end) = match role {
            RegRole::Address => (0, ADDRESS_POOL.end),
            RegRole::Predicate => (1, PREDICATE_POOL.end),
            RegRole::Data => (2, DATA_POOL.end),
        };
        let r = self.next[slot];
        if r >= end {
            return Err(LowerError::Registers(role));
        }
        self.next[slot] += 1;
        roles[r as usize] = Some(role);
        Ok(r)
    }
}

struct Emitter {
    code: Vec<Op>,
    labels: Vec<(usize, String)>,
    roles: [Option<RegRole>; NUM_REGS],
    pools: Pools,
}

impl Emitter {
    fn push(&mut self, op: Op) {
        self.code.push(op);
    }

    fn addr(&mut self) -> Result<Reg, LowerError> {
        self.pools.take(RegRole::Address, &mut self.roles)
    }

    fn pred(&mut self) -> Result<Reg, LowerError> {
        self.pools.take(RegRole::Predicate, &mut self.roles)
    }

    fn data(&mut self) -> Result<Reg, LowerError> {
        self.pools.take(RegRole::Data, &mut self.roles)
    }

    fn here(&self) -> u32 {
        self.code.len() as u32
    }

    fn movi(&mut self, rd: Reg, imm: u32) {
        self.push(Op::Movi { rd, imm });
    }

    fn bump(&mut self, r: Reg, bytes: i64) {
        self.push(Op::Add { ty: Ty::U32, rd: r, ra: r, b: Src::Imm(bytes as i32 as u32) });
    }

    /// Close a do-while loop: `if ptr < bound goto top`.
    fn loop_back(&mut self, p: Reg, ptr: Reg, bound: Src, top: u32) {
        self.push(Op::Setp { cmp: Cmp::Lt, ty: Ty::U32, rd: p, ra: ptr, b: bound });
        self.push(Op::Bra { pred: Some(p), target: top });
    }

    fn ld(&mut self, rd: Reg, base: Reg, off: i64) {
        self.push(Op::Ld { rd, base, off: off as i32 });
    }

    fn st(&mut self, rs: Reg, base: Reg, off: i64) {
        self.push(Op::St { rs, base, off: off as i32 });
    }
}

fn byte(word: usize) -> u32 {
    (word * 4) as u32
}

/// Lower `model`. The returned program reads one sample from its input
/// region and leaves the logits in its output region.
pub fn lower(model: &Model) -> Result<Program, LowerError> {
    let layers = model.layers();
    let mut memory: Vec<u32> = vec![0; model.input_len()];
    let input = Region { start: 0, len: model.input_len() };

    // parameters
    let mut param_at = vec![0usize; layers.len()];
    for (i, layer) in layers.iter().enumerate() {
        param_at[i] = memory.len();
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                let taps = c.in_per_group() * c.kernel() * c.kernel();
                let (w, b) = (c.weight.data(), c.bias.data());
                for co in 0..c.out_channels() {
                    memory.push(b[co].to_bits());
                    memory.extend(w[co * taps..(co + 1) * taps].iter().map(|v| v.to_bits()));
                }
            }
            LayerKind::Linear { weight, bias } => {
                let n_in = weight.shape()[1];
                for (o, b) in bias.data().iter().enumerate() {
                    memory.push(b.to_bits());
                    memory.extend(weight.data()[o * n_in..(o + 1) * n_in].iter().map(|v| v.to_bits()));
                }
            }
            _ => {}
        }
    }

    // activations; Flatten aliases its input buffer
    let mut out_at = vec![0usize; layers.len()];
    for i in 0..layers.len() {
        out_at[i] = if matches!(layers[i].kind, LayerKind::Flatten) {
            if i == 0 { input.start } else { out_at[i - 1] }
        } else {
            let at = memory.len();
            memory.resize(at + model.layer_output_shape(i).iter().product::<usize>(), 0);
            at
        };
    }

    // padded scratch planes
    let mut pad_at = vec![None; layers.len()];
    for (i, layer) in layers.iter().enumerate() {
        if let LayerKind::Conv2d(c) = &layer.kind {
            if c.padding > 0 {
                let s = model.layer_input_shape(i);
                let at = memory.len();
                memory.resize(at + s[0] * (s[1] + 2 * c.padding) * (s[2] + 2 * c.padding), 0);
                pad_at[i] = Some(at);
            }
        }
    }
    if memory.len() >= (u32::MAX / 4) as usize || memory.len() * 4 > i32::MAX as usize {
        return Err(LowerError::TooLarge(memory.len()));
    }

    let mut e = Emitter { code: Vec::new(), labels: Vec::new(), roles: [None; NUM_REGS], pools: Pools::new() };
    for (i, layer) in layers.iter().enumerate() {
        e.pools = Pools::new();
        e.labels.push((e.code.len(), format!("layer {i} {} ({})", layer.name, layer.kind.tag())));
        let in_at = if i == 0 { input.start } else { out_at[i - 1] };
        let in_shape = model.layer_input_shape(i).to_vec();
        let out_shape = model.layer_output_shape(i).to_vec();
        let out_len: usize = out_shape.iter().product();
        let out = out_at[i];
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                let (ch, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let src_at = match pad_at[i] {
                    Some(at) => {
                        emit_pad_copy(&mut e, in_at, at, ch, h, w, c.padding)?;
                        e.pools = Pools::new();
                        at
                    }
                    None => in_at,
                };
                emit_conv(&mut e, c, param_at[i], src_at, out, &in_shape, &out_shape)?;
            }
            LayerKind::Linear { weight, .. } => {
                let n_in = weight.shape()[1];
                emit_linear(&mut e, param_at[i], in_at, out, n_in, out_len)?;
            }
            LayerKind::BatchNorm2dFolded { scale, shift } => {
                emit_batchnorm(&mut e, scale.data(), shift.data(), in_at, out, out_len)?;
            }
            LayerKind::Relu => emit_clamp(&mut e, in_at, out, out_len, 0.0, None)?,
            LayerKind::Relu6 => emit_clamp(&mut e, in_at, out, out_len, 0.0, Some(6.0))?,
            LayerKind::ClippedRelu { tau } => emit_clamp(&mut e, in_at, out, out_len, 0.0, Some(*tau))?,
            LayerKind::RangeRestrict { lo, hi } => emit_clamp(&mut e, in_at, out, out_len, *lo, Some(*hi))?,
            LayerKind::MaxPool2d { kernel, stride } => {
                emit_pool(&mut e, PoolOp::Max, in_at, out, &in_shape, &out_shape, *kernel, *stride)?
            }
            LayerKind::AvgPool2d { kernel, stride } => {
                emit_pool(&mut e, PoolOp::Avg, in_at, out, &in_shape, &out_shape, *kernel, *stride)?
            }
            LayerKind::Flatten => {}
            LayerKind::ResidualAdd { src } => emit_residual(&mut e, in_at, out_at[*src], out, out_len)?,
        }
    }
    e.push(Op::Halt);

    let last = layers.len().checked_sub(1).map_or(input.start, |l| out_at[l]);
    let program = Program {
        code: e.code,
        memory,
        input,
        output: Region { start: last, len: model.classes() },
        roles: e.roles,
        labels: e.labels,
    };
    debug_assert_eq!(program.validate(), Ok(()));
    Ok(program)
}

fn delta(from: usize, to: usize) -> i64 {
    (to as i64 - from as i64) * 4
}

fn emit_pad_copy(e: &mut Emitter, src: usize, dst: usize, c: usize, h: usize, w: usize, pad: usize) -> Result<(), LowerError> {
    let wp = w + 2 * pad;
    let (a_s, a_d, a_end, p, x) = (e.addr()?, e.addr()?, e.addr()?, e.pred()?, e.data()?);
    e.movi(a_s, byte(src));
    e.movi(a_d, byte(dst + pad * wp + pad));
    let c_top = e.here();
    e.push(Op::Add { ty: Ty::U32, rd: a_end, ra: a_s, b: Src::Imm(byte(h * w)) });
    let row_top = e.here();
    for k in 0..w {
        e.ld(x, a_s, (k * 4) as i64);
        e.st(x, a_d, (k * 4) as i64);
    }
    e.bump(a_s, (w * 4) as i64);
    e.bump(a_d, (wp * 4) as i64);
    e.loop_back(p, a_s, Src::Reg(a_end), row_top);
    e.bump(a_d, (2 * pad * wp * 4) as i64);
    e.loop_back(p, a_s, Src::Imm(byte(src + c * h * w)), c_top);
    Ok(())
}

fn emit_conv(
    e: &mut Emitter,
    conv: &crate::nn::Conv2d,
    params: usize,
    src: usize,
    out: usize,
    in_shape: &[usize],
    out_shape: &[usize],
) -> Result<(), LowerError> {
    let (hp, wp) = (in_shape[1] + 2 * conv.padding, in_shape[2] + 2 * conv.padding);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let k = conv.kernel();
    let s = conv.stride;
    let cig = conv.in_per_group();
    let cog = conv.out_channels() / conv.groups;
    let row_words = 1 + cig * k * k;

    let mut taps = Vec::with_capacity(cig * k * k);
    for ci in 0..cig {
        for ky in 0..k {
            for kx in 0..k {
                taps.push((((ci * hp + ky) * wp + kx) * 4) as i64);
            }
        }
    }

    let (aw, ao, ax, a_row, a_ch) = (e.addr()?, e.addr()?, e.addr()?, e.addr()?, e.addr()?);
    let p = e.pred()?;
    let (acc, wr, xr) = (e.data()?, e.data()?, e.data()?);
    for g in 0..conv.groups {
        let co0 = g * cog;
        e.movi(aw, byte(params + co0 * row_words));
        e.movi(ao, byte(out + co0 * ho * wo));
        let co_top = e.here();
        e.movi(ax, byte(src + g * cig * hp * wp));
        e.push(Op::Add { ty: Ty::U32, rd: a_ch, ra: ao, b: Src::Imm(byte(ho * wo)) });
        let oy_top = e.here();
        e.push(Op::Add { ty: Ty::U32, rd: a_row, ra: ao, b: Src::Imm(byte(wo)) });
        let ox_top = e.here();
        e.ld(acc, aw, 0);
        for (t, &off) in taps.iter().enumerate() {
            e.ld(wr, aw, ((1 + t) * 4) as i64);
            e.ld(xr, ax, off);
            e.push(Op::Fma { rd: acc, ra: wr, rb: xr, rc: acc });
        }
        e.st(acc, ao, 0);
        e.bump(ao, 4);
        e.bump(ax, (s * 4) as i64);
        e.loop_back(p, ao, Src::Reg(a_row), ox_top);
        e.bump(ax, ((s * wp) as i64 - (wo * s) as i64) * 4);
        e.loop_back(p, ao, Src::Reg(a_ch), oy_top);
        e.bump(aw, (row_words * 4) as i64);
        e.loop_back(p, aw, Src::Imm(byte(params + (co0 + cog) * row_words)), co_top);
    }
    Ok(())
}

fn emit_linear(e: &mut Emitter, params: usize, src: usize, out: usize, n_in: usize, n_out: usize) -> Result<(), LowerError> {
    let (aw, ao, ax) = (e.addr()?, e.addr()?, e.addr()?);
    let p = e.pred()?;
    let (acc, wr, xr) = (e.data()?, e.data()?, e.data()?);
    e.movi(ax, byte(src));
    e.movi(aw, byte(params));
    e.movi(ao, byte(out));
    let top = e.here();
    e.ld(acc, aw, 0);
    for i in 0..n_in {
        e.ld(wr, aw, ((1 + i) * 4) as i64);
        e.ld(xr, ax, (i * 4) as i64);
        e.push(Op::Fma { rd: acc, ra: wr, rb: xr, rc: acc });
    }
    e.st(acc, ao, 0);
    e.bump(aw, ((n_in + 1) * 4) as i64);
    e.bump(ao, 4);
    e.loop_back(p, ao, Src::Imm(byte(out + n_out)), top);
    Ok(())
}

fn emit_batchnorm(e: &mut Emitter, scale: &[f32], shift: &[f32], src: usize, out: usize, len: usize) -> Result<(), LowerError> {
    let plane = len / scale.len();
    let a = e.addr()?;
    let p = e.pred()?;
    let (x, sc, sh) = (e.data()?, e.data()?, e.data()?);
    let d = delta(out, src);
    e.movi(a, byte(out));
    for c in 0..scale.len() {
        e.movi(sc, scale[c].to_bits());
        e.movi(sh, shift[c].to_bits());
        let top = e.here();
        e.ld(x, a, d);
        e.push(Op::Fma { rd: x, ra: x, rb: sc, rc: sh });
        e.st(x, a, 0);
        e.bump(a, 4);
        e.loop_back(p, a, Src::Imm(byte(out + (c + 1) * plane)), top);
    }
    Ok(())
}

/// `min(max(x, lo), hi)` elementwise; ReLU is `hi = None, lo = 0`.
fn emit_clamp(e: &mut Emitter, src: usize, out: usize, len: usize, lo: f32, hi: Option<f32>) -> Result<(), LowerError> {
    let a = e.addr()?;
    let p = e.pred()?;
    let x = e.data()?;
    let rlo = e.data()?;
    e.movi(rlo, lo.to_bits());
    let rhi = match hi {
        Some(h) => {
            let r = e.data()?;
            e.movi(r, h.to_bits());
            Some(r)
        }
        None => None,
    };
    let d = delta(out, src);
    e.movi(a, byte(out));
    let top = e.here();
    e.ld(x, a, d);
    e.push(Op::Max { rd: x, ra: x, rb: rlo });
    if let Some(rhi) = rhi {
        e.push(Op::Min { rd: x, ra: x, rb: rhi });
    }
    e.st(x, a, 0);
    e.bump(a, 4);
    e.loop_back(p, a, Src::Imm(byte(out + len)), top);
    Ok(())
}

fn emit_residual(e: &mut Emitter, src: usize, skip: usize, out: usize, len: usize) -> Result<(), LowerError> {
    let a = e.addr()?;
    let p = e.pred()?;
    let (x, y) = (e.data()?, e.data()?);
    e.movi(a, byte(out));
    let top = e.here();
    e.ld(x, a, delta(out, src));
    e.ld(y, a, delta(out, skip));
    e.push(Op::Add { ty: Ty::F32, rd: x, ra: x, b: Src::Reg(y) });
    e.st(x, a, 0);
    e.bump(a, 4);
    e.loop_back(p, a, Src::Imm(byte(out + len)), top);
    Ok(())
}

#[derive(Clone, Copy)]
enum PoolOp {
    Max,
    Avg,
}

#[allow(clippy::too_many_arguments)]
fn emit_pool(
    e: &mut Emitter,
    op: PoolOp,
    src: usize,
    out: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    k: usize,
    s: usize,
) -> Result<(), LowerError> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (c, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let (ao, ax, a_row, a_ch) = (e.addr()?, e.addr()?, e.addr()?, e.addr()?);
    let p = e.pred()?;
    let (acc, xr) = (e.data()?, e.data()?);
    let inv = match op {
        PoolOp::Avg => {
            let r = e.data()?;
            e.movi(r, avgpool_scale(k).to_bits());
            Some(r)
        }
        PoolOp::Max => None,
    };
    e.movi(ao, byte(out));
    e.movi(ax, byte(src));
    let c_top = e.here();
    e.push(Op::Add { ty: Ty::U32, rd: a_ch, ra: ao, b: Src::Imm(byte(ho * wo)) });
    let oy_top = e.here();
    e.push(Op::Add { ty: Ty::U32, rd: a_row, ra: ao, b: Src::Imm(byte(wo)) });
    let ox_top = e.here();
    e.ld(acc, ax, 0);
    for ky in 0..k {
        for kx in 0..k {
            if ky + kx == 0 {
                continue;
            }
            e.ld(xr, ax, ((ky * w + kx) * 4) as i64);
            match op {
                PoolOp::Max => e.push(Op::Max { rd: acc, ra: acc, rb: xr }),
                PoolOp::Avg => e.push(Op::Add { ty: Ty::F32, rd: acc, ra: acc, b: Src::Reg(xr) }),
            }
        }
    }
    if let Some(inv) = inv {
        e.push(Op::Mul { ty: Ty::F32, rd: acc, ra: acc, b: Src::Reg(inv) });
    }
    e.st(acc, ao, 0);
    e.bump(ao, 4);
    e.bump(ax, (s * 4) as i64);
    e.loop_back(p, ao, Src::Reg(a_row), ox_top);
    e.bump(ax, ((s * w) as i64 - (wo * s) as i64) * 4);
    e.loop_back(p, ao, Src::Reg(a_ch), oy_top);
    e.bump(ax, ((h * w) as i64 - (ho * s * w) as i64) * 4);
    e.loop_back(p, ao, Src::Imm(byte(out + c * ho * wo)), c_top);
    Ok(())
}
