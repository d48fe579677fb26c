//! Durations of DRAM commands, bus transfers and ASIC operations, in picoseconds.

use crate::compiler::AsicKind;
use crate::config::SystemConfig;
use serde::{Deserialize, Serialize};

pub const PS_PER_SECOND: f64 = 1e12;

/// Multiply and add counts of one ASIC evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCensus {
    pub multiplies: u64,
    pub adds: u64,
}

impl OpCensus {
    pub const fn new(multiplies: u64, adds: u64) -> Self {
        Self { multiplies, adds }
    }

    pub fn scaled(self, k: u64) -> Self {
        Self { multiplies: self.multiplies * k, adds: self.adds * k }
    }
}

impl std::ops::Add for OpCensus {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { multiplies: self.multiplies + o.multiplies, adds: self.adds + o.adds }
    }
}

/// Range reduction, 6-term Horner and the power-of-two rescale.
pub const EXP_CENSUS: OpCensus = OpCensus::new(8, 9);
/// Seed plus three Newton-Raphson steps.
pub const RECIPROCAL_CENSUS: OpCensus = OpCensus::new(7, 9);
/// Bit-trick seed plus two Newton-Raphson steps.
pub const INV_SQRT_CENSUS: OpCensus = OpCensus::new(7, 5);
/// Cubic term, 6-term tanh series and the outer product.
pub const GELU_CENSUS: OpCensus = OpCensus::new(13, 7);

/// Work of an ASIC instruction. `groups` counts independent vectors of `elements`.
pub fn asic_census(kind: AsicKind, elements: u32, groups: u32, adds: u64) -> OpCensus {
    let n = elements as u64;
    let g = groups.max(1) as u64;
    match kind {
        // scale, max, shift, exp, sum, reciprocal, normalize
        AsicKind::Softmax => OpCensus::new(
            n + EXP_CENSUS.multiplies * n + RECIPROCAL_CENSUS.multiplies + n,
            n.saturating_sub(1) + n + EXP_CENSUS.adds * n + n.saturating_sub(1) + RECIPROCAL_CENSUS.adds,
        )
        .scaled(g),
        AsicKind::Gelu => GELU_CENSUS.scaled(n * g),
        AsicKind::LayerNorm => OpCensus::new(3 * n + 3 + INV_SQRT_CENSUS.multiplies, 6 * n + 3).scaled(g),
        AsicKind::Residual | AsicKind::EmbedAdd => OpCensus::new(0, n * g),
        AsicKind::PartialSum => OpCensus::new(0, adds),
        AsicKind::Argmax => OpCensus::new(0, n.saturating_sub(1) * g),
    }
}

/// Timing parameters converted to integer picoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub dram_cycle: u64,
    pub t_rcd: u64,
    pub t_rp: u64,
    pub t_ccd: u64,
    pub t_wr: u64,
    pub t_rfc: u64,
    pub t_refi: u64,
    pub t_ras: u64,
    pub mac_drain: u64,
    pub mac_width: u32,
    pub asic_clock_hz: f64,
    pub num_adders: u64,
    pub num_multipliers: u64,
    /// Bytes per second of one channel.
    pub bandwidth: f64,
}

fn cycles_ps(ns: f64, cycle_ps: u64) -> u64 {
    let cycles = (ns * 1e3 / cycle_ps as f64 - 1e-9).ceil().max(0.0) as u64;
    cycles * cycle_ps
}

impl LatencyModel {
    pub fn new(cfg: &SystemConfig) -> Self {
        let t = &cfg.timing;
        let dram_cycle = (PS_PER_SECOND / cfg.geometry.dram_clock).round() as u64;
        let pim_cycle = (PS_PER_SECOND / cfg.pim.pim_clock).round() as u64;
        Self {
            dram_cycle,
            t_rcd: cycles_ps(t.t_rcd, dram_cycle),
            t_rp: cycles_ps(t.t_rp, dram_cycle),
            t_ccd: cycles_ps(t.t_ccd, dram_cycle).max(dram_cycle),
            t_wr: cycles_ps(t.t_wr, dram_cycle),
            t_rfc: cycles_ps(t.t_rfc, dram_cycle),
            t_refi: cycles_ps(t.t_refi, dram_cycle),
            t_ras: cycles_ps(t.t_ras, dram_cycle),
            mac_drain: cfg.pim.adder_drain_cycles as u64 * pim_cycle,
            mac_width: cfg.pim.mac_width,
            asic_clock_hz: cfg.asic.clock,
            num_adders: cfg.asic.num_adders as u64,
            num_multipliers: cfg.asic.num_multipliers as u64,
            bandwidth: cfg.channel_bandwidth(),
        }
    }

    /// Bus time for `bytes` on one channel, rounded up to whole DRAM cycles.
    pub fn transfer(&self, bytes: u64) -> u64 {
        if bytes == 0 {
            return 0;
        }
        let ps = (bytes as f64 * PS_PER_SECOND / self.bandwidth - 1e-6).ceil() as u64;
        ps.div_ceil(self.dram_cycle) * self.dram_cycle
    }

    pub fn asic_cycles(&self, census: OpCensus) -> u64 {
        census.multiplies.div_ceil(self.num_multipliers).max(census.adds.div_ceil(self.num_adders)).max(1)
    }

    pub fn asic_cycles_to_ps(&self, cycles: u64) -> u64 {
        (cycles as f64 * PS_PER_SECOND / self.asic_clock_hz - 1e-6).ceil() as u64
    }

    pub fn asic_compute(&self, kind: AsicKind, elements: u32, groups: u32, adds: u64) -> u64 {
        self.asic_cycles_to_ps(self.asic_cycles(asic_census(kind, elements, groups, adds)))
    }
}
