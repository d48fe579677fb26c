//! Energy accounting from simulation statistics.

use crate::compiler::Stage;
use crate::config::{CurrentProfile, SystemConfig};
use crate::engine::{Counts, LatencyModel, SimTrace, Stats, TraceSink};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const PS: f64 = 1e-12;

/// Formulas used, printed in report headers.
pub const ENERGY_FORMULAS: &str = "\
ACT/PRE = (IDD0 - IDD2N) * VDD * (tRAS + tRP) per activation; \
RD = (IDD4R - IDD3N) * VDD * tCCD per column; WR = (IDD4W - IDD3N) * VDD * tCCD per column; \
REF = IDD5B * VDD * tRFC; background = VDD / banks_per_channel * sum over banks of \
(IDD2N * closed time + IDD3N * open time), refresh windows excluded; \
MAC = mac_power / banks_per_channel * (mac_width / 16) per busy bank; ASIC = power * busy time; \
transfer = (IDD4R or IDD4W - IDD3N) * VDD * bus time per channel";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnergyError {
    #[error("unknown command class '{0}'")]
    UnknownCommand(String),
}

/// Command classes with a fixed energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandClass {
    ActPre,
    Read,
    Write,
    Refresh,
}

impl std::str::FromStr for CommandClass {
    type Err = EnergyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "act" | "pre" | "act_pre" => Ok(Self::ActPre),
            "rd" | "read" | "mac" => Ok(Self::Read),
            "wr" | "write" => Ok(Self::Write),
            "ref" | "refresh" => Ok(Self::Refresh),
            other => Err(EnergyError::UnknownCommand(other.into())),
        }
    }
}

/// Joules of one command lasting `duration_ps` (the ACT/PRE window or column burst).
pub fn command_energy(class: CommandClass, duration_ps: u64, p: &CurrentProfile) -> f64 {
    let ma = match class {
        CommandClass::ActPre => p.idd0 - p.idd2n,
        CommandClass::Read => p.idd4r - p.idd3n,
        CommandClass::Write => p.idd4w - p.idd3n,
        CommandClass::Refresh => p.idd5b,
    };
    ma * 1e-3 * p.vdd * duration_ps as f64 * PS
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Dynamic {
    pub dram_act_pre: f64,
    pub dram_read: f64,
    pub dram_write: f64,
    pub pim_mac: f64,
    pub asic: f64,
    pub transfer: f64,
}

impl Dynamic {
    pub fn sum(&self) -> f64 {
        self.dram_act_pre + self.dram_read + self.dram_write + self.pim_mac + self.asic + self.transfer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dram_background: f64,
    pub dram_act_pre: f64,
    pub dram_read: f64,
    pub dram_write: f64,
    pub dram_refresh: f64,
    pub pim_mac: f64,
    pub asic: f64,
    pub transfer: f64,
    pub total: f64,
    pub refresh_count: u64,
    /// Dynamic energy per stage; background and refresh are not attributed.
    pub by_stage: BTreeMap<Stage, Dynamic>,
    pub formulas: String,
}

impl EnergyReport {
    /// Background, ACT/PRE, column and MAC energy of the DRAM dies.
    pub fn dram_side(&self) -> f64 {
        self.dram_background + self.dram_act_pre + self.dram_read + self.dram_write + self.dram_refresh + self.pim_mac
    }

    pub fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("dram_background", self.dram_background),
            ("dram_act_pre", self.dram_act_pre),
            ("dram_read", self.dram_read),
            ("dram_write", self.dram_write),
            ("dram_refresh", self.dram_refresh),
            ("pim_mac", self.pim_mac),
            ("asic", self.asic),
            ("transfer", self.transfer),
        ]
    }
}

fn dynamic(c: &Counts, cfg: &SystemConfig, lat: &LatencyModel) -> Dynamic {
    let p = &cfg.current;
    let act = command_energy(CommandClass::ActPre, lat.t_ras + lat.t_rp, p);
    let rd = command_energy(CommandClass::Read, lat.t_ccd, p);
    let wr = command_energy(CommandClass::Write, lat.t_ccd, p);
    let bank_mac_w = cfg.pim.mac_power * 1e-3 / cfg.geometry.banks_per_channel as f64 * cfg.pim.mac_width as f64 / 16.0;
    let bus_rd = (p.idd4r - p.idd3n) * 1e-3 * p.vdd;
    let bus_wr = (p.idd4w - p.idd3n) * 1e-3 * p.vdd;
    Dynamic {
        dram_act_pre: c.activations as f64 * act,
        dram_read: (c.mac_columns + c.read_columns) as f64 * rd,
        dram_write: c.write_columns as f64 * wr,
        pim_mac: bank_mac_w * (c.mac_columns * lat.t_ccd) as f64 * PS,
        asic: cfg.asic.power * 1e-3 * c.asic_busy_ps as f64 * PS,
        transfer: (bus_rd * c.bus_read_ps as f64 + bus_wr * (c.bus_write_ps + cfg.geometry.channels as u64 * c.broadcast_ps) as f64) * PS,
    }
}

/// Energy of a run whose statistics were gathered up to `final_time` ps.
pub fn accumulate(stats: &Stats, final_time: u64, cfg: &SystemConfig) -> EnergyReport {
    let lat = LatencyModel::new(cfg);
    let p = &cfg.current;
    let g = &cfg.geometry;
    let d = dynamic(&stats.total_counts(), cfg, &lat);
    let open = stats.open_time_until(final_time) as f64;
    let bank_time = g.total_banks() as f64 * final_time as f64;
    let refresh_bank_time = g.banks_per_channel as f64 * stats.refresh_time_until(final_time) as f64;
    let closed = (bank_time - open - refresh_bank_time).max(0.0);
    let dram_background = p.vdd / g.banks_per_channel as f64 * (p.idd2n * closed + p.idd3n * open) * 1e-3 * PS;
    let refresh_count = stats.total_refreshes();
    let dram_refresh = refresh_count as f64 * command_energy(CommandClass::Refresh, lat.t_rfc, p);
    let total = dram_background + d.dram_act_pre + d.dram_read + d.dram_write + dram_refresh + d.pim_mac + d.asic + d.transfer;
    EnergyReport {
        dram_background,
        dram_act_pre: d.dram_act_pre,
        dram_read: d.dram_read,
        dram_write: d.dram_write,
        dram_refresh,
        pim_mac: d.pim_mac,
        asic: d.asic,
        transfer: d.transfer,
        total,
        refresh_count,
        by_stage: stats.stage_counts.iter().map(|(&s, c)| (s, dynamic(c, cfg, &lat))).collect(),
        formulas: ENERGY_FORMULAS.into(),
    }
}

/// Energy of a recorded trace.
pub fn accumulate_trace(trace: &SimTrace, cfg: &SystemConfig) -> EnergyReport {
    let mut stats = Stats::new(cfg);
    for e in &trace.events {
        stats.event(e);
    }
    accumulate(&stats, trace.final_time, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        let p = CurrentProfile::default();
        let r = command_energy(CommandClass::Refresh, 455_000, &p);
        assert!((r - 0.277 * 1.25 * 455e-9).abs() < 1e-18);
        let rd = command_energy(CommandClass::Read, 1_000, &p);
        assert!((rd - 0.485e-9).abs() < 1e-18);
        assert!("bogus".parse::<CommandClass>().is_err());
    }

    #[test]
    fn empty_trace_is_zero() {
        let cfg = SystemConfig::baseline();
        let e = accumulate_trace(&SimTrace::default(), &cfg);
        assert_eq!(e.total, 0.0);
    }
}
