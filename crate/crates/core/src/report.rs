//! End-to-end runs, parameter sweeps and their tabular output.

use crate::compiler::{build_graph, compile, CompileError, Stage, TokenHint};
use crate::config::{ConfigError, GptModelConfig, SystemConfig};
use crate::energy::{accumulate, EnergyReport};
use crate::engine::{Category, SimError, Simulator, Stats, TimingChecker, TraceSink};
use crate::mapper::{build_memory_map, MapError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl RunError {
    /// Process exit code: 1 config, 2 capacity, 3 internal constraint violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Map(MapError::Geometry(_)) => 1,
            RunError::Map(_) | RunError::Compile(CompileError::KvCapacity { .. }) => 2,
            RunError::Compile(_) | RunError::Sim(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub token_count: u32,
    pub channels: u32,
    pub mac_width: u32,
    pub asic_clock_hz: f64,
    pub pin_rate_gbps: f64,
    /// Seconds.
    pub total_latency: f64,
    /// Seconds per generated token, in generation order.
    pub per_token_latency: Vec<f64>,
    /// Seconds per latency category.
    pub breakdown: BTreeMap<String, f64>,
    /// Seconds per model stage.
    pub stage_breakdown: BTreeMap<String, f64>,
    pub energy: EnergyReport,
    pub row_hit_rate: f64,
    pub activations: u64,
    pub column_accesses: u64,
    pub refresh_count: u64,
    /// Bytes moved over the PIM interface: broadcasts, collects and KV writes.
    pub data_movement_bytes: u64,
    /// Weight and KV bytes consumed in the banks.
    pub operand_bytes: u64,
    pub data_movement_reduction: Option<f64>,
    pub timing_violations: Vec<String>,
    pub stats: Stats,
}

impl RunReport {
    pub fn category_seconds(&self, c: Category) -> f64 {
        self.breakdown.get(c.name()).copied().unwrap_or(0.0)
    }

    pub fn category_share(&self, c: Category) -> f64 {
        if self.total_latency > 0.0 {
            self.category_seconds(c) / self.total_latency
        } else {
            0.0
        }
    }
}

/// Weight/KV bytes a host-side system would fetch over bytes the PIM system moved.
pub fn data_movement_reduction(operand_bytes: u64, moved_bytes: u64) -> Option<f64> {
    (operand_bytes > 0 && moved_bytes > 0).then(|| operand_bytes as f64 / moved_bytes as f64)
}

/// Generates `tokens` tokens, streaming per-token compile and simulation.
pub fn run(model: &GptModelConfig, tokens: u32, cfg: &SystemConfig) -> Result<RunReport, RunError> {
    let mut none = crate::engine::NullSink;
    run_with_sink(model, tokens, cfg, &mut none)
}

/// As [`run`], also feeding every event to `extra`.
pub fn run_with_sink(model: &GptModelConfig, tokens: u32, cfg: &SystemConfig, extra: &mut dyn TraceSink) -> Result<RunReport, RunError> {
    cfg.validate()?;
    model.validate()?;
    let map = build_memory_map(model, &cfg.geometry, &cfg.pim, tokens.max(1))?;
    let sink = (Stats::new(cfg), (TimingChecker::new(cfg), extra));
    let mut sim = Simulator::new(cfg, &map, sink);
    let mut per_token = Vec::with_capacity(tokens as usize);
    for p in 1..=tokens {
        let graph = build_graph(model, p);
        let stream = compile(&graph, &map, cfg, TokenHint::default())?;
        let t0 = sim.now();
        sim.run_stream(&stream)?;
        per_token.push((sim.now() - t0) as f64 * 1e-12);
    }
    let final_time = sim.finish();
    let (stats, (mut checker, _)) = sim.sink;
    checker.finish(final_time);
    let energy = accumulate(&stats, final_time, cfg);
    let moved: u64 = ["broadcast", "collect", "kv_write"].iter().filter_map(|k| stats.transfers.get(*k)).map(|t| t.bytes).sum();
    let operand_bytes = stats.operand_elements * 2;
    let breakdown = stats.by_category.iter().map(|(c, &t)| (c.name().to_string(), t as f64 * 1e-12)).collect();
    let stage_breakdown = Stage::ALL
        .iter()
        .map(|s| (s.name().to_string(), stats.by_stage.get(s).copied().unwrap_or(0) as f64 * 1e-12))
        .collect();
    Ok(RunReport {
        model: model.name.clone(),
        token_count: tokens,
        channels: cfg.geometry.channels,
        mac_width: cfg.pim.mac_width,
        asic_clock_hz: cfg.asic.clock,
        pin_rate_gbps: cfg.geometry.pin_rate,
        total_latency: final_time as f64 * 1e-12,
        per_token_latency: per_token,
        breakdown,
        stage_breakdown,
        row_hit_rate: stats.row_hit_rate(),
        activations: stats.activations,
        column_accesses: stats.columns(),
        refresh_count: stats.total_refreshes(),
        data_movement_bytes: moved,
        operand_bytes,
        data_movement_reduction: data_movement_reduction(operand_bytes, moved),
        timing_violations: checker.violations.iter().map(|v| v.to_string()).collect(),
        energy,
        stats,
    })
}

/// One flat line of a run: the scalar columns of a [`RunReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub model: String,
    pub token_count: u32,
    pub channels: u32,
    pub mac_width: u32,
    pub asic_clock_hz: f64,
    pub pin_rate_gbps: f64,
    pub total_latency_s: f64,
    pub vmm_s: f64,
    pub asic_arith_s: f64,
    pub transfer_s: f64,
    pub kv_write_s: f64,
    pub refresh_s: f64,
    pub energy_j: f64,
    pub dram_energy_j: f64,
    pub asic_energy_j: f64,
    pub row_hit_rate: f64,
    pub activations: u64,
    pub column_accesses: u64,
    pub refresh_count: u64,
    pub data_movement_bytes: u64,
    pub operand_bytes: u64,
    pub data_movement_reduction: Option<f64>,
    pub timing_violations: u64,
}

impl RunReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            model: self.model.clone(),
            token_count: self.token_count,
            channels: self.channels,
            mac_width: self.mac_width,
            asic_clock_hz: self.asic_clock_hz,
            pin_rate_gbps: self.pin_rate_gbps,
            total_latency_s: self.total_latency,
            vmm_s: self.category_seconds(Category::Vmm),
            asic_arith_s: self.category_seconds(Category::AsicArith),
            transfer_s: self.category_seconds(Category::Transfer),
            kv_write_s: self.category_seconds(Category::KvWrite),
            refresh_s: self.category_seconds(Category::Refresh),
            energy_j: self.energy.total,
            dram_energy_j: self.energy.dram_side(),
            asic_energy_j: self.energy.asic,
            row_hit_rate: self.row_hit_rate,
            activations: self.activations,
            column_accesses: self.column_accesses,
            refresh_count: self.refresh_count,
            data_movement_bytes: self.data_movement_bytes,
            operand_bytes: self.operand_bytes,
            data_movement_reduction: self.data_movement_reduction,
            timing_violations: self.timing_violations.len() as u64,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header plus one summary line.
    pub fn to_csv(&self) -> String {
        write_csv(std::slice::from_ref(&self.summary()))
    }

    /// Per-token latency as `token,latency_s` lines.
    pub fn per_token_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row {
            token: usize,
            latency_s: f64,
        }
        let rows: Vec<Row> = self.per_token_latency.iter().enumerate().map(|(i, &l)| Row { token: i + 1, latency_s: l }).collect();
        write_csv(&rows)
    }
}

fn write_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

pub fn read_csv<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDimension {
    AsicFreq,
    PinRate,
    Tokens,
    MacWidth,
    Channels,
}

impl SweepDimension {
    pub const ALL: [SweepDimension; 5] =
        [SweepDimension::AsicFreq, SweepDimension::PinRate, SweepDimension::Tokens, SweepDimension::MacWidth, SweepDimension::Channels];

    pub fn name(self) -> &'static str {
        match self {
            SweepDimension::AsicFreq => "asic_freq",
            SweepDimension::PinRate => "pin_rate",
            SweepDimension::Tokens => "tokens",
            SweepDimension::MacWidth => "mac_width",
            SweepDimension::Channels => "channels",
        }
    }

    /// Sets `value` on the config or token count. ASIC frequency is in Hz, pin rate in Gb/s.
    pub fn apply(self, value: f64, cfg: &mut SystemConfig, tokens: &mut u32) -> Result<(), String> {
        let whole = || -> Result<u32, String> {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as u32)
            } else {
                Err(format!("{} must be a positive integer, got {value}", self.name()))
            }
        };
        match self {
            SweepDimension::AsicFreq => cfg.asic.clock = value,
            SweepDimension::PinRate => cfg.geometry.pin_rate = value,
            SweepDimension::Tokens => *tokens = whole()?,
            SweepDimension::MacWidth => cfg.pim.mac_width = whole()?,
            SweepDimension::Channels => cfg.geometry.channels = whole()?,
        }
        cfg.validate().map_err(|e| e.to_string())
    }
}

impl std::str::FromStr for SweepDimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let key = s.replace('-', "_");
        SweepDimension::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .ok_or_else(|| format!("unknown sweep dimension {s:?}; expected one of asic_freq, pin_rate, tokens, mac_width, channels"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Latency over the first row's latency.
    pub normalized_latency: Option<f64>,
    pub normalized_energy: Option<f64>,
    pub error: Option<String>,
    pub report: Option<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub dimension: SweepDimension,
    pub model: String,
    pub rows: Vec<SweepRow>,
}

/// Flat CSV form of a sweep row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub dimension: String,
    pub value: f64,
    pub normalized_latency: Option<f64>,
    pub normalized_energy: Option<f64>,
    pub error: Option<String>,
    pub token_count: Option<u32>,
    pub total_latency_s: Option<f64>,
    pub energy_j: Option<f64>,
    pub vmm_s: Option<f64>,
    pub asic_arith_s: Option<f64>,
    pub transfer_s: Option<f64>,
    pub kv_write_s: Option<f64>,
    pub refresh_s: Option<f64>,
    pub row_hit_rate: Option<f64>,
    pub data_movement_reduction: Option<f64>,
}

/// One run per value; a bad value records its error and the sweep goes on.
pub fn sweep(dimension: SweepDimension, values: &[f64], model: &GptModelConfig, tokens: u32, base: &SystemConfig) -> SweepTable {
    let mut rows: Vec<SweepRow> = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        let mut t = tokens;
        let outcome = dimension.apply(value, &mut cfg, &mut t).and_then(|()| run(model, t, &cfg).map_err(|e| e.to_string()));
        rows.push(match outcome {
            Ok(report) => SweepRow { value, normalized_latency: None, normalized_energy: None, error: None, report: Some(report) },
            Err(e) => SweepRow { value, normalized_latency: None, normalized_energy: None, error: Some(e), report: None },
        });
    }
    if let Some(first) = rows.first().and_then(|r| r.report.as_ref()).map(|r| (r.total_latency, r.energy.total)) {
        for row in &mut rows {
            if let Some(r) = &row.report {
                row.normalized_latency = (first.0 > 0.0).then(|| r.total_latency / first.0);
                row.normalized_energy = (first.1 > 0.0).then(|| r.energy.total / first.1);
            }
        }
    }
    SweepTable { dimension, model: model.name.clone(), rows }
}

impl SweepTable {
    pub fn csv_rows(&self) -> Vec<SweepCsvRow> {
        self.rows
            .iter()
            .map(|row| {
                let s = row.report.as_ref().map(RunReport::summary);
                let s = s.as_ref();
                SweepCsvRow {
                    dimension: self.dimension.name().to_string(),
                    value: row.value,
                    normalized_latency: row.normalized_latency,
                    normalized_energy: row.normalized_energy,
                    error: row.error.clone(),
                    token_count: s.map(|s| s.token_count),
                    total_latency_s: s.map(|s| s.total_latency_s),
                    energy_j: s.map(|s| s.energy_j),
                    vmm_s: s.map(|s| s.vmm_s),
                    asic_arith_s: s.map(|s| s.asic_arith_s),
                    transfer_s: s.map(|s| s.transfer_s),
                    kv_write_s: s.map(|s| s.kv_write_s),
                    refresh_s: s.map(|s| s.refresh_s),
                    row_hit_rate: s.map(|s| s.row_hit_rate),
                    data_movement_reduction: s.and_then(|s| s.data_movement_reduction),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        write_csv(&self.csv_rows())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }
}
