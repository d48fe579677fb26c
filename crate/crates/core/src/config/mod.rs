//! Hardware configuration: DRAM geometry, timing, currents, PIM and ASIC parameters.

mod catalog;

pub use catalog::{lookup_model, model_catalog, ModelCatalogEntry, GptModelConfig, ALTERNATE_MODELS};

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("constraint violated: {constraint} ({detail})")]
    Constraint { constraint: &'static str, detail: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown model '{0}'")]
    UnknownModel(String),
}

/// DRAM timing parameters in nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConstraints {
    #[serde(rename = "tRCD")]
    pub t_rcd: f64,
    #[serde(rename = "tRP")]
    pub t_rp: f64,
    #[serde(rename = "tCCD")]
    pub t_ccd: f64,
    #[serde(rename = "tWR")]
    pub t_wr: f64,
    #[serde(rename = "tRFC")]
    pub t_rfc: f64,
    #[serde(rename = "tREFI")]
    pub t_refi: f64,
    #[serde(rename = "tRAS")]
    pub t_ras: f64,
}

impl Default for TimingConstraints {
    fn default() -> Self {
        Self { t_rcd: 12.0, t_rp: 12.0, t_ccd: 1.0, t_wr: 12.0, t_rfc: 455.0, t_refi: 6825.0, t_ras: 32.0 }
    }
}

/// IDD currents in milliamperes and supply voltage in volts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurrentProfile {
    #[serde(rename = "IDD0")]
    pub idd0: f64,
    #[serde(rename = "IDD2N")]
    pub idd2n: f64,
    #[serde(rename = "IDD3N")]
    pub idd3n: f64,
    #[serde(rename = "IDD4R")]
    pub idd4r: f64,
    #[serde(rename = "IDD4W")]
    pub idd4w: f64,
    #[serde(rename = "IDD5B")]
    pub idd5b: f64,
    #[serde(rename = "VDD")]
    pub vdd: f64,
}

impl Default for CurrentProfile {
    fn default() -> Self {
        Self { idd0: 122.0, idd2n: 92.0, idd3n: 142.0, idd4r: 530.0, idd4w: 470.0, idd5b: 277.0, vdd: 1.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramGeometry {
    pub channels: u32,
    pub banks_per_channel: u32,
    /// Bits per channel.
    pub capacity_per_channel: u64,
    pub row_bytes: u32,
    /// Rows per bank.
    pub columns: u32,
    pub pins_per_channel: u32,
    /// Gb/s per pin.
    pub pin_rate: f64,
    /// Hz.
    pub dram_clock: f64,
}

impl Default for DramGeometry {
    fn default() -> Self {
        Self {
            channels: 8,
            banks_per_channel: 16,
            capacity_per_channel: 4 << 30,
            row_bytes: 2048,
            columns: 16384,
            pins_per_channel: 16,
            pin_rate: 16.0,
            dram_clock: 1e9,
        }
    }
}

impl DramGeometry {
    pub fn total_banks(&self) -> u32 {
        self.channels * self.banks_per_channel
    }

    /// BF16 elements per DRAM row.
    pub fn row_capacity(&self) -> u32 {
        self.row_bytes / 2
    }

    pub fn rows_per_bank(&self) -> u32 {
        self.columns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PimConfig {
    pub gb_bytes: u32,
    pub mac_width: u32,
    pub mac_units_per_bank: u32,
    /// Hz.
    pub pim_clock: f64,
    /// mW for a 16-lane MAC channel.
    pub mac_power: f64,
    /// Adder-tree drain in PIM cycles.
    pub adder_drain_cycles: u32,
}

impl Default for PimConfig {
    fn default() -> Self {
        Self { gb_bytes: 2048, mac_width: 16, mac_units_per_bank: 1, pim_clock: 1e9, mac_power: 149.29, adder_drain_cycles: 5 }
    }
}

impl PimConfig {
    pub fn gb_elements(&self) -> u32 {
        self.gb_bytes / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsicConfig {
    /// Hz.
    pub clock: f64,
    pub sram_bytes: u64,
    pub num_adders: u32,
    pub num_multipliers: u32,
    /// mW.
    pub power: f64,
}

impl Default for AsicConfig {
    fn default() -> Self {
        Self { clock: 1e9, sram_bytes: 128 * 1024, num_adders: 256, num_multipliers: 128, power: 304.59 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    pub layernorm_epsilon: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self { layernorm_epsilon: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub timing: TimingConstraints,
    pub current: CurrentProfile,
    pub geometry: DramGeometry,
    pub pim: PimConfig,
    pub asic: AsicConfig,
    pub numerics: NumericsConfig,
}

fn constraint(ok: bool, constraint: &'static str, detail: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Constraint { constraint, detail: detail() })
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl SystemConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.timing;
        for (name, v) in [
            ("tRCD > 0", t.t_rcd),
            ("tRP > 0", t.t_rp),
            ("tCCD > 0", t.t_ccd),
            ("tWR > 0", t.t_wr),
            ("tRFC > 0", t.t_rfc),
            ("tREFI > 0", t.t_refi),
            ("tRAS > 0", t.t_ras),
        ] {
            constraint(positive(v), name, || format!("got {v} ns"))?;
        }
        constraint(t.t_rfc < t.t_refi, "tRFC < tREFI", || format!("tRFC={} ns, tREFI={} ns", t.t_rfc, t.t_refi))?;
        constraint(t.t_ras >= t.t_rcd, "tRAS >= tRCD", || format!("tRAS={} ns, tRCD={} ns", t.t_ras, t.t_rcd))?;

        let c = &self.current;
        constraint(c.idd4r > c.idd3n, "IDD4R > IDD3N", || format!("IDD4R={}, IDD3N={}", c.idd4r, c.idd3n))?;
        constraint(c.idd3n > c.idd2n, "IDD3N > IDD2N", || format!("IDD3N={}, IDD2N={}", c.idd3n, c.idd2n))?;
        constraint(c.idd4w > c.idd3n, "IDD4W > IDD3N", || format!("IDD4W={}, IDD3N={}", c.idd4w, c.idd3n))?;
        constraint(positive(c.vdd), "VDD > 0", || format!("VDD={}", c.vdd))?;
        for (name, v) in [("IDD0 > 0", c.idd0), ("IDD2N > 0", c.idd2n), ("IDD5B > 0", c.idd5b)] {
            constraint(positive(v), name, || format!("got {v} mA"))?;
        }

        let g = &self.geometry;
        constraint(g.channels >= 1, "channels >= 1", || format!("channels={}", g.channels))?;
        constraint(g.banks_per_channel >= 1, "banks_per_channel >= 1", || format!("banks_per_channel={}", g.banks_per_channel))?;
        constraint(g.row_bytes >= 2 && g.row_bytes.is_multiple_of(2), "row_bytes even and >= 2", || format!("row_bytes={}", g.row_bytes))?;
        constraint(g.columns >= 1, "columns >= 1", || format!("columns={}", g.columns))?;
        let bytes = g.row_bytes as u64 * g.columns as u64 * g.banks_per_channel as u64;
        constraint(
            bytes * 8 == g.capacity_per_channel,
            "row_bytes * columns * banks_per_channel = capacity_per_channel / 8",
            || format!("{} bytes from geometry vs {} bits capacity", bytes, g.capacity_per_channel),
        )?;
        constraint(g.pins_per_channel >= 1, "pins_per_channel >= 1", || format!("pins_per_channel={}", g.pins_per_channel))?;
        constraint(positive(g.pin_rate), "pin_rate > 0", || format!("pin_rate={}", g.pin_rate))?;
        constraint(positive(g.dram_clock), "dram_clock > 0", || format!("dram_clock={}", g.dram_clock))?;

        let p = &self.pim;
        constraint(p.mac_width.is_power_of_two(), "mac_width power of two", || format!("mac_width={}", p.mac_width))?;
        constraint(p.gb_bytes >= 2 * p.mac_width, "gb_bytes >= 2 * mac_width", || {
            format!("gb_bytes={}, mac_width={}", p.gb_bytes, p.mac_width)
        })?;
        constraint(p.mac_units_per_bank >= 1, "mac_units_per_bank >= 1", || format!("mac_units_per_bank={}", p.mac_units_per_bank))?;
        constraint(positive(p.pim_clock), "pim_clock > 0", || format!("pim_clock={}", p.pim_clock))?;
        constraint(p.mac_power >= 0.0 && p.mac_power.is_finite(), "mac_power >= 0", || format!("mac_power={}", p.mac_power))?;
        constraint(g.row_capacity().is_multiple_of(p.mac_width), "row capacity multiple of mac_width", || {
            format!("row elements={}, mac_width={}", g.row_capacity(), p.mac_width)
        })?;

        let a = &self.asic;
        constraint(positive(a.clock), "asic clock > 0", || format!("clock={}", a.clock))?;
        constraint(a.sram_bytes > 0, "sram_bytes > 0", || format!("sram_bytes={}", a.sram_bytes))?;
        constraint(a.num_adders > 0, "num_adders > 0", || format!("num_adders={}", a.num_adders))?;
        constraint(a.num_multipliers > 0, "num_multipliers > 0", || format!("num_multipliers={}", a.num_multipliers))?;
        constraint(positive(a.power), "asic power > 0", || format!("power={}", a.power))?;

        constraint(positive(self.numerics.layernorm_epsilon), "layernorm_epsilon > 0", || {
            format!("layernorm_epsilon={}", self.numerics.layernorm_epsilon)
        })?;
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`. Missing fields take baseline values.
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: SystemConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?
        } else {
            toml::from_str(text).map_err(|e| {
                let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
                ConfigError::Syntax { line, column, message: e.message().to_string() }
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Channel bandwidth in bytes per second.
    pub fn channel_bandwidth(&self) -> f64 {
        channel_bandwidth(self)
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map(|p| offset - p).unwrap_or(offset + 1);
    (line, column)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    SystemConfig::from_str(&text)
}

/// A catalog name, or a path to a TOML file holding one model's fields.
pub fn load_model(spec: &str) -> Result<GptModelConfig, ConfigError> {
    let path = Path::new(spec);
    if !path.is_file() {
        return lookup_model(spec).map(|e| e.config);
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: spec.to_string(), source })?;
    let model: GptModelConfig = toml::from_str(&text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(&text, s.start)).unwrap_or((0, 0));
        ConfigError::Syntax { line, column, message: e.message().to_string() }
    })?;
    model.validate()?;
    Ok(model)
}

pub fn channel_bandwidth(cfg: &SystemConfig) -> f64 {
    cfg.geometry.pins_per_channel as f64 * cfg.geometry.pin_rate * 1e9 / 8.0
}
