use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pimsim::compiler::{build_graph, compile, CompileError, TokenHint};
use pimsim::config::{load_config, load_model, ConfigError, GptModelConfig, SystemConfig};
use pimsim::engine::{CsvTrace, NullSink, TraceSink};
use pimsim::mapper::{build_memory_map, MapError};
use pimsim::numerics::oracle::accuracy_report;
use pimsim::report::{run_with_sink, sweep, RunError, RunReport, SweepDimension};

#[derive(Parser)]
#[command(name = "pimsim", version, about = "GDDR6 processing-in-memory GPT accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tokens and report latency, energy and memory statistics.
    Run {
        #[command(flatten)]
        sys: SystemArgs,
        #[command(flatten)]
        out: OutputArgs,
        /// Write every simulator event as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Include per-stage energy and the energy formulas.
        #[arg(long)]
        energy_detail: bool,
    },
    /// Run once per value of one parameter, normalized to the first value.
    Sweep {
        /// asic_freq (Hz), pin_rate (Gb/s), tokens, mac_width or channels.
        #[arg(long)]
        dimension: SweepDimension,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
        #[command(flatten)]
        sys: SystemArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Memory map inspection.
    Map {
        #[command(subcommand)]
        action: MapAction,
    },
    /// Compile one token step.
    Compile {
        #[command(flatten)]
        sys: SystemArgs,
        /// 1-based position of the generated token.
        #[arg(long, default_value_t = 1)]
        position: u32,
        /// Human-readable listing instead of JSON.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BF16 approximation accuracy.
    Numerics {
        #[command(subcommand)]
        action: NumericsAction,
    },
    /// Check a configuration file and print the effective configuration.
    Validate {
        #[arg(long, env = "PIMSIM_CONFIG")]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MapAction {
    /// Print matrix placements and KV reservations.
    Dump {
        #[command(flatten)]
        sys: SystemArgs,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Subcommand)]
enum NumericsAction {
    /// ULP error table of each operation against a wide-precision reference.
    Report {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random cases for the softmax and layernorm suites.
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Args)]
struct SystemArgs {
    /// Catalog name or path to a model TOML file.
    #[arg(long, default_value = "gpt2-small")]
    model: String,
    #[arg(long, default_value_t = 1024)]
    tokens: u32,
    /// System TOML; unspecified fields keep baseline values.
    #[arg(long, env = "PIMSIM_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<u32>,
    #[arg(long)]
    mac_width: Option<u32>,
    /// ASIC clock in Hz.
    #[arg(long)]
    asic_freq: Option<f64>,
    /// Pin data rate in Gb/s.
    #[arg(long)]
    pin_rate: Option<f64>,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl SystemArgs {
    fn load(&self) -> Result<(GptModelConfig, SystemConfig), ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => SystemConfig::baseline(),
        };
        if let Some(v) = self.channels {
            cfg.geometry.channels = v;
        }
        if let Some(v) = self.mac_width {
            cfg.pim.mac_width = v;
        }
        if let Some(v) = self.asic_freq {
            cfg.asic.clock = v;
        }
        if let Some(v) = self.pin_rate {
            cfg.geometry.pin_rate = v;
        }
        cfg.validate()?;
        Ok((load_model(&self.model)?, cfg))
    }
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = if let Some(r) = error.downcast_ref::<RunError>() {
            r.exit_code() as u8
        } else if error.is::<ConfigError>() {
            1
        } else if let Some(m) = error.downcast_ref::<MapError>() {
            if matches!(m, MapError::Geometry(_)) {
                1
            } else {
                2
            }
        } else if let Some(c) = error.downcast_ref::<CompileError>() {
            if matches!(c, CompileError::KvCapacity { .. }) {
                2
            } else {
                3
            }
        } else {
            3
        };
        Failure { code, error }
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut s = std::io::stdout().lock();
            match s.write_all(text.as_bytes()).and_then(|()| s.flush()) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
    }
}

fn run_command(sys: &SystemArgs, out: &OutputArgs, trace: &Option<PathBuf>, energy_detail: bool) -> Result<(), Failure> {
    let (model, cfg) = sys.load()?;
    let mut report = match trace {
        Some(p) => {
            let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut sink = CsvTrace::new(BufWriter::new(file), &cfg);
            let r = run_with_sink(&model, sys.tokens, &cfg, &mut sink as &mut dyn TraceSink)?;
            sink.finish().with_context(|| format!("writing trace {}", p.display()))?;
            r
        }
        None => run_with_sink(&model, sys.tokens, &cfg, &mut NullSink)?,
    };
    if !energy_detail {
        report.energy.by_stage.clear();
        report.energy.formulas.clear();
    }
    let text = match out.format {
        Format::Json => report.to_json() + "\n",
        Format::Csv if energy_detail => report.to_csv() + "\n" + &energy_csv(&report),
        Format::Csv => report.to_csv(),
    };
    emit(&out.out, &text)?;
    if let Some(v) = report.timing_violations.first() {
        return Err(Failure { code: 3, error: anyhow::anyhow!("{} timing violations, first: {v}", report.timing_violations.len()) });
    }
    Ok(())
}

fn energy_csv(r: &RunReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ = w.write_record(["component", "joules"]);
    for (name, j) in r.energy.components() {
        let _ = w.write_record([name, &j.to_string()]);
    }
    String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { sys, out, trace, energy_detail } => run_command(&sys, &out, &trace, energy_detail),
        Command::Sweep { dimension, values, sys, out } => {
            let (model, cfg) = sys.load()?;
            let table = sweep(dimension, &values, &model, sys.tokens, &cfg);
            let text = match out.format {
                Format::Json => table.to_json() + "\n",
                Format::Csv => table.to_csv(),
            };
            emit(&out.out, &text)?;
            for row in &table.rows {
                if let Some(e) = &row.error {
                    eprintln!("{} = {}: {e}", dimension.name(), row.value);
                }
            }
            Ok(())
        }
        Command::Map { action: MapAction::Dump { sys, out } } => {
            let (model, cfg) = sys.load()?;
            let map = build_memory_map(&model, &cfg.geometry, &cfg.pim, sys.tokens.max(1))?;
            let text = match out.format {
                Format::Json => map.to_json() + "\n",
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["matrix", "round", "channel", "bank", "row", "col", "rows", "cols"]).map_err(anyhow::Error::from)?;
                    for p in &map.placements {
                        for b in &p.blocks {
                            w.write_record([
                                p.id.to_string(),
                                b.round.to_string(),
                                b.start.channel.to_string(),
                                b.start.bank.to_string(),
                                b.start.row.to_string(),
                                b.start.col.to_string(),
                                format!("{}..{}", b.rows.start, b.rows.end),
                                format!("{}..{}", b.cols.start, b.cols.end),
                            ])
                            .map_err(anyhow::Error::from)?;
                        }
                    }
                    String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?).map_err(anyhow::Error::from)?
                }
            };
            Ok(emit(&out.out, &text)?)
        }
        Command::Compile { sys, position, dump, out } => {
            let (model, cfg) = sys.load()?;
            let map = build_memory_map(&model, &cfg.geometry, &cfg.pim, sys.tokens.max(position))?;
            let stream = compile(&build_graph(&model, position), &map, &cfg, TokenHint::default())?;
            let text = if dump { stream.dump() } else { serde_json::to_string_pretty(&stream).map_err(anyhow::Error::from)? + "\n" };
            Ok(emit(&out, &text)?)
        }
        Command::Numerics { action: NumericsAction::Report { seed, cases, out } } => {
            let rows = accuracy_report(seed, cases);
            let text = match out.format {
                Format::Json => serde_json::to_string_pretty(&rows).map_err(anyhow::Error::from)? + "\n",
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    for r in &rows {
                        w.serialize(r).map_err(anyhow::Error::from)?;
                    }
                    String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?).map_err(anyhow::Error::from)?
                }
            };
            Ok(emit(&out.out, &text)?)
        }
        Command::Validate { config } => {
            let cfg = match &config {
                Some(p) => load_config(p)?,
                None => SystemConfig::baseline(),
            };
            cfg.validate()?;
            Ok(emit(&None, &cfg.to_toml())?)
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
