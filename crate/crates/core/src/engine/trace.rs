//! Simulation events and the sinks that consume them.

use crate::compiler::{AsicKind, ColOp, Stage};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Broadcast,
    Collect,
    RowRead,
    KvWrite,
}

/// Latency categories of the run breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Vmm,
    AsicArith,
    Transfer,
    KvWrite,
    Refresh,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::Vmm, Category::AsicArith, Category::Transfer, Category::KvWrite, Category::Refresh];

    pub fn name(self) -> &'static str {
        match self {
            Category::Vmm => "vmm",
            Category::AsicArith => "asic_arith",
            Category::Transfer => "transfer",
            Category::KvWrite => "kv_write",
            Category::Refresh => "refresh",
        }
    }
}

/// Rows `first_row + i * row_stride` of one bank, `i < rows`, processed back to back.
///
/// Row 0 opens at `act0` (or was already open), its columns start at `col0`. Rows
/// `i >= 1` open at `act1 + (i - 1) * period` and start their columns `rcd` later.
/// Every row except the last is precharged `pre_lead` before the next ACT; the last
/// one is precharged at `last_pre` when set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowCycle {
    pub bank: u32,
    pub op: ColOp,
    pub first_row: u32,
    pub row_stride: u32,
    pub rows: u32,
    pub cols: [u32; 3],
    pub pre_before: Option<u64>,
    pub act0: Option<u64>,
    pub col0: u64,
    pub act1: u64,
    pub period: u64,
    pub rcd: u64,
    pub col_step: u64,
    pub pre_lead: u64,
    pub last_pre: Option<u64>,
}

impl RowCycle {
    pub fn row_cols(&self, i: u32) -> u32 {
        if i == 0 {
            self.cols[0]
        } else if i + 1 == self.rows {
            self.cols[2]
        } else {
            self.cols[1]
        }
    }

    pub fn act(&self, i: u32) -> Option<u64> {
        if i == 0 {
            self.act0
        } else {
            Some(self.act1 + (i as u64 - 1) * self.period)
        }
    }

    pub fn first_col(&self, i: u32) -> u64 {
        if i == 0 {
            self.col0
        } else {
            self.act1 + (i as u64 - 1) * self.period + self.rcd
        }
    }

    pub fn last_col(&self, i: u32) -> u64 {
        self.first_col(i) + (self.row_cols(i) as u64 - 1) * self.col_step
    }

    pub fn activations(&self) -> u64 {
        self.rows as u64 - u64::from(self.act0.is_none())
    }

    pub fn columns(&self) -> u64 {
        match self.rows {
            1 => self.cols[0] as u64,
            n => self.cols[0] as u64 + self.cols[2] as u64 + (n as u64 - 2) * self.cols[1] as u64,
        }
    }

    /// Time at which the last column command completes.
    pub fn end(&self) -> u64 {
        self.last_col(self.rows - 1) + self.col_step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Rows(RowCycle),
    /// Single precharge issued ahead of a refresh.
    Pre { bank: u32, at: u64 },
    Ref { channel: u32, at: u64 },
    Transfer { kind: TransferKind, at: u64, duration: u64, bytes: u64 },
    Asic { kind: AsicKind, at: u64, duration: u64, multiplies: u64, adds: u64 },
    /// Completed instruction, or bundle when `count > 1`.
    Instr { first: u32, count: u32, stage: Stage, start: u64, end: u64, split: [(Category, u64); 2] },
    /// Weight and KV operand elements consumed by MAC units.
    Operands { elements: u64 },
}

impl Event {
    /// CSV lines `clock_ps,node,command,duration_ps,bytes,row_hit`, one per DRAM
    /// command for row events. `t_rfc` is the refresh duration in ps.
    pub fn csv_lines(&self, t_rfc: u64, out: &mut String) {
        match self {
            Event::Rows(r) => {
                let b = r.bank;
                let cmd = match r.op {
                    ColOp::Mac => "mac",
                    ColOp::Read => "rd",
                    ColOp::Write => "wr",
                };
                if let Some(p) = r.pre_before {
                    let _ = writeln!(out, "{p},bank{b},pre,{},0,false", r.pre_lead);
                }
                for i in 0..r.rows {
                    let act = r.act(i);
                    if let Some(a) = act {
                        let _ = writeln!(out, "{a},bank{b},act,{},0,false", r.rcd);
                    }
                    let c0 = r.first_col(i);
                    for j in 0..r.row_cols(i) as u64 {
                        let hit = j > 0 || act.is_none();
                        let _ = writeln!(out, "{},bank{b},{cmd},{},32,{hit}", c0 + j * r.col_step, r.col_step);
                    }
                    let pre = if i + 1 < r.rows { r.act(i + 1).map(|a| a - r.pre_lead) } else { r.last_pre };
                    if let Some(p) = pre {
                        let _ = writeln!(out, "{p},bank{b},pre,{},0,false", r.pre_lead);
                    }
                }
            }
            Event::Pre { bank, at } => {
                let _ = writeln!(out, "{at},bank{bank},pre,0,0,false");
            }
            Event::Ref { channel, at } => {
                let _ = writeln!(out, "{at},ch{channel},ref,{t_rfc},0,false");
            }
            Event::Transfer { kind, at, duration, bytes } => {
                let _ = writeln!(out, "{at},bus,{kind:?},{duration},{bytes},false");
            }
            Event::Asic { kind, at, duration, .. } => {
                let _ = writeln!(out, "{at},asic,{kind:?},{duration},0,false");
            }
            Event::Instr { first, count, stage, start, end, .. } => {
                let _ = writeln!(out, "{start},instr{first}+{count},{},{},0,false", stage.name(), end - start);
            }
            Event::Operands { .. } => {}
        }
    }
}

pub trait TraceSink {
    fn event(&mut self, e: &Event);

    /// First timing violation found, if the sink checks timing.
    fn violation(&self) -> Option<&super::Violation> {
        None
    }
}

impl<A: TraceSink, B: TraceSink> TraceSink for (A, B) {
    fn event(&mut self, e: &Event) {
        self.0.event(e);
        self.1.event(e);
    }

    fn violation(&self) -> Option<&super::Violation> {
        self.0.violation().or(self.1.violation())
    }
}

impl<S: TraceSink + ?Sized> TraceSink for &mut S {
    fn event(&mut self, e: &Event) {
        (**self).event(e)
    }

    fn violation(&self) -> Option<&super::Violation> {
        (**self).violation()
    }
}

#[derive(Debug, Default)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn event(&mut self, _: &Event) {}
}

/// Keeps every event.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    pub events: Vec<Event>,
}

impl TraceSink for Recorder {
    fn event(&mut self, e: &Event) {
        self.events.push(e.clone());
    }
}

/// Streams events as CSV lines into a writer.
pub struct CsvTrace<W: std::io::Write> {
    out: W,
    line: String,
    t_rfc: u64,
    pub error: Option<std::io::Error>,
}

impl<W: std::io::Write> CsvTrace<W> {
    pub fn new(mut out: W, cfg: &crate::config::SystemConfig) -> Self {
        let error = out.write_all(b"clock_ps,node,command,duration_ps,bytes,row_hit\n").err();
        Self { out, line: String::new(), t_rfc: super::LatencyModel::new(cfg).t_rfc, error }
    }

    /// Flushes and returns the writer, or the first write error.
    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: std::io::Write> TraceSink for CsvTrace<W> {
    fn event(&mut self, e: &Event) {
        if self.error.is_some() {
            return;
        }
        self.line.clear();
        e.csv_lines(self.t_rfc, &mut self.line);
        self.error = self.out.write_all(self.line.as_bytes()).err();
    }
}

/// Ordered trace with the final clock.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<Event>,
    pub final_time: u64,
}
