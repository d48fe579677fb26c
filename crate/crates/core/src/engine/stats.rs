//! Aggregate counters over an event stream.

use super::latency::LatencyModel;
use super::trace::{Category, Event, RowCycle, TraceSink, TransferKind};
use crate::compiler::{AsicKind, ColOp, Stage};
use crate::config::SystemConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferTotals {
    pub count: u64,
    pub bytes: u64,
    pub time_ps: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AsicTotals {
    pub count: u64,
    pub busy_ps: u64,
    pub multiplies: u64,
    pub adds: u64,
}

/// Dynamic activity attributable to a stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub activations: u64,
    pub mac_columns: u64,
    pub read_columns: u64,
    pub write_columns: u64,
    pub asic_busy_ps: u64,
    /// Bus time moving data out of the DRAM.
    pub bus_read_ps: u64,
    /// Bus time moving data into one channel.
    pub bus_write_ps: u64,
    /// Bus time filling every channel at once.
    pub broadcast_ps: u64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.activations += o.activations;
        self.mac_columns += o.mac_columns;
        self.read_columns += o.read_columns;
        self.write_columns += o.write_columns;
        self.asic_busy_ps += o.asic_busy_ps;
        self.bus_read_ps += o.bus_read_ps;
        self.bus_write_ps += o.bus_write_ps;
        self.broadcast_ps += o.broadcast_ps;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub counts: Counts,
    pub stage_counts: BTreeMap<Stage, Counts>,
    pending: Counts,
    pub activations: u64,
    pub row_hits: u64,
    pub mac_columns: u64,
    pub read_columns: u64,
    pub write_columns: u64,
    /// Activations attributable to each column op.
    pub activations_by_op: BTreeMap<String, u64>,
    pub refreshes: Vec<u64>,
    pub transfers: BTreeMap<String, TransferTotals>,
    pub asic: BTreeMap<String, AsicTotals>,
    pub by_category: BTreeMap<Category, u64>,
    pub by_stage: BTreeMap<Stage, u64>,
    pub operand_elements: u64,
    pub instructions: u64,
    /// Row-open time already closed, summed over banks.
    pub open_time_ps: u64,
    open_since: Vec<Option<u64>>,
    t_rfc: u64,
    last_ref: Vec<u64>,
}

impl Stats {
    pub fn new(cfg: &SystemConfig) -> Self {
        let g = &cfg.geometry;
        Self {
            counts: Counts::default(),
            stage_counts: BTreeMap::new(),
            pending: Counts::default(),
            activations: 0,
            row_hits: 0,
            mac_columns: 0,
            read_columns: 0,
            write_columns: 0,
            activations_by_op: BTreeMap::new(),
            refreshes: vec![0; g.channels as usize],
            transfers: BTreeMap::new(),
            asic: BTreeMap::new(),
            by_category: Category::ALL.iter().map(|&c| (c, 0)).collect(),
            by_stage: BTreeMap::new(),
            operand_elements: 0,
            instructions: 0,
            open_time_ps: 0,
            open_since: vec![None; g.total_banks() as usize],
            t_rfc: LatencyModel::new(cfg).t_rfc,
            last_ref: vec![0; g.channels as usize],
        }
    }

    pub fn columns(&self) -> u64 {
        self.mac_columns + self.read_columns + self.write_columns
    }

    /// Column accesses that found their row already open.
    pub fn row_hit_rate(&self) -> f64 {
        let cols = self.columns();
        if cols == 0 {
            return 0.0;
        }
        1.0 - self.activations as f64 / cols as f64
    }

    /// Counts of all events so far, including those not yet attributed to an instruction.
    pub fn total_counts(&self) -> Counts {
        let mut c = self.counts;
        c.add(&self.pending);
        c
    }

    pub fn total_refreshes(&self) -> u64 {
        self.refreshes.iter().sum()
    }

    /// Summed bank row-open time up to `final_time`, counting rows still open.
    pub fn open_time_until(&self, final_time: u64) -> u64 {
        self.open_time_ps + self.open_since.iter().flatten().map(|&s| final_time.saturating_sub(s)).sum::<u64>()
    }

    /// Summed per-channel refresh time inside `[0, final_time]`.
    pub fn refresh_time_until(&self, final_time: u64) -> u64 {
        self.refreshes
            .iter()
            .zip(&self.last_ref)
            .map(|(&n, &last)| {
                let overshoot = if n > 0 { (last + self.t_rfc).saturating_sub(final_time).min(self.t_rfc) } else { 0 };
                n * self.t_rfc - overshoot
            })
            .sum()
    }

    fn close(&mut self, bank: u32, at: u64) {
        if let Some(s) = self.open_since[bank as usize].take() {
            self.open_time_ps += at - s;
        }
    }

    fn rows(&mut self, r: &RowCycle) {
        let b = r.bank;
        if let Some(p) = r.pre_before {
            self.close(b, p);
        }
        let acts = r.activations();
        let cols = r.columns();
        self.activations += acts;
        self.row_hits += cols - acts;
        let key = match r.op {
            ColOp::Mac => {
                self.mac_columns += cols;
                "mac"
            }
            ColOp::Read => {
                self.read_columns += cols;
                "read"
            }
            ColOp::Write => {
                self.write_columns += cols;
                "write"
            }
        };
        *self.activations_by_op.entry(key.into()).or_default() += acts;
        self.pending.activations += acts;
        match r.op {
            ColOp::Mac => self.pending.mac_columns += cols,
            ColOp::Read => self.pending.read_columns += cols,
            ColOp::Write => self.pending.write_columns += cols,
        }
        if let Some(a) = r.act0 {
            self.open_since[b as usize] = Some(a);
        }
        if r.rows > 1 {
            self.close(b, r.act1 - r.pre_lead);
            self.open_time_ps += (r.rows as u64 - 2) * (r.period - r.pre_lead);
            self.open_since[b as usize] = r.act(r.rows - 1);
        }
        if let Some(p) = r.last_pre {
            self.close(b, p);
        }
    }
}

fn transfer_name(k: TransferKind) -> &'static str {
    match k {
        TransferKind::Broadcast => "broadcast",
        TransferKind::Collect => "collect",
        TransferKind::RowRead => "row_read",
        TransferKind::KvWrite => "kv_write",
    }
}

pub fn asic_name(k: AsicKind) -> &'static str {
    match k {
        AsicKind::EmbedAdd => "embed_add",
        AsicKind::LayerNorm => "layernorm",
        AsicKind::Softmax => "softmax",
        AsicKind::Gelu => "gelu",
        AsicKind::Residual => "residual",
        AsicKind::PartialSum => "partial_sum",
        AsicKind::Argmax => "argmax",
    }
}

impl TraceSink for Stats {
    fn event(&mut self, e: &Event) {
        match e {
            Event::Rows(r) => self.rows(r),
            Event::Pre { bank, at } => self.close(*bank, *at),
            Event::Ref { channel, at } => {
                self.refreshes[*channel as usize] += 1;
                self.last_ref[*channel as usize] = *at;
            }
            Event::Transfer { kind, duration, bytes, .. } => {
                let t = self.transfers.entry(transfer_name(*kind).into()).or_default();
                t.count += 1;
                t.bytes += bytes;
                t.time_ps += duration;
                match kind {
                    TransferKind::Broadcast => self.pending.broadcast_ps += duration,
                    TransferKind::Collect | TransferKind::RowRead => self.pending.bus_read_ps += duration,
                    TransferKind::KvWrite => self.pending.bus_write_ps += duration,
                }
            }
            Event::Asic { kind, duration, multiplies, adds, .. } => {
                let a = self.asic.entry(asic_name(*kind).into()).or_default();
                a.count += 1;
                a.busy_ps += duration;
                a.multiplies += multiplies;
                a.adds += adds;
                self.pending.asic_busy_ps += duration;
            }
            Event::Instr { count, stage, split, .. } => {
                self.instructions += *count as u64;
                let p = std::mem::take(&mut self.pending);
                self.counts.add(&p);
                self.stage_counts.entry(*stage).or_default().add(&p);
                for &(c, t) in split {
                    *self.by_category.entry(c).or_default() += t;
                    *self.by_stage.entry(*stage).or_default() += t;
                }
            }
            Event::Operands { elements } => self.operand_elements += elements,
        }
    }
}
