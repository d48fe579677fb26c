//! Event-driven execution of instruction streams over the channel/bank tree.

mod bank;
mod checker;
mod latency;
mod stats;
mod trace;

pub use bank::{BankPhase, BankState, RunStep};
pub use checker::TimingChecker;
pub use latency::{asic_census, LatencyModel, OpCensus, EXP_CENSUS, GELU_CENSUS, INV_SQRT_CENSUS, PS_PER_SECOND, RECIPROCAL_CENSUS};
pub use stats::{asic_name, AsicTotals, Counts, Stats, TransferTotals};
pub use trace::{Category, CsvTrace, Event, NullSink, Recorder, RowCycle, SimTrace, TraceSink, TransferKind};

use crate::compiler::{plan_instruction, AsicKind, Instruction, InstructionStream, Opcode, Stage, WorkPlan};
use crate::config::SystemConfig;
use crate::mapper::{KvKind, MemoryMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{constraint} violated at {clock} ps{}: {detail}", bank.map(|b| format!(" on bank {b}")).unwrap_or_default())]
pub struct Violation {
    pub constraint: &'static str,
    pub clock: u64,
    pub bank: Option<u32>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("timing constraint violation: {0}")]
    Constraint(Violation),
}

#[derive(Debug, Clone, Copy)]
struct ChannelState {
    deadline: u64,
}

/// Per-bank progress through the runs of one instruction.
#[derive(Debug, Clone, Copy)]
struct Cursor {
    gi: u32,
    end: usize,
    run: usize,
    row: u32,
    last: u64,
    delay: u64,
}

pub struct Simulator<'m, S: TraceSink> {
    map: &'m MemoryMap,
    pub lat: LatencyModel,
    mac_width: u32,
    banks_per_channel: u32,
    banks: Vec<BankState>,
    channels: Vec<ChannelState>,
    now: u64,
    instr_base: u32,
    plan: WorkPlan,
    cursors: Vec<Cursor>,
    pub sink: S,
}

impl<'m, S: TraceSink> Simulator<'m, S> {
    pub fn new(cfg: &SystemConfig, map: &'m MemoryMap, sink: S) -> Self {
        let lat = LatencyModel::new(cfg);
        let g = &cfg.geometry;
        Self {
            map,
            mac_width: cfg.pim.mac_width,
            banks_per_channel: g.banks_per_channel,
            banks: vec![BankState::default(); g.total_banks() as usize],
            channels: vec![ChannelState { deadline: lat.t_refi }; g.channels as usize],
            now: 0,
            instr_base: 0,
            plan: WorkPlan::default(),
            cursors: Vec::new(),
            lat,
            sink,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn bank(&self, gi: u32) -> &BankState {
        &self.banks[gi as usize]
    }

    fn refresh(&mut self, ch: u32) {
        let bpc = self.banks_per_channel;
        let lat = &self.lat;
        let mut at = self.channels[ch as usize].deadline;
        for gi in ch * bpc..(ch + 1) * bpc {
            let b = &mut self.banks[gi as usize];
            if let Some(p) = b.precharge_now(lat) {
                self.sink.event(&Event::Pre { bank: gi, at: p });
            }
            at = at.max(b.act_ready).max(b.refresh_end);
        }
        self.sink.event(&Event::Ref { channel: ch, at });
        for gi in ch * bpc..(ch + 1) * bpc {
            let b = &mut self.banks[gi as usize];
            b.refresh_end = at + lat.t_rfc;
            b.next_time = b.next_time.max(b.refresh_end);
        }
        self.channels[ch as usize].deadline += lat.t_refi;
    }

    fn catch_up(&mut self, ch: u32, t: u64) {
        while self.channels[ch as usize].deadline <= t {
            self.refresh(ch);
        }
    }

    /// Executes the bank work in `self.plan` from `t0`. Returns the latest column
    /// completion (or precharge for writes) and the refresh delay on that bank.
    fn run_plan(&mut self, t0: u64) -> (u64, u64) {
        let bpc = self.banks_per_channel;
        self.cursors.clear();
        for &(gi, start, end) in &self.plan.banks {
            self.cursors.push(Cursor { gi, end, run: start, row: 0, last: t0, delay: 0 });
        }
        let mut i = 0;
        while i < self.cursors.len() {
            let ch = self.cursors[i].gi / bpc;
            let mut j = i;
            while j < self.cursors.len() && self.cursors[j].gi / bpc == ch {
                j += 1;
            }
            self.catch_up(ch, t0);
            loop {
                let deadline = self.channels[ch as usize].deadline;
                let mut paused = false;
                for c in &mut self.cursors[i..j] {
                    let bank = &mut self.banks[c.gi as usize];
                    while c.run < c.end {
                        let run = &self.plan.runs[c.run];
                        let (ev, step, delay) = bank.exec_rows(c.gi, run, c.row, t0, deadline, &self.lat);
                        c.delay += delay;
                        if let Some(ev) = ev {
                            self.sink.event(&Event::Rows(ev));
                        }
                        match step {
                            RunStep::Done { end, closed } => {
                                c.last = c.last.max(end).max(closed.unwrap_or(0));
                                c.run += 1;
                                c.row = 0;
                            }
                            RunStep::Paused { next_row, .. } => {
                                c.row = next_row;
                                paused = true;
                                break;
                            }
                        }
                    }
                }
                if !paused {
                    break;
                }
                self.refresh(ch);
            }
            i = j;
        }
        self.cursors.iter().map(|c| (c.last, c.delay)).max().unwrap_or((t0, 0))
    }

    fn emit_instr(&mut self, first: usize, count: usize, stage: Stage, start: u64, end: u64, split: [(Category, u64); 2]) {
        self.sink.event(&Event::Instr { first: self.instr_base + first as u32, count: count as u32, stage, start, end, split });
    }

    fn pim_split(main: Category, dur: u64, delay: u64) -> [(Category, u64); 2] {
        let r = delay.min(dur);
        [(main, dur - r), (Category::Refresh, r)]
    }

    fn asic_duration(&self, ins: &Instruction) -> (u64, OpCensus) {
        match ins.opcode {
            Opcode::Asic { kind, elements, groups, adds, .. } => {
                let c = asic_census(kind, elements, groups, adds);
                (self.lat.asic_cycles_to_ps(self.lat.asic_cycles(c)), c)
            }
            _ => unreachable!("ASIC instruction expected"),
        }
    }

    fn emit_asic(&mut self, ins: &Instruction, at: u64, duration: u64, c: OpCensus) {
        let kind = match ins.opcode {
            Opcode::Asic { kind, .. } => kind,
            _ => AsicKind::Residual,
        };
        self.sink.event(&Event::Asic { kind, at, duration, multiplies: c.multiplies, adds: c.adds });
    }

    /// Simulates one stream, continuing from the current clock.
    pub fn run_stream(&mut self, stream: &InstructionStream) -> Result<(), SimError> {
        let ins = &stream.instructions;
        let mut i = 0;
        while i < ins.len() {
            let t0 = self.now;
            let cur = &ins[i];
            if let Some(bundle) = cur.bundle {
                let mut j = i;
                let (mut end, mut delay) = (t0, 0);
                let mut elements = 0;
                while j < ins.len() && ins[j].bundle == Some(bundle) {
                    plan_instruction(&ins[j], self.map, self.mac_width, &mut self.plan);
                    elements += if matches!(ins[j].opcode, Opcode::Mac { .. }) { self.plan.elements } else { 0 };
                    let (mut e, d) = self.run_plan(t0);
                    if matches!(ins[j].opcode, Opcode::Mac { .. }) && !self.plan.banks.is_empty() {
                        e += self.lat.mac_drain;
                    }
                    if (e, d) > (end, delay) {
                        end = e;
                        delay = d;
                    }
                    j += 1;
                }
                let main = if matches!(cur.opcode, Opcode::Mac { .. }) { Category::Vmm } else { Category::Transfer };
                if elements > 0 {
                    self.sink.event(&Event::Operands { elements });
                }
                self.emit_instr(i, j - i, cur.stage, t0, end, Self::pim_split(main, end - t0, delay));
                self.now = end;
                i = j;
            } else {
                match &cur.opcode {
                    Opcode::Broadcast { len, .. } => {
                        let bytes = *len as u64 * 2;
                        let d = self.lat.transfer(bytes);
                        self.sink.event(&Event::Transfer { kind: TransferKind::Broadcast, at: t0, duration: d, bytes });
                        self.emit_instr(i, 1, cur.stage, t0, t0 + d, [(Category::Transfer, d), (Category::Refresh, 0)]);
                        self.now = t0 + d;
                        i += 1;
                    }
                    Opcode::Collect { elements, channels, .. } => {
                        let bytes = *elements as u64 * 2;
                        let t = self.lat.transfer(bytes);
                        self.sink.event(&Event::Transfer { kind: TransferKind::Collect, at: t0, duration: t, bytes });
                        let mut j = i + 1;
                        if cur.fused {
                            while j < ins.len() && ins[j].target == crate::compiler::Target::Asic {
                                j += 1;
                            }
                        }
                        if j == i + 1 {
                            self.emit_instr(i, 1, cur.stage, t0, t0 + t, [(Category::Transfer, t), (Category::Refresh, 0)]);
                            self.now = t0 + t;
                        } else {
                            self.fused(ins, i, j, t, (*channels).max(1) as u64);
                        }
                        i = j;
                    }
                    Opcode::KvWrite { kind, layer, src, .. } => {
                        let len = match kind {
                            KvKind::Key => self.map.reservation(*layer, *kind).map_or(0, |r| r.slot_len),
                            KvKind::Value => stream.graph.nodes[*src as usize].output_len,
                        };
                        let bytes = len as u64 * 2;
                        let t = self.lat.transfer(bytes);
                        self.sink.event(&Event::Transfer { kind: TransferKind::KvWrite, at: t0, duration: t, bytes });
                        plan_instruction(cur, self.map, self.mac_width, &mut self.plan);
                        let (end, delay) = self.run_plan(t0 + t);
                        let end = end.max(t0 + t);
                        self.emit_instr(i, 1, cur.stage, t0, end, Self::pim_split(Category::KvWrite, end - t0, delay));
                        self.now = end;
                        i += 1;
                    }
                    Opcode::Asic { .. } => {
                        let (d, c) = self.asic_duration(cur);
                        self.emit_asic(cur, t0, d, c);
                        self.emit_instr(i, 1, cur.stage, t0, t0 + d, [(Category::AsicArith, d), (Category::Refresh, 0)]);
                        self.now = t0 + d;
                        i += 1;
                    }
                    Opcode::Mac { .. } | Opcode::RowRead { .. } => {
                        unreachable!("PIM reads are always bundled")
                    }
                }
            }
            if let Some(v) = self.sink.violation() {
                return Err(SimError::Constraint(v.clone()));
            }
        }
        self.instr_base += ins.len() as u32;
        Ok(())
    }

    /// Collect at `i` overlapped with ASIC instructions `i+1..j`, pipelined over `k` chunks.
    fn fused(&mut self, ins: &[Instruction], i: usize, j: usize, t: u64, k: u64) {
        let t0 = self.now;
        let durs: Vec<(u64, OpCensus)> = ins[i + 1..j].iter().map(|x| self.asic_duration(x)).collect();
        let a: u64 = durs.iter().map(|d| d.0).sum();
        let asic_led = t.div_ceil(k) + a;
        let bus_led = t + a.div_ceil(k);
        let (t_exp, a_exp) = if asic_led >= bus_led { (t.div_ceil(k), a) } else { (t, a.div_ceil(k)) };
        self.emit_instr(i, 1, ins[i].stage, t0, t0 + t_exp, [(Category::Transfer, t_exp), (Category::Refresh, 0)]);
        let mut at = t0 + t.div_ceil(k);
        let mut clock = t0 + t_exp;
        let mut given = 0;
        for (m, &(d, c)) in durs.iter().enumerate() {
            self.emit_asic(&ins[i + 1 + m], at, d, c);
            at += d;
            let share = if m + 1 == durs.len() { a_exp - given } else { (a_exp as u128 * d as u128 / a.max(1) as u128) as u64 };
            given += share;
            self.emit_instr(i + 1 + m, 1, ins[i + 1 + m].stage, clock, clock + share, [(Category::AsicArith, share), (Category::Refresh, 0)]);
            clock += share;
        }
        self.now = t0 + t_exp + a_exp;
    }

    /// Serves refresh intervals elapsed by the final clock and returns it.
    pub fn finish(&mut self) -> u64 {
        for ch in 0..self.channels.len() as u32 {
            self.catch_up(ch, self.now);
        }
        self.now
    }
}

/// Simulates `stream` from time zero and records every event.
pub fn simulate(stream: &InstructionStream, map: &MemoryMap, cfg: &SystemConfig) -> Result<SimTrace, SimError> {
    let mut sim = Simulator::new(cfg, map, (Recorder::default(), TimingChecker::new(cfg)));
    sim.run_stream(stream)?;
    let final_time = sim.finish();
    let (rec, mut checker) = sim.sink;
    checker.finish(final_time);
    if let Some(v) = checker.violations.first() {
        return Err(SimError::Constraint(v.clone()));
    }
    Ok(SimTrace { events: rec.events, final_time })
}

/// Duration of one ASIC operation in picoseconds.
pub fn asic_compute(kind: AsicKind, elements: u32, cfg: &SystemConfig) -> u64 {
    LatencyModel::new(cfg).asic_compute(kind, elements, 1, 0)
}

/// Bus time for `bytes` in picoseconds.
pub fn transfer(bytes: u64, cfg: &SystemConfig) -> u64 {
    LatencyModel::new(cfg).transfer(bytes)
}
