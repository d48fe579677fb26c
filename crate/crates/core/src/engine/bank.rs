//! Bank state machine: single-command legality and closed-form row runs.

use super::latency::LatencyModel;
use super::trace::RowCycle;
use super::Violation;
use crate::compiler::{ColOp, CommandKind, RowRun};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BankPhase {
    Idle,
    Process,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankState {
    pub open_row: Option<u32>,
    pub last_act: u64,
    pub last_col: Option<u64>,
    pub last_op: ColOp,
    /// Earliest ACT after the last precharge.
    pub act_ready: u64,
    /// End of the last refresh.
    pub refresh_end: u64,
    /// Completion of the last issued command.
    pub next_time: u64,
}

impl Default for BankState {
    fn default() -> Self {
        Self { open_row: None, last_act: 0, last_col: None, last_op: ColOp::Read, act_ready: 0, refresh_end: 0, next_time: 0 }
    }
}

/// Outcome of running part of a row run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStep {
    /// Run finished; last column completes at `end`, auto-precharge (if any) at `closed`.
    Done { end: u64, closed: Option<u64> },
    /// The next row would activate at or after the refresh deadline.
    Paused { next_row: u32, natural_act: u64 },
}

impl BankState {
    pub fn phase(&self, clock: u64) -> BankPhase {
        if clock < self.next_time {
            BankPhase::Process
        } else {
            BankPhase::Idle
        }
    }

    fn col_gap(&self, lat: &LatencyModel) -> u64 {
        if self.last_op == ColOp::Write {
            lat.t_wr
        } else {
            lat.t_ccd
        }
    }

    /// Earliest legal precharge of the open row.
    pub fn pre_ready(&self, lat: &LatencyModel) -> u64 {
        let mut t = self.last_act + lat.t_ras;
        if let Some(c) = self.last_col {
            t = t.max(c + self.col_gap(lat));
        }
        t
    }

    /// Earliest legal issue time of `cmd` at or after `clock`.
    pub fn earliest(&self, cmd: CommandKind, clock: u64, lat: &LatencyModel) -> u64 {
        match cmd {
            CommandKind::Act { .. } => clock.max(self.act_ready).max(self.refresh_end),
            CommandKind::Col { .. } => {
                let mut t = clock.max(self.last_act + lat.t_rcd);
                if let Some(c) = self.last_col {
                    t = t.max(c + lat.t_ccd);
                }
                t
            }
            CommandKind::Pre => clock.max(self.pre_ready(lat)),
        }
    }

    /// Issues one command at `clock`, returning its completion time.
    pub fn issue_command(&mut self, bank: u32, cmd: CommandKind, clock: u64, lat: &LatencyModel) -> Result<u64, Violation> {
        let fail = |constraint: &'static str, detail: String| Err(Violation { constraint, clock, bank: Some(bank), detail });
        match cmd {
            CommandKind::Act { row } => {
                if let Some(open) = self.open_row {
                    return fail("state", format!("ACT row {row} while row {open} open"));
                }
                if clock < self.act_ready {
                    return fail("tRP", format!("ACT at {clock} before {}", self.act_ready));
                }
                if clock < self.refresh_end {
                    return fail("tRFC", format!("ACT at {clock} before refresh end {}", self.refresh_end));
                }
                self.open_row = Some(row);
                self.last_act = clock;
                self.last_col = None;
                self.next_time = clock + lat.t_rcd;
            }
            CommandKind::Col { op, row } => {
                if self.open_row != Some(row) {
                    return fail("state", format!("column on row {row}, open {:?}", self.open_row));
                }
                if clock < self.last_act + lat.t_rcd {
                    return fail("tRCD", format!("column at {clock}, ACT at {}", self.last_act));
                }
                if let Some(c) = self.last_col {
                    if clock < c + lat.t_ccd {
                        return fail("tCCD", format!("column at {clock}, previous at {c}"));
                    }
                }
                self.last_col = Some(clock);
                self.last_op = op;
                self.next_time = clock + lat.t_ccd;
            }
            CommandKind::Pre => {
                if self.open_row.is_none() {
                    return fail("state", "PRE with no open row".into());
                }
                if clock < self.last_act + lat.t_ras {
                    return fail("tRAS", format!("PRE at {clock}, ACT at {}", self.last_act));
                }
                if let Some(c) = self.last_col {
                    if self.last_op == ColOp::Write && clock < c + lat.t_wr {
                        return fail("tWR", format!("PRE at {clock}, WR at {c}"));
                    }
                    if clock < c + lat.t_ccd {
                        return fail("tCCD", format!("PRE at {clock}, column at {c}"));
                    }
                }
                self.open_row = None;
                self.act_ready = clock + lat.t_rp;
                self.next_time = self.act_ready;
            }
        }
        Ok(self.next_time)
    }

    /// Closes the open row at its earliest legal time and returns that time.
    pub fn precharge_now(&mut self, lat: &LatencyModel) -> Option<u64> {
        self.open_row?;
        let p = self.pre_ready(lat);
        self.open_row = None;
        self.act_ready = p + lat.t_rp;
        Some(p)
    }

    /// Runs rows `from..` of `run`, no command earlier than `t0`, stopping before any
    /// ACT at or after `deadline`. Returns the emitted cycle (if any row ran) and
    /// the refresh-induced delay of the first ACT.
    pub fn exec_rows(
        &mut self,
        bank: u32,
        run: &RowRun,
        from: u32,
        t0: u64,
        deadline: u64,
        lat: &LatencyModel,
    ) -> (Option<RowCycle>, RunStep, u64) {
        let op = run.op;
        let end_gap = if op == ColOp::Write { lat.t_wr } else { lat.t_ccd };
        let row0 = run.row(from);
        let c0 = run.cols(from);
        let mut delay = 0;
        let (pre_before, act0, col0, a_row0) = if self.open_row == Some(row0) {
            let mut c = t0.max(self.last_act + lat.t_rcd);
            if let Some(l) = self.last_col {
                c = c.max(l + lat.t_ccd);
            }
            (None, None, c, self.last_act)
        } else {
            let (pre, ready) = match self.open_row {
                Some(_) => {
                    let p = t0.max(self.pre_ready(lat));
                    (Some(p), p + lat.t_rp)
                }
                None => (None, self.act_ready),
            };
            let natural = t0.max(ready);
            let a = natural.max(self.refresh_end);
            if a >= deadline {
                return (None, RunStep::Paused { next_row: from, natural_act: natural }, 0);
            }
            delay = a - natural;
            (pre, Some(a), a + lat.t_rcd, a)
        };
        let left = run.rows - from;
        let l0 = col0 + (c0 as u64 - 1) * lat.t_ccd;
        let mut ev = RowCycle {
            bank,
            op,
            first_row: row0,
            row_stride: run.row_stride,
            rows: 1,
            cols: [c0, c0, c0],
            pre_before,
            act0,
            col0,
            act1: 0,
            period: 0,
            rcd: lat.t_rcd,
            col_step: lat.t_ccd,
            pre_lead: lat.t_rp,
            last_pre: None,
        };
        let (a_last, l_last, step_after) = if left == 1 {
            (a_row0, l0, None)
        } else {
            let pre0 = (a_row0 + lat.t_ras).max(l0 + end_gap);
            let act1 = pre0 + lat.t_rp;
            if act1 >= deadline {
                (a_row0, l0, Some((from + 1, act1)))
            } else {
                let cmid = run.cols_mid as u64;
                let period = lat.t_ras.max(lat.t_rcd + (cmid - 1) * lat.t_ccd + end_gap) + lat.t_rp;
                let fit = ((deadline - act1 - 1) / period + 1).min(left as u64 - 1) as u32;
                let a_last = act1 + (fit as u64 - 1) * period;
                let c_last = run.cols(from + fit);
                ev.rows = fit + 1;
                ev.cols = [c0, run.cols_mid, c_last];
                ev.act1 = act1;
                ev.period = period;
                let l_last = a_last + lat.t_rcd + (c_last as u64 - 1) * lat.t_ccd;
                let next = (fit + 1 < left).then(|| (from + fit + 1, a_last + period));
                (a_last, l_last, next)
            }
        };
        let last_row = run.row(from + ev.rows - 1);
        self.last_act = a_last;
        self.last_col = Some(l_last);
        self.last_op = op;
        self.open_row = Some(last_row);
        if ev.rows > 1 {
            self.act_ready = a_last;
        } else if let Some(p) = pre_before {
            self.act_ready = p + lat.t_rp;
        }
        let mut closed = None;
        if op == ColOp::Write {
            let p = (a_last + lat.t_ras).max(l_last + lat.t_wr);
            ev.last_pre = Some(p);
            self.open_row = None;
            self.act_ready = p + lat.t_rp;
            closed = Some(p);
        }
        self.next_time = if closed.is_some() { self.act_ready } else { l_last + lat.t_ccd };
        let step = match step_after {
            Some((next_row, natural_act)) => RunStep::Paused { next_row, natural_act },
            None => RunStep::Done { end: l_last + lat.t_ccd, closed },
        };
        (Some(ev), step, delay)
    }
}
