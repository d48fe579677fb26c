//! Post-hoc timing checker. Re-verifies every constraint from the event stream alone.

use super::latency::LatencyModel;
use super::trace::{Event, RowCycle, TraceSink};
use super::Violation;
use crate::compiler::ColOp;
use crate::config::SystemConfig;

#[derive(Debug, Clone, Default)]
struct BankView {
    open: Option<u32>,
    act: u64,
    col: Option<(u64, ColOp)>,
    pre: Option<u64>,
    ref_end: u64,
}

#[derive(Debug, Clone)]
pub struct TimingChecker {
    t_rcd: u64,
    t_rp: u64,
    t_ccd: u64,
    t_wr: u64,
    t_rfc: u64,
    t_refi: u64,
    t_ras: u64,
    banks_per_channel: u32,
    banks: Vec<BankView>,
    refs: Vec<u64>,
    last_ref: Vec<Option<u64>>,
    pub violations: Vec<Violation>,
    pub checked_rows: u64,
}

impl TimingChecker {
    pub fn new(cfg: &SystemConfig) -> Self {
        let l = LatencyModel::new(cfg);
        let g = &cfg.geometry;
        Self {
            t_rcd: l.t_rcd,
            t_rp: l.t_rp,
            t_ccd: l.t_ccd,
            t_wr: l.t_wr,
            t_rfc: l.t_rfc,
            t_refi: l.t_refi,
            t_ras: l.t_ras,
            banks_per_channel: g.banks_per_channel,
            banks: vec![BankView::default(); g.total_banks() as usize],
            refs: vec![0; g.channels as usize],
            last_ref: vec![None; g.channels as usize],
            violations: Vec::new(),
            checked_rows: 0,
        }
    }

    fn require(&mut self, ok: bool, constraint: &'static str, clock: u64, bank: Option<u32>, detail: impl FnOnce() -> String) {
        if !ok {
            self.violations.push(Violation { constraint, clock, bank, detail: detail() });
        }
    }

    fn deadline(&self, bank: u32) -> u64 {
        (self.refs[(bank / self.banks_per_channel) as usize] + 1) * self.t_refi
    }

    fn check_act(&mut self, bank: u32, at: u64) {
        let v = &self.banks[bank as usize];
        let (pre, ref_end, open) = (v.pre, v.ref_end, v.open);
        let dl = self.deadline(bank);
        self.require(open.is_none(), "state", at, Some(bank), || format!("ACT while row {open:?} open"));
        if let Some(p) = pre {
            self.require(at >= p + self.t_rp, "tRP", at, Some(bank), || format!("ACT {at} after PRE {p}"));
        }
        self.require(at >= ref_end, "tRFC", at, Some(bank), || format!("ACT {at} during refresh ending {ref_end}"));
        self.require(at < dl, "tREFI", at, Some(bank), || format!("ACT {at} past unserved refresh deadline {dl}"));
    }

    /// PRE at `at` of a row opened at `act` whose last column was `col`.
    fn check_pre(&mut self, bank: u32, at: u64, act: u64, col: Option<(u64, ColOp)>) {
        self.require(at >= act + self.t_ras, "tRAS", at, Some(bank), || format!("PRE {at}, ACT {act}"));
        if let Some((c, op)) = col {
            if op == ColOp::Write {
                self.require(at >= c + self.t_wr, "tWR", at, Some(bank), || format!("PRE {at}, WR {c}"));
            }
            self.require(at >= c + self.t_ccd, "tCCD", at, Some(bank), || format!("PRE {at}, column {c}"));
        }
    }

    fn rows(&mut self, r: &RowCycle) {
        let b = r.bank;
        self.checked_rows += r.rows as u64;
        self.require(r.col_step >= self.t_ccd, "tCCD", r.col0, Some(b), || format!("column step {}", r.col_step));
        if let Some(p) = r.pre_before {
            let v = self.banks[b as usize].clone();
            self.require(v.open.is_some(), "state", p, Some(b), || "PRE with no open row".into());
            self.check_pre(b, p, v.act, v.col);
            let v = &mut self.banks[b as usize];
            v.open = None;
            v.pre = Some(p);
        }
        let a0 = match r.act0 {
            Some(a) => {
                self.check_act(b, a);
                self.require(r.col0 >= a + self.t_rcd, "tRCD", r.col0, Some(b), || format!("column {} after ACT {a}", r.col0));
                a
            }
            None => {
                let v = self.banks[b as usize].clone();
                self.require(v.open == Some(r.first_row), "state", r.col0, Some(b), || format!("hit on row {} but open {:?}", r.first_row, v.open));
                self.require(r.col0 >= v.act + self.t_rcd, "tRCD", r.col0, Some(b), || format!("column {} after ACT {}", r.col0, v.act));
                if let Some((c, _)) = v.col {
                    self.require(r.col0 >= c + self.t_ccd, "tCCD", r.col0, Some(b), || format!("column {} after {c}", r.col0));
                }
                v.act
            }
        };
        let gap = |op: ColOp, s: &Self| if op == ColOp::Write { s.t_wr.max(s.t_ccd) } else { s.t_ccd };
        let end_gap = gap(r.op, self);
        let l0 = r.last_col(0);
        if r.rows > 1 {
            self.require(r.act1 >= r.pre_lead, "state", r.act1, Some(b), || "ACT before time zero".into());
            let pre0 = r.act1 - r.pre_lead;
            self.check_pre(b, pre0, a0, Some((l0, r.op)));
            self.require(r.pre_lead >= self.t_rp, "tRP", r.act1, Some(b), || format!("PRE-to-ACT {}", r.pre_lead));
            self.require(r.rcd >= self.t_rcd, "tRCD", r.act1 + r.rcd, Some(b), || format!("ACT-to-column {}", r.rcd));
            if r.rows > 2 {
                let hold = r.period.saturating_sub(r.pre_lead);
                let busy = r.rcd + (r.cols[1] as u64 - 1) * r.col_step + end_gap;
                self.require(r.period >= r.pre_lead && hold >= self.t_ras, "tRAS", r.act1, Some(b), || format!("row held {hold}"));
                let c = if r.op == ColOp::Write { "tWR" } else { "tCCD" };
                self.require(hold >= busy, c, r.act1, Some(b), || format!("row held {hold}, columns need {busy}"));
            }
            let v = &mut self.banks[b as usize];
            v.open = None;
            v.pre = Some(pre0);
            let a1 = r.act1;
            self.check_act(b, a1);
            let a_last = r.act(r.rows - 1).expect("rows after the first activate");
            let dl = self.deadline(b);
            self.require(a_last < dl, "tREFI", a_last, Some(b), || format!("ACT {a_last} past unserved refresh deadline {dl}"));
        }
        let a_last = r.act(r.rows - 1).unwrap_or(a0);
        let l_last = r.last_col(r.rows - 1);
        let v = &mut self.banks[b as usize];
        v.open = Some(r.first_row + (r.rows - 1) * r.row_stride);
        v.act = a_last;
        v.col = Some((l_last, r.op));
        if let Some(p) = r.last_pre {
            self.check_pre(b, p, a_last, Some((l_last, r.op)));
            let v = &mut self.banks[b as usize];
            v.open = None;
            v.pre = Some(p);
        }
    }

    fn refresh(&mut self, channel: u32, at: u64) {
        let bpc = self.banks_per_channel;
        for b in channel * bpc..(channel + 1) * bpc {
            let v = self.banks[b as usize].clone();
            self.require(v.open.is_none(), "tRP", at, Some(b), || format!("REF with row {:?} open", v.open));
            if let Some(p) = v.pre {
                self.require(at >= p + self.t_rp, "tRP", at, Some(b), || format!("REF {at} after PRE {p}"));
            }
            self.require(at >= v.ref_end, "tRFC", at, Some(b), || format!("REF {at} during refresh ending {}", v.ref_end));
        }
        let ch = channel as usize;
        let due = (self.refs[ch] + 1) * self.t_refi;
        self.require(at >= due && at - due <= self.t_refi, "tREFI", at, None, || format!("REF {at} for deadline {due}"));
        self.refs[ch] += 1;
        self.last_ref[ch] = Some(at);
        for b in channel * bpc..(channel + 1) * bpc {
            self.banks[b as usize].ref_end = at + self.t_rfc;
        }
    }

    /// Closes the check: every elapsed refresh interval must have been served.
    pub fn finish(&mut self, final_time: u64) {
        let want = final_time / self.t_refi;
        for ch in 0..self.refs.len() {
            let got = self.refs[ch];
            self.require(got == want, "tREFI", final_time, None, || format!("channel {ch}: {got} refreshes, {want} intervals elapsed"));
        }
    }

    pub fn refresh_counts(&self) -> &[u64] {
        &self.refs
    }
}

impl TraceSink for TimingChecker {
    fn event(&mut self, e: &Event) {
        match e {
            Event::Rows(r) => self.rows(r),
            Event::Pre { bank, at } => {
                let v = self.banks[*bank as usize].clone();
                self.require(v.open.is_some(), "state", *at, Some(*bank), || "PRE with no open row".into());
                self.check_pre(*bank, *at, v.act, v.col);
                let v = &mut self.banks[*bank as usize];
                v.open = None;
                v.pre = Some(*at);
            }
            Event::Ref { channel, at } => self.refresh(*channel, *at),
            _ => {}
        }
    }

    fn violation(&self) -> Option<&Violation> {
        self.violations.first()
    }
}
