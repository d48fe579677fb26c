//! Per-bank work of a PIM instruction, expressed as runs of DRAM rows.

use super::{Instruction, Opcode, RowSelect};
use super::graph::VmmOperand;
use crate::mapper::{KvKind, MemoryMap};
use serde::{Deserialize, Serialize};

/// Elements per write or plain-read column command (32-byte burst).
pub const IO_COLUMN_ELEMENTS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColOp {
    Mac,
    Read,
    Write,
}

/// `rows` DRAM rows starting at `first_row`, `row_stride` apart. The first row gets
/// `cols_first` column commands, the last `cols_last`, the others `cols_mid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRun {
    pub first_row: u32,
    pub row_stride: u32,
    pub rows: u32,
    pub cols_first: u32,
    pub cols_mid: u32,
    pub cols_last: u32,
    pub op: ColOp,
}

impl RowRun {
    pub fn row(&self, i: u32) -> u32 {
        self.first_row + i * self.row_stride
    }

    pub fn cols(&self, i: u32) -> u32 {
        if i == 0 {
            self.cols_first
        } else if i + 1 == self.rows {
            self.cols_last
        } else {
            self.cols_mid
        }
    }

    pub fn last_row(&self) -> u32 {
        self.row(self.rows - 1)
    }

    pub fn total_cols(&self) -> u64 {
        match self.rows {
            0 => 0,
            1 => self.cols_first as u64,
            n => self.cols_first as u64 + self.cols_last as u64 + (n as u64 - 2) * self.cols_mid as u64,
        }
    }
}

/// Reusable buffer of per-bank runs for one instruction.
#[derive(Debug, Default, Clone)]
pub struct WorkPlan {
    /// (global bank index, start, end) into `runs`; banks appear once, ascending.
    pub banks: Vec<(u32, usize, usize)>,
    pub runs: Vec<RowRun>,
    /// Operand elements touched.
    pub elements: u64,
    cur: Option<u32>,
}

impl WorkPlan {
    pub fn clear(&mut self) {
        self.banks.clear();
        self.runs.clear();
        self.elements = 0;
        self.cur = None;
    }

    fn open_bank(&mut self, gi: u32) {
        if self.cur == Some(gi) {
            return;
        }
        self.cur = Some(gi);
        let n = self.runs.len();
        self.banks.push((gi, n, n));
    }

    fn push(&mut self, run: RowRun) {
        self.runs.push(run);
        self.banks.last_mut().expect("bank opened").2 = self.runs.len();
    }

    pub fn bank_runs(&self) -> impl Iterator<Item = (u32, &[RowRun])> {
        self.banks.iter().map(move |&(gi, a, b)| (gi, &self.runs[a..b]))
    }

    fn finish(&mut self) {
        self.banks.sort_by_key(|b| b.0);
        debug_assert!(self.banks.windows(2).all(|w| w[0].0 < w[1].0), "bank listed twice");
    }
}

fn ncols(o0: u64, o1: u64, width: u64) -> u32 {
    (o1.div_ceil(width) - o0 / width) as u32
}

struct Emitter<'a> {
    plan: &'a mut WorkPlan,
    cap: u64,
}

impl Emitter<'_> {
    fn contiguous(&mut self, a: u64, len: u32, width: u32, op: ColOp) {
        let (cap, w) = (self.cap, width as u64);
        let end = a + len as u64;
        let r0 = a / cap;
        let r1 = (end - 1) / cap;
        if r0 == r1 {
            let c = ncols(a % cap, a % cap + len as u64, w);
            // Packed slots sharing a row fold into the previous run.
            if let Some(prev) = self.plan.runs.last_mut() {
                let same_bank = self.plan.banks.last().is_some_and(|b| b.2 > b.1);
                if same_bank && prev.rows == 1 && prev.first_row as u64 == r0 && prev.op == op {
                    prev.cols_first += c;
                    prev.cols_last = prev.cols_first;
                    prev.cols_mid = prev.cols_first;
                    return;
                }
            }
            self.plan.push(RowRun { first_row: r0 as u32, row_stride: 1, rows: 1, cols_first: c, cols_mid: c, cols_last: c, op });
        } else {
            self.plan.push(RowRun {
                first_row: r0 as u32,
                row_stride: 1,
                rows: (r1 - r0 + 1) as u32,
                cols_first: ncols(a % cap, cap, w),
                cols_mid: (cap / w) as u32,
                cols_last: ncols(0, (end - 1) % cap + 1, w),
                op,
            });
        }
    }

    /// `count` ranges of `len` elements starting at `start`, `stride` apart.
    fn strided(&mut self, start: u64, len: u32, stride: u64, count: u32, width: u32, op: ColOp) {
        if count == 0 || len == 0 {
            return;
        }
        self.plan.elements += len as u64 * count as u64;
        let cap = self.cap;
        let off = start % cap;
        if count > 1 && stride.is_multiple_of(cap) && off + len as u64 <= cap {
            let c = ncols(off, off + len as u64, width as u64);
            self.plan.push(RowRun {
                first_row: (start / cap) as u32,
                row_stride: (stride / cap) as u32,
                rows: count,
                cols_first: c,
                cols_mid: c,
                cols_last: c,
                op,
            });
            return;
        }
        for i in 0..count as u64 {
            self.contiguous(start + i * stride, len, width, op);
        }
    }
}

/// Fills `plan` with the bank work of `instr`. Non-PIM instructions leave it empty.
pub fn plan_instruction(instr: &Instruction, map: &MemoryMap, mac_width: u32, plan: &mut WorkPlan) {
    plan.clear();
    let mut em = Emitter { plan, cap: map.row_capacity as u64 };
    let nb = map.total_banks();
    let seg = map.segment_len;
    match &instr.opcode {
        Opcode::Mac { channel, operand, round, tokens, .. } => match *operand {
            VmmOperand::Weight(id) => {
                let p = map.placement(id).expect("compiled against map");
                let bpc = map.banks_per_channel;
                for b in p.round_blocks(*round) {
                    if b.bank_index / bpc != *channel {
                        continue;
                    }
                    em.plan.open_bank(b.bank_index);
                    em.strided(b.base, b.element_count() as u32, 0, 1, mac_width, ColOp::Mac);
                }
            }
            VmmOperand::Keys { layer } => {
                let res = map.reservation(layer, KvKind::Key).expect("reserved");
                let c0 = round * seg;
                let c1 = (c0 + seg).min(res.slot_len);
                for n in (*channel..nb).step_by(map.channels as usize) {
                    let count = slots_below(n, *tokens, nb);
                    if count == 0 {
                        continue;
                    }
                    em.plan.open_bank(map.kv_bank_index(n));
                    em.strided(res.base_linear[n as usize] + c0 as u64, c1 - c0, res.slot_stride, count, mac_width, ColOp::Mac);
                }
            }
            VmmOperand::Values { layer } => {
                let res = map.reservation(layer, KvKind::Value).expect("reserved");
                let heads = instr_heads(instr);
                let d = res.slot_count;
                let dh = d / heads;
                let t = *tokens;
                let s0 = round * seg;
                let s1 = (s0 + seg).min(heads * t);
                for n in (*channel..nb).step_by(map.channels as usize) {
                    if n >= d {
                        continue;
                    }
                    let mut opened = false;
                    for h in s0 / t..s1.div_ceil(t) {
                        let t0 = s0.max(h * t) - h * t;
                        let t1 = s1.min((h + 1) * t) - h * t;
                        let k_lo = (h * dh).saturating_sub(n).div_ceil(nb);
                        let k_hi = ((h + 1) * dh).saturating_sub(n).div_ceil(nb);
                        if k_hi <= k_lo {
                            continue;
                        }
                        if !opened {
                            em.plan.open_bank(map.kv_bank_index(n));
                            opened = true;
                        }
                        let start = res.base_linear[n as usize] + k_lo as u64 * res.slot_stride + t0 as u64;
                        em.strided(start, t1 - t0, res.slot_stride, k_hi - k_lo, mac_width, ColOp::Mac);
                    }
                }
            }
        },
        Opcode::KvWrite { kind, layer, token, .. } => {
            let res = map.reservation(*layer, *kind).expect("reserved");
            match kind {
                KvKind::Key => {
                    let n = token % nb;
                    em.plan.open_bank(map.kv_bank_index(n));
                    let start = res.base_linear[n as usize] + (token / nb) as u64 * res.slot_stride;
                    em.strided(start, res.slot_len, 0, 1, IO_COLUMN_ELEMENTS, ColOp::Write);
                }
                KvKind::Value => {
                    for n in 0..nb.min(res.slot_count) {
                        em.plan.open_bank(map.kv_bank_index(n));
                        let start = res.base_linear[n as usize] + *token as u64;
                        em.strided(start, 1, res.slot_stride, res.slots_in_bank(n), IO_COLUMN_ELEMENTS, ColOp::Write);
                    }
                }
            }
        }
        Opcode::RowRead { role, row, .. } => {
            let p = map.placement(crate::mapper::MatrixId { layer: None, role: *role }).expect("table mapped");
            let r = match row {
                RowSelect::Token { hint } => *hint % p.rows,
                RowSelect::Position(pos) => *pos % p.rows,
            };
            for round in 0..p.rounds {
                let b = p.block_for_row(round, r);
                em.plan.open_bank(b.bank_index);
                let start = b.base + (r - b.rows.start) as u64 * b.width() as u64;
                em.strided(start, b.width(), 0, 1, IO_COLUMN_ELEMENTS, ColOp::Read);
            }
        }
        _ => {}
    }
    plan.finish();
}

fn instr_heads(instr: &Instruction) -> u32 {
    match instr.opcode {
        Opcode::Mac { heads, .. } => heads,
        _ => 1,
    }
}

/// Slots of KV bank `n` holding tokens below `tokens`.
pub fn slots_below(n: u32, tokens: u32, nb: u32) -> u32 {
    if n >= tokens {
        0
    } else {
        (tokens - n).div_ceil(nb)
    }
}
