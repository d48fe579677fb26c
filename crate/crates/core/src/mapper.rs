//! Placement of weight matrices and KV-cache reservations onto PIM banks.

use crate::config::{DramGeometry, GptModelConfig, PimConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("capacity exceeded: channel {channel} bank {bank} needs {needed} elements, has {available}")]
    Capacity { channel: u32, bank: u32, needed: u64, available: u64 },
    #[error("unsupported geometry: {0}")]
    Geometry(String),
    #[error("KV overflow: token {token} >= capacity {capacity}")]
    KvOverflow { token: u32, capacity: u32 },
    #[error("no KV reservation for layer {0}")]
    MissingReservation(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BankAddress {
    pub channel: u32,
    pub bank: u32,
    pub row: u32,
    /// Element offset within the row.
    pub col: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixRole {
    #[serde(rename = "W_Q")]
    Q,
    #[serde(rename = "W_K")]
    K,
    #[serde(rename = "W_V")]
    V,
    #[serde(rename = "W_proj")]
    Proj,
    #[serde(rename = "W_ffn1")]
    Ffn1,
    #[serde(rename = "W_ffn2")]
    Ffn2,
    #[serde(rename = "W_embed_out")]
    EmbedOut,
    #[serde(rename = "W_pos")]
    PosEmbed,
}

impl MatrixRole {
    pub const LAYER_ROLES: [MatrixRole; 6] =
        [MatrixRole::Q, MatrixRole::K, MatrixRole::V, MatrixRole::Proj, MatrixRole::Ffn1, MatrixRole::Ffn2];

    pub fn name(self) -> &'static str {
        match self {
            MatrixRole::Q => "W_Q",
            MatrixRole::K => "W_K",
            MatrixRole::V => "W_V",
            MatrixRole::Proj => "W_proj",
            MatrixRole::Ffn1 => "W_ffn1",
            MatrixRole::Ffn2 => "W_ffn2",
            MatrixRole::EmbedOut => "W_embed_out",
            MatrixRole::PosEmbed => "W_pos",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatrixId {
    pub layer: Option<u32>,
    pub role: MatrixRole,
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}[L{}]", self.role.name(), l),
            None => write!(f, "{}", self.role.name()),
        }
    }
}

/// Output rows `rows` of input segment `cols`, stored contiguously in one bank:
/// element (r, c) lives at `base + (r - rows.start) * width + (c - cols.start)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub round: u32,
    /// Global bank index, channel-major.
    pub bank_index: u32,
    pub start: BankAddress,
    /// Linear element offset inside the bank.
    pub base: u64,
    pub rows: Range<u32>,
    pub cols: Range<u32>,
}

impl Block {
    pub fn width(&self) -> u32 {
        self.cols.end - self.cols.start
    }

    pub fn element_count(&self) -> u64 {
        (self.rows.end - self.rows.start) as u64 * self.width() as u64
    }
}

/// A contiguous run inside one DRAM row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: BankAddress,
    pub element_count: u32,
    pub source_row: u32,
    pub source_cols: Range<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixPlacement {
    pub id: MatrixId,
    /// Output dimension (matrix rows).
    pub rows: u32,
    /// Input dimension (matrix columns).
    pub cols: u32,
    pub segment_len: u32,
    pub rounds: u32,
    /// Heads concatenated per stored row.
    pub concat_heads: u32,
    /// Sorted by (round, bank_index).
    pub blocks: Vec<Block>,
}

impl MatrixPlacement {
    pub fn round_cols(&self, round: u32) -> Range<u32> {
        let s = round * self.segment_len;
        s..(s + self.segment_len).min(self.cols)
    }

    pub fn round_blocks(&self, round: u32) -> &[Block] {
        let lo = self.blocks.partition_point(|b| b.round < round);
        let hi = self.blocks.partition_point(|b| b.round <= round);
        &self.blocks[lo..hi]
    }

    /// Block holding output row `row` for `round`.
    pub fn block_for_row(&self, round: u32, row: u32) -> &Block {
        let blocks = self.round_blocks(round);
        let i = blocks.partition_point(|b| b.rows.end <= row);
        &blocks[i]
    }

    /// Row-bounded runs covering every element exactly once.
    pub fn segments<'a>(&'a self, row_capacity: u32, banks_per_channel: u32) -> impl Iterator<Item = Segment> + 'a {
        self.blocks.iter().flat_map(move |b| {
            let w = b.width();
            (b.rows.clone()).flat_map(move |r| {
                let start = b.base + (r - b.rows.start) as u64 * w as u64;
                split_runs(start, w, row_capacity).map(move |(addr, off, n)| Segment {
                    start: linear_to_address(b.bank_index, addr, row_capacity, banks_per_channel),
                    element_count: n,
                    source_row: r,
                    source_cols: b.cols.start + off..b.cols.start + off + n,
                })
            })
        })
    }
}

fn split_runs(start: u64, len: u32, cap: u32) -> impl Iterator<Item = (u64, u32, u32)> {
    let cap = cap as u64;
    let mut off = 0u32;
    std::iter::from_fn(move || {
        if off >= len {
            return None;
        }
        let a = start + off as u64;
        let n = ((cap - a % cap) as u32).min(len - off);
        let item = (a, off, n);
        off += n;
        Some(item)
    })
}

pub fn linear_to_address(bank_index: u32, addr: u64, row_capacity: u32, banks_per_channel: u32) -> BankAddress {
    BankAddress {
        channel: bank_index / banks_per_channel,
        bank: bank_index % banks_per_channel,
        row: (addr / row_capacity as u64) as u32,
        col: (addr % row_capacity as u64) as u32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvKind {
    Key,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvLayout {
    RowMajor,
    ColMajor,
}

/// Keys: token t lives in global bank (t mod NB) channel-first, slot t / NB.
/// Values: column c lives in global bank (c mod NB) channel-first, slot c / NB;
/// token t of that column is element t of the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvReservation {
    pub layer: u32,
    pub kind: KvKind,
    pub token_capacity: u32,
    pub layout: KvLayout,
    /// Elements per slot (d_model for keys, token_capacity for values).
    pub slot_len: u32,
    /// Distance between consecutive slots in a bank.
    pub slot_stride: u64,
    /// Number of slots (tokens for keys, columns for values).
    pub slot_count: u32,
    /// Region start per global bank index.
    pub base: Vec<BankAddress>,
    pub base_linear: Vec<u64>,
}

impl KvReservation {
    /// (global bank index, linear element offset) of slot `s`.
    pub fn slot_location(&self, s: u32) -> (u32, u64) {
        let nb = self.base_linear.len() as u32;
        let gi = s % nb;
        let k = s / nb;
        (gi, self.base_linear[gi as usize] + k as u64 * self.slot_stride)
    }

    pub fn slots_in_bank(&self, gi: u32) -> u32 {
        let nb = self.base_linear.len() as u32;
        if gi >= self.slot_count {
            0
        } else {
            (self.slot_count - gi).div_ceil(nb)
        }
    }

    pub fn region_len(&self, gi: u32) -> u64 {
        match self.slots_in_bank(gi) {
            0 => 0,
            n => (n - 1) as u64 * self.slot_stride + self.slot_len as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryMap {
    pub channels: u32,
    pub banks_per_channel: u32,
    pub row_capacity: u32,
    pub rows_per_bank: u32,
    pub segment_len: u32,
    pub placements: Vec<MatrixPlacement>,
    pub reservations: Vec<KvReservation>,
    /// Bytes allocated per global bank index.
    pub bytes_used_per_bank: Vec<u64>,
}

/// Channel-major global bank index to (channel, bank).
pub fn bank_of(gi: u32, channels: u32) -> (u32, u32) {
    (gi % channels, gi / channels)
}

impl MemoryMap {
    pub fn total_banks(&self) -> u32 {
        self.channels * self.banks_per_channel
    }

    pub fn bank_capacity(&self) -> u64 {
        self.row_capacity as u64 * self.rows_per_bank as u64
    }

    /// Global bank index used in blocks: channel * banks_per_channel + bank.
    pub fn bank_index(&self, channel: u32, bank: u32) -> u32 {
        channel * self.banks_per_channel + bank
    }

    pub fn address(&self, bank_index: u32, linear: u64) -> BankAddress {
        linear_to_address(bank_index, linear, self.row_capacity, self.banks_per_channel)
    }

    pub fn placement(&self, id: MatrixId) -> Option<&MatrixPlacement> {
        self.placements.iter().find(|p| p.id == id)
    }

    pub fn reservation(&self, layer: u32, kind: KvKind) -> Option<&KvReservation> {
        self.reservations.iter().find(|r| r.layer == layer && r.kind == kind)
    }

    /// KV banks are spread channel-first: the n-th KV bank is channel n mod C.
    pub fn kv_bank_index(&self, n: u32) -> u32 {
        let (ch, bank) = bank_of(n, self.channels);
        self.bank_index(ch, bank)
    }

    fn alloc(&mut self, gi: u32, elements: u64, align_row: bool) -> Result<u64, MapError> {
        let used = self.bytes_used_per_bank[gi as usize] / 2;
        let cap = self.row_capacity as u64;
        let start = if align_row { used.div_ceil(cap) * cap } else { used };
        let end = start + elements;
        if end > self.bank_capacity() {
            return Err(MapError::Capacity {
                channel: gi / self.banks_per_channel,
                bank: gi % self.banks_per_channel,
                needed: end,
                available: self.bank_capacity(),
            });
        }
        self.bytes_used_per_bank[gi as usize] = end * 2;
        Ok(start)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }
}

/// Fraction of element accesses hitting an open row when up to ⌊cap/ncol⌋ heads share a row.
pub fn max_row_hit(nhead: u32, ncol: u32, row_capacity: u32, ltoken: Option<u32>) -> Result<f64, MapError> {
    if nhead == 0 || ncol == 0 {
        return Err(MapError::Geometry("nhead and ncol must be >= 1".into()));
    }
    if ncol > row_capacity {
        return Err(MapError::Geometry(format!("ncol {ncol} exceeds row capacity {row_capacity}")));
    }
    let k = nhead.min(row_capacity / ncol);
    let reps = ltoken.unwrap_or(1).max(1) as f64;
    let accesses = nhead as f64 * ncol as f64 * reps;
    let acts = nhead.div_ceil(k) as f64 * reps;
    Ok(1.0 - acts / accesses)
}

/// Number of heads to concatenate per row, maximizing the row-hit score.
pub fn choose_concat(nhead: u32, ncol: u32, row_capacity: u32) -> Result<u32, MapError> {
    let kmax = nhead.min(row_capacity / ncol.max(1)).max(1);
    let mut best = (1, f64::MIN);
    for k in 1..=kmax {
        let s = max_row_hit(k, ncol, row_capacity, None)?;
        if s >= best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

fn empty_map(geom: &DramGeometry, segment_len: u32) -> MemoryMap {
    MemoryMap {
        channels: geom.channels,
        banks_per_channel: geom.banks_per_channel,
        row_capacity: geom.row_capacity(),
        rows_per_bank: geom.rows_per_bank(),
        segment_len,
        placements: Vec::new(),
        reservations: Vec::new(),
        bytes_used_per_bank: vec![0; geom.total_banks() as usize],
    }
}

/// Segment length: the largest vector a channel buffer holds, capped at one DRAM row.
pub fn segment_len(geom: &DramGeometry, pim: &PimConfig) -> u32 {
    geom.row_capacity().min(pim.gb_elements())
}

fn place_matrix(map: &mut MemoryMap, id: MatrixId, rows: u32, cols: u32, concat_heads: u32) -> Result<(), MapError> {
    let nb = map.total_banks();
    let seg = map.segment_len;
    let rounds = cols.div_ceil(seg);
    let mut blocks = Vec::new();
    for round in 0..rounds {
        let c0 = round * seg;
        let cr = c0..(c0 + seg).min(cols);
        let w = cr.end - cr.start;
        let q = rows / nb;
        let rem = rows % nb;
        let mut r = 0;
        for gi in 0..nb {
            let n = q + u32::from(gi < rem);
            if n == 0 {
                break;
            }
            let base = map.alloc(gi, n as u64 * w as u64, false)?;
            blocks.push(Block {
                round,
                bank_index: gi,
                start: map.address(gi, base),
                base,
                rows: r..r + n,
                cols: cr.clone(),
            });
            r += n;
        }
    }
    map.placements.push(MatrixPlacement { id, rows, cols, segment_len: seg, rounds, concat_heads, blocks });
    Ok(())
}

/// Places every weight matrix, layer by layer, then the embedding tables.
pub fn map_weights(model: &GptModelConfig, geom: &DramGeometry, segment_len: u32) -> Result<MemoryMap, MapError> {
    let cap = geom.row_capacity();
    if segment_len == 0 || segment_len > cap {
        return Err(MapError::Geometry(format!("segment length {segment_len} not in 1..={cap}")));
    }
    let mut map = empty_map(geom, segment_len);
    let d = model.d_model;
    let heads = choose_concat(model.num_heads, model.d_head.min(cap), cap)?;
    for layer in 0..model.num_layers {
        for role in MatrixRole::LAYER_ROLES {
            let (rows, cols) = match role {
                MatrixRole::Ffn1 => (model.d_ffn, d),
                MatrixRole::Ffn2 => (d, model.d_ffn),
                _ => (d, d),
            };
            let concat = if matches!(role, MatrixRole::Q | MatrixRole::K | MatrixRole::V) { heads } else { 1 };
            place_matrix(&mut map, MatrixId { layer: Some(layer), role }, rows, cols, concat)?;
        }
    }
    place_matrix(&mut map, MatrixId { layer: None, role: MatrixRole::EmbedOut }, model.vocab_size, d, 1)?;
    place_matrix(&mut map, MatrixId { layer: None, role: MatrixRole::PosEmbed }, model.max_tokens, d, 1)?;
    Ok(map)
}

/// Reserves key and value regions for `max_tokens` tokens in every layer.
pub fn reserve_kv(map: &mut MemoryMap, model: &GptModelConfig, max_tokens: u32) -> Result<(), MapError> {
    if max_tokens == 0 {
        return Err(MapError::Geometry("max_tokens must be >= 1".into()));
    }
    let cap = map.row_capacity as u64;
    let nb = map.total_banks();
    for layer in 0..model.num_layers {
        for kind in [KvKind::Key, KvKind::Value] {
            let (slot_len, slot_count, layout) = match kind {
                KvKind::Key => (model.d_model, max_tokens, KvLayout::RowMajor),
                KvKind::Value => (max_tokens, model.d_model, KvLayout::ColMajor),
            };
            let slot_stride = if kind == KvKind::Key || slot_len as u64 >= cap {
                (slot_len as u64).div_ceil(cap) * cap
            } else {
                slot_len as u64
            };
            let mut res = KvReservation {
                layer,
                kind,
                token_capacity: max_tokens,
                layout,
                slot_len,
                slot_stride,
                slot_count,
                base: Vec::with_capacity(nb as usize),
                base_linear: vec![0; nb as usize],
            };
            let mut bases = vec![0u64; nb as usize];
            for n in 0..nb {
                let gi = map.kv_bank_index(n);
                let len = res.region_len(n);
                if len > 0 {
                    bases[n as usize] = map.alloc(gi, len, true)?;
                }
            }
            for n in 0..nb {
                let gi = map.kv_bank_index(n);
                res.base_linear[n as usize] = bases[n as usize];
                res.base.push(map.address(gi, bases[n as usize]));
            }
            map.reservations.push(res);
        }
    }
    Ok(())
}

/// Element runs written when token `token` is appended: (address, element count).
pub fn kv_write_address(map: &MemoryMap, layer: u32, kind: KvKind, token: u32) -> Result<Vec<(BankAddress, u32)>, MapError> {
    let res = map.reservation(layer, kind).ok_or(MapError::MissingReservation(layer))?;
    if token >= res.token_capacity {
        return Err(MapError::KvOverflow { token, capacity: res.token_capacity });
    }
    let cap = map.row_capacity;
    match kind {
        KvKind::Key => {
            let (n, lin) = res.slot_location(token);
            let gi = map.kv_bank_index(n);
            Ok(split_runs(lin, res.slot_len, cap).map(|(a, _, len)| (map.address(gi, a), len)).collect())
        }
        KvKind::Value => Ok((0..res.slot_count)
            .map(|c| {
                let (n, lin) = res.slot_location(c);
                (map.address(map.kv_bank_index(n), lin + token as u64), 1)
            })
            .collect()),
    }
}

/// Full map for a run: weights plus KV space for `max_tokens`.
pub fn build_memory_map(
    model: &GptModelConfig,
    geom: &DramGeometry,
    pim: &PimConfig,
    max_tokens: u32,
) -> Result<MemoryMap, MapError> {
    let mut map = map_weights(model, geom, segment_len(geom, pim))?;
    reserve_kv(&mut map, model, max_tokens)?;
    Ok(map)
}
