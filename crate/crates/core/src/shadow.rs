//! Functional execution of instruction streams over BF16 bank contents.

use crate::compiler::{vmm_shape, AsicKind, InstructionStream, LnSite, NodeId, NodeKind, Opcode, RowSelect, VmmOperand};
use crate::mapper::{kv_write_address, KvKind, MatrixId, MatrixRole, MemoryMap};
use crate::numerics::{
    add_vec, argmax, attention_scale, gelu, layernorm, pim_dot, softmax_scaled, Bf16, Bf16Matrix, GptWeights, NumericsError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("node {0} read before it was produced")]
    Missing(NodeId),
    #[error("{0}")]
    Map(#[from] crate::mapper::MapError),
}

/// Results of one token step.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowStep {
    pub layer_outputs: Vec<Vec<Bf16>>,
    pub logits: Vec<Bf16>,
    pub next_token: u32,
}

pub struct ShadowMachine<'a> {
    map: &'a MemoryMap,
    weights: &'a GptWeights,
    epsilon: Bf16,
    banks: Vec<Vec<Bf16>>,
    gb: Vec<Bf16>,
    gb_offset: u32,
    values: Vec<Option<Vec<Bf16>>>,
    /// Per output element, partial sums in round order.
    partials: Vec<Vec<Bf16>>,
}

fn matrix_of(w: &GptWeights, id: MatrixId) -> &Bf16Matrix {
    match (id.layer, id.role) {
        (_, MatrixRole::EmbedOut) => &w.wte,
        (_, MatrixRole::PosEmbed) => &w.wpe,
        (Some(l), role) => {
            let lw = &w.layers[l as usize];
            match role {
                MatrixRole::Q => &lw.w_q,
                MatrixRole::K => &lw.w_k,
                MatrixRole::V => &lw.w_v,
                MatrixRole::Proj => &lw.w_proj,
                MatrixRole::Ffn1 => &lw.w_ffn1,
                _ => &lw.w_ffn2,
            }
        }
        (None, role) => panic!("layer matrix {role:?} without layer"),
    }
}

impl<'a> ShadowMachine<'a> {
    /// Loads every placed matrix into bank storage.
    pub fn new(map: &'a MemoryMap, weights: &'a GptWeights, epsilon: Bf16) -> Self {
        let mut banks: Vec<Vec<Bf16>> = map.bytes_used_per_bank.iter().map(|&b| vec![Bf16::ZERO; (b / 2) as usize]).collect();
        for p in &map.placements {
            let m = matrix_of(weights, p.id);
            for b in &p.blocks {
                let mem = &mut banks[b.bank_index as usize];
                let w = b.width() as usize;
                for (i, r) in b.rows.clone().enumerate() {
                    let at = b.base as usize + i * w;
                    mem[at..at + w].copy_from_slice(&m.row(r as usize)[b.cols.start as usize..b.cols.end as usize]);
                }
            }
        }
        Self { map, weights, epsilon, banks, gb: Vec::new(), gb_offset: 0, values: Vec::new(), partials: Vec::new() }
    }

    fn value(&self, n: NodeId) -> Result<&[Bf16], ShadowError> {
        self.values.get(n as usize).and_then(|v| v.as_deref()).ok_or(ShadowError::Missing(n))
    }

    fn read(&self, gi: u32, at: u64, len: u32) -> &[Bf16] {
        &self.banks[gi as usize][at as usize..at as usize + len as usize]
    }

    #[allow(clippy::too_many_arguments)]
    fn mac(&mut self, channel: u32, operand: VmmOperand, round: u32, tokens: u32, heads: u32, out_len: u32) {
        let map = self.map;
        debug_assert_eq!(self.partials.len(), out_len as usize);
        let nb = map.total_banks();
        let x = &self.gb;
        let s0 = self.gb_offset;
        let s1 = s0 + x.len() as u32;
        match operand {
            VmmOperand::Weight(id) => {
                let p = map.placement(id).expect("mapped");
                for b in p.round_blocks(round) {
                    if b.bank_index / map.banks_per_channel != channel {
                        continue;
                    }
                    let w = b.width();
                    for (i, r) in b.rows.clone().enumerate() {
                        let row = self.read(b.bank_index, b.base + i as u64 * w as u64, w);
                        let v = pim_dot(x, row);
                        self.partials[r as usize].push(v);
                    }
                }
            }
            VmmOperand::Keys { layer } => {
                let res = map.reservation(layer, KvKind::Key).expect("reserved");
                let dh = res.slot_len / heads;
                for t in (0..tokens).filter(|t| (t % nb) % map.channels == channel) {
                    let (n, base) = res.slot_location(t);
                    let gi = map.kv_bank_index(n);
                    for h in 0..heads {
                        let (a, e) = (s0.max(h * dh), s1.min((h + 1) * dh));
                        if a >= e {
                            continue;
                        }
                        let key = self.read(gi, base + a as u64, e - a);
                        let v = pim_dot(&x[(a - s0) as usize..(e - s0) as usize], key);
                        self.partials[(h * tokens + t) as usize].push(v);
                    }
                }
            }
            VmmOperand::Values { layer } => {
                let res = map.reservation(layer, KvKind::Value).expect("reserved");
                let d = res.slot_count;
                let dh = d / heads;
                for c in (0..d).filter(|c| (c % nb) % map.channels == channel) {
                    let h = c / dh;
                    let (a, e) = (s0.max(h * tokens), s1.min((h + 1) * tokens));
                    if a >= e {
                        continue;
                    }
                    let (n, base) = res.slot_location(c);
                    let gi = map.kv_bank_index(n);
                    let col = self.read(gi, base + (a - h * tokens) as u64, e - a);
                    let v = pim_dot(&x[(a - s0) as usize..(e - s0) as usize], col);
                    self.partials[c as usize].push(v);
                }
            }
        }
    }

    fn fold_partials(&mut self) -> Vec<Bf16> {
        std::mem::take(&mut self.partials)
            .into_iter()
            .map(|p| p.into_iter().reduce(|a, b| a + b).unwrap_or(Bf16::ZERO))
            .collect()
    }

    /// Executes one token step. `token` is the input token of this step.
    pub fn execute(&mut self, stream: &InstructionStream, token: u32) -> Result<ShadowStep, ShadowError> {
        let graph = &stream.graph;
        let w = self.weights;
        self.values = vec![None; graph.nodes.len()];
        let mut embed_rows: Vec<Vec<Bf16>> = Vec::new();
        let mut layer_outputs = Vec::new();
        let mut logits = Vec::new();
        let mut next_token = 0;
        let seg = self.map.segment_len;
        for ins in &stream.instructions {
            let node = &graph.nodes[ins.node as usize];
            match &ins.opcode {
                Opcode::RowRead { role, row, .. } => {
                    let p = self.map.placement(MatrixId { layer: None, role: *role }).expect("mapped");
                    let r = match row {
                        RowSelect::Token { .. } => token,
                        RowSelect::Position(pos) => *pos,
                    } % p.rows;
                    let mut v = Vec::with_capacity(p.cols as usize);
                    for round in 0..p.rounds {
                        let b = p.block_for_row(round, r);
                        v.extend_from_slice(self.read(b.bank_index, b.base + (r - b.rows.start) as u64 * b.width() as u64, b.width()));
                    }
                    embed_rows.push(v);
                }
                Opcode::Broadcast { src, offset, len } => {
                    let v = self.value(*src)?;
                    self.gb = v[*offset as usize..(*offset + *len) as usize].to_vec();
                    self.gb_offset = *offset;
                    if *offset == 0 {
                        self.partials = vec![Vec::new(); node.output_len as usize];
                    }
                }
                Opcode::Mac { channel, operand, round, tokens, heads, .. } => {
                    self.mac(*channel, *operand, *round, *tokens, *heads, node.output_len);
                }
                Opcode::Collect { src, round, .. } => {
                    let n = &graph.nodes[*src as usize];
                    if matches!(n.kind, NodeKind::Vmm(_)) {
                        let shape = vmm_shape(n, seg);
                        if *round + 1 == shape.rounds && shape.partial_adds == 0 {
                            self.values[*src as usize] = Some(self.fold_partials());
                        }
                    }
                }
                Opcode::KvWrite { kind, layer, token: t, src } => {
                    let v = self.value(*src)?.to_vec();
                    let mut i = 0usize;
                    for (addr, len) in kv_write_address(self.map, *layer, *kind, *t)? {
                        let gi = self.map.bank_index(addr.channel, addr.bank);
                        let at = addr.row as usize * self.map.row_capacity as usize + addr.col as usize;
                        self.banks[gi as usize][at..at + len as usize].copy_from_slice(&v[i..i + len as usize]);
                        i += len as usize;
                    }
                    self.values[ins.node as usize] = Some(Vec::new());
                }
                Opcode::Asic { kind, dst, .. } => {
                    let dep = |i: usize| node.deps[i];
                    let out = match kind {
                        AsicKind::EmbedAdd => {
                            let rows = std::mem::take(&mut embed_rows);
                            add_vec(&rows[0], &rows[1])
                        }
                        AsicKind::PartialSum => self.fold_partials(),
                        AsicKind::LayerNorm => {
                            let (g, b) = match (node.kind, node.layer) {
                                (NodeKind::LayerNorm(LnSite::Attention), Some(l)) => (&w.layers[l as usize].ln1_gamma, &w.layers[l as usize].ln1_beta),
                                (NodeKind::LayerNorm(LnSite::Ffn), Some(l)) => (&w.layers[l as usize].ln2_gamma, &w.layers[l as usize].ln2_beta),
                                _ => (&w.lnf_gamma, &w.lnf_beta),
                            };
                            layernorm(self.value(dep(0))?, g, b, self.epsilon)?
                        }
                        AsicKind::Softmax => {
                            let s = self.value(dep(0))?;
                            let t = node.tokens as usize;
                            let scale = attention_scale((w.model.d_model / node.heads) as usize);
                            let mut out = Vec::with_capacity(s.len());
                            for h in 0..node.heads as usize {
                                out.extend(softmax_scaled(&s[h * t..(h + 1) * t], scale)?);
                            }
                            out
                        }
                        AsicKind::Gelu => self.value(dep(0))?.iter().map(|&v| gelu(v)).collect(),
                        AsicKind::Residual => {
                            let out = add_vec(self.value(dep(0))?, self.value(dep(1))?);
                            if graph.nodes.get(node.id as usize + 1).is_none_or(|n| n.layer != node.layer) {
                                layer_outputs.push(out.clone());
                            }
                            out
                        }
                        AsicKind::Argmax => {
                            let l = self.value(dep(0))?;
                            next_token = argmax(l) as u32;
                            logits = l.to_vec();
                            vec![Bf16::from_f64(next_token as f64)]
                        }
                    };
                    self.values[*dst as usize] = Some(out);
                }
            }
        }
        Ok(ShadowStep { layer_outputs, logits, next_token })
    }
}
