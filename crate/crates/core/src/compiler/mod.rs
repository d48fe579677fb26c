//! Per-token computation graph and its lowering to PIM/ASIC/bus instructions.

mod graph;
pub mod plan;

pub use graph::{build_graph, ComputationGraph, GraphNode, LnSite, NodeId, NodeKind, VmmOperand, NODES_PER_LAYER};
pub use plan::{plan_instruction, ColOp, RowRun, WorkPlan};

use crate::config::SystemConfig;
use crate::mapper::{KvKind, MatrixRole, MemoryMap};
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("node {node} ({kind}): operand not mapped: {what}")]
    Unmapped { node: NodeId, kind: &'static str, what: String },
    #[error("node {node}: token {token} exceeds KV capacity {capacity}")]
    KvCapacity { node: NodeId, token: u32, capacity: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Pim,
    Asic,
    Bus,
}

/// Model phase an instruction belongs to, for latency and energy breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    LayerNorm,
    Qkv,
    KvWrite,
    Score,
    Softmax,
    Context,
    Projection,
    Residual,
    Ffn1,
    Gelu,
    Ffn2,
    LmHead,
    Argmax,
}

impl Stage {
    pub const ALL: [Stage; 14] = [
        Stage::Embed,
        Stage::LayerNorm,
        Stage::Qkv,
        Stage::KvWrite,
        Stage::Score,
        Stage::Softmax,
        Stage::Context,
        Stage::Projection,
        Stage::Residual,
        Stage::Ffn1,
        Stage::Gelu,
        Stage::Ffn2,
        Stage::LmHead,
        Stage::Argmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::LayerNorm => "layernorm",
            Stage::Qkv => "qkv",
            Stage::KvWrite => "kv_write",
            Stage::Score => "score",
            Stage::Softmax => "softmax",
            Stage::Context => "context",
            Stage::Projection => "projection",
            Stage::Residual => "residual",
            Stage::Ffn1 => "ffn1",
            Stage::Gelu => "gelu",
            Stage::Ffn2 => "ffn2",
            Stage::LmHead => "lm_head",
            Stage::Argmax => "argmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsicKind {
    EmbedAdd,
    LayerNorm,
    Softmax,
    Gelu,
    Residual,
    PartialSum,
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSelect {
    /// Row of the sampled token; `hint` drives timing when the token is not known yet.
    Token { hint: u32 },
    Position(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opcode {
    /// Fills every channel buffer with `len` elements of node `src` starting at `offset`.
    Broadcast { src: NodeId, offset: u32, len: u32 },
    Mac { channel: u32, operand: VmmOperand, round: u32, tokens: u32, heads: u32, dst: NodeId },
    /// Moves the round's partial outputs of node `src` into ASIC SRAM.
    Collect { src: NodeId, round: u32, elements: u32, channels: u32 },
    RowRead { role: MatrixRole, row: RowSelect, dst: NodeId },
    /// Bus transfer of the vector followed by the bank writes.
    KvWrite { kind: KvKind, layer: u32, token: u32, src: NodeId },
    /// `groups` independent vectors of `elements` each (heads for softmax).
    Asic { kind: AsicKind, dst: NodeId, elements: u32, groups: u32, adds: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub target: Target,
    pub opcode: Opcode,
    pub node: NodeId,
    pub stage: Stage,
    /// Collect overlapped with the ASIC instructions that follow it.
    pub fused: bool,
    /// Instructions sharing a bundle id issue together.
    pub bundle: Option<u32>,
    pub deps: Vec<u32>,
}

impl Instruction {
    pub fn bytes(&self) -> u64 {
        match &self.opcode {
            Opcode::Broadcast { len, .. } => *len as u64 * 2,
            Opcode::Collect { elements, .. } => *elements as u64 * 2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionStream {
    pub graph: ComputationGraph,
    pub instructions: Vec<Instruction>,
}

fn stage_of(node: &GraphNode) -> Stage {
    match node.kind {
        NodeKind::EmbedLookup => Stage::Embed,
        NodeKind::LayerNorm(_) => Stage::LayerNorm,
        NodeKind::Vmm(VmmOperand::Weight(id)) => match id.role {
            MatrixRole::Q | MatrixRole::K | MatrixRole::V => Stage::Qkv,
            MatrixRole::Proj => Stage::Projection,
            MatrixRole::Ffn1 => Stage::Ffn1,
            MatrixRole::Ffn2 => Stage::Ffn2,
            MatrixRole::EmbedOut | MatrixRole::PosEmbed => Stage::LmHead,
        },
        NodeKind::Vmm(VmmOperand::Keys { .. }) => Stage::Score,
        NodeKind::Vmm(VmmOperand::Values { .. }) => Stage::Context,
        NodeKind::KvWriteKey | NodeKind::KvWriteValue => Stage::KvWrite,
        NodeKind::Softmax => Stage::Softmax,
        NodeKind::Gelu => Stage::Gelu,
        NodeKind::ResidualAdd => Stage::Residual,
        NodeKind::Argmax => Stage::Argmax,
    }
}

/// Per-round output count and partial-sum additions of a VMM.
#[derive(Debug, Clone, PartialEq)]
pub struct VmmShape {
    pub rounds: u32,
    pub input_len: u32,
    pub round_outputs: Vec<u32>,
    pub partial_adds: u64,
}

fn overlap(a: u32, b: u32, c: u32, d: u32) -> bool {
    a.max(c) < b.min(d)
}

/// Heads whose `span`-wide slice of the broadcast vector overlaps `[s0, s1)`.
fn heads_in(s0: u32, s1: u32, heads: u32, span: u32) -> impl Iterator<Item = u32> {
    (0..heads).filter(move |&h| overlap(s0, s1, h * span, (h + 1) * span))
}

pub fn vmm_shape(node: &GraphNode, seg: u32) -> VmmShape {
    let input_len = node.input_len;
    let rounds = input_len.div_ceil(seg);
    let bounds = |r: u32| (r * seg, ((r + 1) * seg).min(input_len));
    let (round_outputs, partial_adds) = match node.kind {
        NodeKind::Vmm(VmmOperand::Weight(_)) => {
            (vec![node.output_len; rounds as usize], (rounds as u64 - 1) * node.output_len as u64)
        }
        NodeKind::Vmm(VmmOperand::Keys { .. }) => {
            let dh = input_len / node.heads;
            let outs = (0..rounds)
                .map(|r| {
                    let (s0, s1) = bounds(r);
                    heads_in(s0, s1, node.heads, dh).count() as u32 * node.tokens
                })
                .collect::<Vec<_>>();
            let adds = outs.iter().map(|&o| o as u64).sum::<u64>() - node.heads as u64 * node.tokens as u64;
            (outs, adds)
        }
        NodeKind::Vmm(VmmOperand::Values { .. }) => {
            let dh = node.output_len / node.heads;
            let outs = (0..rounds)
                .map(|r| {
                    let (s0, s1) = bounds(r);
                    heads_in(s0, s1, node.heads, node.tokens).count() as u32 * dh
                })
                .collect::<Vec<_>>();
            let adds = outs.iter().map(|&o| o as u64).sum::<u64>() - node.output_len as u64;
            (outs, adds)
        }
        _ => (Vec::new(), 0),
    };
    VmmShape { rounds, input_len, round_outputs, partial_adds }
}

/// Channels holding work for a MAC round.
fn mac_channels(map: &MemoryMap, node: &GraphNode, operand: VmmOperand, round: u32) -> Vec<u32> {
    let c = map.channels;
    let nb = map.total_banks();
    let mut used = vec![false; c as usize];
    match operand {
        VmmOperand::Weight(id) => {
            if let Some(p) = map.placement(id) {
                for b in p.round_blocks(round) {
                    used[(b.bank_index / map.banks_per_channel) as usize] = true;
                }
            }
        }
        VmmOperand::Keys { .. } => {
            for n in 0..nb.min(node.tokens) {
                used[(n % c) as usize] = true;
            }
        }
        VmmOperand::Values { .. } => {
            for n in 0..nb.min(node.output_len) {
                used[(n % c) as usize] = true;
            }
        }
    }
    (0..c).filter(|&ch| used[ch as usize]).collect()
}

struct Emit {
    out: Vec<Instruction>,
    /// Last instruction producing each node's result.
    producer: Vec<Option<u32>>,
    bundle: u32,
}

impl Emit {
    fn push(&mut self, target: Target, opcode: Opcode, node: &GraphNode, deps: Vec<u32>, bundle: Option<u32>) -> u32 {
        let id = self.out.len() as u32;
        self.out.push(Instruction { target, opcode, node: node.id, stage: stage_of(node), fused: false, bundle, deps });
        id
    }

    fn dep(&self, node: NodeId) -> u32 {
        self.producer[node as usize].expect("topological order")
    }

    fn next_bundle(&mut self) -> u32 {
        self.bundle += 1;
        self.bundle
    }
}

/// Compile options that vary per token.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenHint {
    /// Token id used for the embedding-row timing.
    pub token: u32,
}

pub fn compile(graph: &ComputationGraph, map: &MemoryMap, cfg: &SystemConfig, hint: TokenHint) -> Result<InstructionStream, CompileError> {
    let seg = map.segment_len;
    debug_assert_eq!(seg, crate::mapper::segment_len(&cfg.geometry, &cfg.pim));
    let pos = (graph.token_position - 1) % graph.model.max_tokens;
    let mut e = Emit { out: Vec::new(), producer: vec![None; graph.nodes.len()], bundle: 0 };
    for node in &graph.nodes {
        let unmapped = |what: String| CompileError::Unmapped { node: node.id, kind: node.kind.name(), what };
        let last = match node.kind {
            NodeKind::EmbedLookup => {
                for role in [MatrixRole::EmbedOut, MatrixRole::PosEmbed] {
                    if map.placement(crate::mapper::MatrixId { layer: None, role }).is_none() {
                        return Err(unmapped(role.name().into()));
                    }
                }
                let b = e.next_bundle();
                let r0 = e.push(
                    Target::Pim,
                    Opcode::RowRead { role: MatrixRole::EmbedOut, row: RowSelect::Token { hint: hint.token }, dst: node.id },
                    node,
                    vec![],
                    Some(b),
                );
                let r1 = e.push(
                    Target::Pim,
                    Opcode::RowRead { role: MatrixRole::PosEmbed, row: RowSelect::Position(pos), dst: node.id },
                    node,
                    vec![],
                    Some(b),
                );
                let c = e.push(
                    Target::Bus,
                    Opcode::Collect { src: node.id, round: 0, elements: 2 * node.output_len, channels: 1 },
                    node,
                    vec![r0, r1],
                    None,
                );
                e.push(
                    Target::Asic,
                    Opcode::Asic { kind: AsicKind::EmbedAdd, dst: node.id, elements: node.output_len, groups: 1, adds: 0 },
                    node,
                    vec![c],
                    None,
                )
            }
            NodeKind::Vmm(operand) => {
                match operand {
                    VmmOperand::Weight(id) => {
                        if map.placement(id).is_none() {
                            return Err(unmapped(id.to_string()));
                        }
                    }
                    VmmOperand::Keys { layer } | VmmOperand::Values { layer } => {
                        let kind = if matches!(operand, VmmOperand::Keys { .. }) { KvKind::Key } else { KvKind::Value };
                        let res = map.reservation(layer, kind).ok_or_else(|| unmapped(format!("{kind:?} cache of layer {layer}")))?;
                        if node.tokens > res.token_capacity {
                            return Err(CompileError::KvCapacity { node: node.id, token: node.tokens, capacity: res.token_capacity });
                        }
                    }
                }
                let shape = vmm_shape(node, seg);
                let src = node.deps[0];
                let extra: Vec<u32> = node.deps[1..].iter().map(|&d| e.dep(d)).collect();
                let mut collects = Vec::with_capacity(shape.rounds as usize);
                for r in 0..shape.rounds {
                    let offset = r * seg;
                    let len = seg.min(shape.input_len - offset);
                    let mut deps = vec![e.dep(src)];
                    if let Some(&prev) = collects.last() {
                        deps.push(prev);
                    }
                    let bc = e.push(Target::Bus, Opcode::Broadcast { src, offset, len }, node, deps, None);
                    let b = e.next_bundle();
                    let chans = mac_channels(map, node, operand, r);
                    let mut macs = Vec::with_capacity(chans.len());
                    for &ch in &chans {
                        let mut deps = vec![bc];
                        deps.extend(&extra);
                        macs.push(e.push(
                            Target::Pim,
                            Opcode::Mac { channel: ch, operand, round: r, tokens: node.tokens, heads: node.heads, dst: node.id },
                            node,
                            deps,
                            Some(b),
                        ));
                    }
                    let c = e.push(
                        Target::Bus,
                        Opcode::Collect { src: node.id, round: r, elements: shape.round_outputs[r as usize], channels: chans.len() as u32 },
                        node,
                        macs,
                        None,
                    );
                    collects.push(c);
                }
                if shape.partial_adds > 0 {
                    e.push(
                        Target::Asic,
                        Opcode::Asic { kind: AsicKind::PartialSum, dst: node.id, elements: node.output_len, groups: shape.rounds, adds: shape.partial_adds },
                        node,
                        collects,
                        None,
                    )
                } else {
                    *collects.last().expect("at least one round")
                }
            }
            NodeKind::KvWriteKey | NodeKind::KvWriteValue => {
                let kind = if node.kind == NodeKind::KvWriteKey { KvKind::Key } else { KvKind::Value };
                let layer = node.layer.expect("layer node");
                let res = map.reservation(layer, kind).ok_or_else(|| unmapped(format!("{kind:?} cache of layer {layer}")))?;
                let token = node.tokens - 1;
                if token >= res.token_capacity {
                    return Err(CompileError::KvCapacity { node: node.id, token, capacity: res.token_capacity });
                }
                let deps = vec![e.dep(node.deps[0])];
                e.push(Target::Pim, Opcode::KvWrite { kind, layer, token, src: node.deps[0] }, node, deps, None)
            }
            NodeKind::LayerNorm(_) | NodeKind::Softmax | NodeKind::Gelu | NodeKind::ResidualAdd | NodeKind::Argmax => {
                let (kind, elements, groups) = match node.kind {
                    NodeKind::LayerNorm(_) => (AsicKind::LayerNorm, node.output_len, 1),
                    NodeKind::Softmax => (AsicKind::Softmax, node.tokens, node.heads),
                    NodeKind::Gelu => (AsicKind::Gelu, node.output_len, 1),
                    NodeKind::ResidualAdd => (AsicKind::Residual, node.output_len, 1),
                    _ => (AsicKind::Argmax, node.input_len, 1),
                };
                let deps = node.deps.iter().map(|&d| e.dep(d)).collect();
                e.push(Target::Asic, Opcode::Asic { kind, dst: node.id, elements, groups, adds: 0 }, node, deps, None)
            }
        };
        e.producer[node.id as usize] = Some(last);
    }
    let mut instructions = e.out;
    for i in 0..instructions.len() {
        if matches!(instructions[i].opcode, Opcode::Collect { .. }) {
            instructions[i].fused = instructions.get(i + 1).is_some_and(|n| n.target == Target::Asic);
        }
    }
    Ok(InstructionStream { graph: graph.clone(), instructions })
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Opcode::Broadcast { src, offset, len } => write!(f, "broadcast src=n{src} offset={offset} len={len}"),
            Opcode::Mac { channel, operand, round, tokens, .. } => {
                let op = match operand {
                    VmmOperand::Weight(id) => id.to_string(),
                    VmmOperand::Keys { layer } => format!("K[L{layer}] tokens={tokens}"),
                    VmmOperand::Values { layer } => format!("V[L{layer}] tokens={tokens}"),
                };
                write!(f, "mac ch={channel} {op} round={round}")
            }
            Opcode::Collect { src, round, elements, channels } => {
                write!(f, "collect src=n{src} round={round} elements={elements} channels={channels}")
            }
            Opcode::RowRead { role, row, .. } => match row {
                RowSelect::Token { hint } => write!(f, "row_read {} token(hint={hint})", role.name()),
                RowSelect::Position(p) => write!(f, "row_read {} row={p}", role.name()),
            },
            Opcode::KvWrite { kind, layer, token, src } => {
                let k = if *kind == KvKind::Key { "key" } else { "value" };
                write!(f, "kv_write_{k} L{layer} token={token} src=n{src}")
            }
            Opcode::Asic { kind, dst, elements, groups, adds } => {
                write!(f, "{kind:?} dst=n{dst} elements={elements} groups={groups}")?;
                if *adds > 0 {
                    write!(f, " adds={adds}")?;
                }
                Ok(())
            }
        }
    }
}

impl InstructionStream {
    /// One instruction per line: index, target, opcode and operands, dependencies.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, ins) in self.instructions.iter().enumerate() {
            let target = match ins.target {
                Target::Pim => "pim",
                Target::Asic => "asic",
                Target::Bus => "bus",
            };
            let _ = write!(s, "{i:6} {target:4} {}", ins.opcode);
            if ins.fused {
                s.push_str(" fused");
            }
            if let Some(b) = ins.bundle {
                let _ = write!(s, " bundle={b}");
            }
            let deps: Vec<String> = ins.deps.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, " deps=[{}]", deps.join(","));
        }
        s
    }
}

/// One explicit DRAM command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramCommand {
    pub bank_index: u32,
    pub kind: CommandKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Act { row: u32 },
    Col { op: ColOp, row: u32 },
    Pre,
}

/// Expands a PIM instruction into ACT / column / PRE commands per bank, starting from
/// closed banks. Reads leave their last row open; writes close every row they open.
pub fn lower_to_commands(instr: &Instruction, map: &MemoryMap, cfg: &SystemConfig) -> Vec<DramCommand> {
    let mut plan = WorkPlan::default();
    plan_instruction(instr, map, cfg.pim.mac_width, &mut plan);
    let mut out = Vec::new();
    for (gi, runs) in plan.bank_runs() {
        let mut open: Option<u32> = None;
        for run in runs {
            for i in 0..run.rows {
                let row = run.row(i);
                if open != Some(row) {
                    if open.is_some() {
                        out.push(DramCommand { bank_index: gi, kind: CommandKind::Pre });
                    }
                    out.push(DramCommand { bank_index: gi, kind: CommandKind::Act { row } });
                    open = Some(row);
                }
                for _ in 0..run.cols(i) {
                    out.push(DramCommand { bank_index: gi, kind: CommandKind::Col { op: run.op, row } });
                }
                if run.op == ColOp::Write {
                    out.push(DramCommand { bank_index: gi, kind: CommandKind::Pre });
                    open = None;
                }
            }
        }
    }
    out
}
