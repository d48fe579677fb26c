use crate::config::GptModelConfig;
use crate::mapper::{MatrixId, MatrixRole};
use serde::{Deserialize, Serialize};

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnSite {
    Attention,
    Ffn,
    Final,
}

/// Matrix side of a VMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmmOperand {
    Weight(MatrixId),
    /// q · Kᵀ over the key cache of a layer.
    Keys { layer: u32 },
    /// scores · V over the value cache of a layer.
    Values { layer: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    EmbedLookup,
    LayerNorm(LnSite),
    Vmm(VmmOperand),
    KvWriteKey,
    KvWriteValue,
    Softmax,
    Gelu,
    ResidualAdd,
    Argmax,
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::EmbedLookup => "embed_lookup",
            NodeKind::LayerNorm(_) => "layernorm",
            NodeKind::Vmm(_) => "vmm",
            NodeKind::KvWriteKey => "kv_write_key",
            NodeKind::KvWriteValue => "kv_write_value",
            NodeKind::Softmax => "softmax",
            NodeKind::Gelu => "gelu",
            NodeKind::ResidualAdd => "residual_add",
            NodeKind::Argmax => "argmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub layer: Option<u32>,
    /// Heads for attention nodes, 1 otherwise.
    pub heads: u32,
    /// Tokens attended (attention nodes), 0 otherwise.
    pub tokens: u32,
    pub input_len: u32,
    pub output_len: u32,
    pub deps: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationGraph {
    pub model: GptModelConfig,
    /// 1-based position of the token being generated.
    pub token_position: u32,
    pub nodes: Vec<GraphNode>,
}

/// Nodes created per transformer layer.
pub const NODES_PER_LAYER: usize = 16;

struct Builder {
    nodes: Vec<GraphNode>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn add(&mut self, kind: NodeKind, layer: Option<u32>, heads: u32, tokens: u32, input_len: u32, output_len: u32, deps: &[NodeId]) -> NodeId {
        let id = self.nodes.len() as NodeId;
        self.nodes.push(GraphNode { id, kind, layer, heads, tokens, input_len, output_len, deps: deps.to_vec() });
        id
    }
}

/// Per-token decoding graph for the token at 1-based `token_position`.
pub fn build_graph(model: &GptModelConfig, token_position: u32) -> ComputationGraph {
    assert!(token_position >= 1, "token_position is 1-based");
    let d = model.d_model;
    let h = model.num_heads;
    let t = token_position;
    let mut b = Builder { nodes: Vec::with_capacity(model.num_layers as usize * NODES_PER_LAYER + 4) };
    let w = |layer: u32, role| NodeKind::Vmm(VmmOperand::Weight(MatrixId { layer: Some(layer), role }));
    let mut x = b.add(NodeKind::EmbedLookup, None, 1, 0, 0, d, &[]);
    for l in 0..model.num_layers {
        let ly = Some(l);
        let ln1 = b.add(NodeKind::LayerNorm(LnSite::Attention), ly, 1, 0, d, d, &[x]);
        let q = b.add(w(l, MatrixRole::Q), ly, 1, 0, d, d, &[ln1]);
        let k = b.add(w(l, MatrixRole::K), ly, 1, 0, d, d, &[ln1]);
        let v = b.add(w(l, MatrixRole::V), ly, 1, 0, d, d, &[ln1]);
        let kw = b.add(NodeKind::KvWriteKey, ly, 1, t, d, 0, &[k]);
        let vw = b.add(NodeKind::KvWriteValue, ly, 1, t, d, 0, &[v]);
        let s = b.add(NodeKind::Vmm(VmmOperand::Keys { layer: l }), ly, h, t, d, h * t, &[q, kw]);
        let p = b.add(NodeKind::Softmax, ly, h, t, h * t, h * t, &[s]);
        let c = b.add(NodeKind::Vmm(VmmOperand::Values { layer: l }), ly, h, t, h * t, d, &[p, vw]);
        let o = b.add(w(l, MatrixRole::Proj), ly, 1, 0, d, d, &[c]);
        let r1 = b.add(NodeKind::ResidualAdd, ly, 1, 0, d, d, &[x, o]);
        let ln2 = b.add(NodeKind::LayerNorm(LnSite::Ffn), ly, 1, 0, d, d, &[r1]);
        let f1 = b.add(w(l, MatrixRole::Ffn1), ly, 1, 0, d, model.d_ffn, &[ln2]);
        let g = b.add(NodeKind::Gelu, ly, 1, 0, model.d_ffn, model.d_ffn, &[f1]);
        let f2 = b.add(w(l, MatrixRole::Ffn2), ly, 1, 0, model.d_ffn, d, &[g]);
        x = b.add(NodeKind::ResidualAdd, ly, 1, 0, d, d, &[r1, f2]);
    }
    let lnf = b.add(NodeKind::LayerNorm(LnSite::Final), None, 1, 0, d, d, &[x]);
    let out = MatrixId { layer: None, role: MatrixRole::EmbedOut };
    let logits = b.add(NodeKind::Vmm(VmmOperand::Weight(out)), None, 1, 0, d, model.vocab_size, &[lnf]);
    b.add(NodeKind::Argmax, None, 1, 0, model.vocab_size, 1, &[logits]);
    ComputationGraph { model: model.clone(), token_position, nodes: b.nodes }
}

impl ComputationGraph {
    pub fn layer_nodes(&self, layer: u32) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(move |n| n.layer == Some(layer))
    }

    /// Every dependency points to an earlier node.
    pub fn is_topological(&self) -> bool {
        self.nodes.iter().all(|n| n.deps.iter().all(|&d| d < n.id))
    }
}
