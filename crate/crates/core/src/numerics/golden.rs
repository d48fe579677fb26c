//! Reference forward pass built only from the BF16 operations.

use super::approx::gelu;
use super::bf16::Bf16;
use super::ops::{add_vec, argmax, attention_scale, layernorm, segmented_dot, softmax_scaled, vmm, Bf16Matrix};
use super::NumericsError;
use crate::config::GptModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Matrices are output-major: row r holds the weights of output r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<Bf16>,
    pub ln1_beta: Vec<Bf16>,
    pub w_q: Bf16Matrix,
    pub w_k: Bf16Matrix,
    pub w_v: Bf16Matrix,
    pub w_proj: Bf16Matrix,
    pub ln2_gamma: Vec<Bf16>,
    pub ln2_beta: Vec<Bf16>,
    pub w_ffn1: Bf16Matrix,
    pub w_ffn2: Bf16Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptWeights {
    pub model: GptModelConfig,
    /// vocab × d_model; also the tied output projection.
    pub wte: Bf16Matrix,
    /// max_tokens × d_model.
    pub wpe: Bf16Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gamma: Vec<Bf16>,
    pub lnf_beta: Vec<Bf16>,
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f64) -> Bf16Matrix {
    let data = (0..rows * cols).map(|_| Bf16::from_f64(rng.gen_range(-amp..amp))).collect();
    Bf16Matrix { rows, cols, data }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Bf16> {
    (0..n).map(|_| Bf16::from_f64(rng.gen_range(lo..hi))).collect()
}

impl GptWeights {
    pub fn random(model: &GptModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.d_model as usize;
        let f = model.d_ffn as usize;
        let a = 1.0 / (d as f64).sqrt();
        let af = 1.0 / (f as f64).sqrt();
        let layers = (0..model.num_layers)
            .map(|_| LayerWeights {
                ln1_gamma: rand_vec(&mut rng, d, 0.5, 1.5),
                ln1_beta: rand_vec(&mut rng, d, -0.1, 0.1),
                w_q: rand_matrix(&mut rng, d, d, a),
                w_k: rand_matrix(&mut rng, d, d, a),
                w_v: rand_matrix(&mut rng, d, d, a),
                w_proj: rand_matrix(&mut rng, d, d, a),
                ln2_gamma: rand_vec(&mut rng, d, 0.5, 1.5),
                ln2_beta: rand_vec(&mut rng, d, -0.1, 0.1),
                w_ffn1: rand_matrix(&mut rng, f, d, a),
                w_ffn2: rand_matrix(&mut rng, d, f, af),
            })
            .collect();
        Self {
            model: model.clone(),
            wte: rand_matrix(&mut rng, model.vocab_size as usize, d, 1.0),
            wpe: rand_matrix(&mut rng, model.max_tokens as usize, d, 0.2),
            layers,
            lnf_gamma: rand_vec(&mut rng, d, 0.5, 1.5),
            lnf_beta: rand_vec(&mut rng, d, -0.1, 0.1),
        }
    }

    pub fn zeros(model: &GptModelConfig) -> Self {
        let d = model.d_model as usize;
        let f = model.d_ffn as usize;
        let z = |r, c| Bf16Matrix::zeros(r, c);
        let layers = (0..model.num_layers)
            .map(|_| LayerWeights {
                ln1_gamma: vec![Bf16::ZERO; d],
                ln1_beta: vec![Bf16::ZERO; d],
                w_q: z(d, d),
                w_k: z(d, d),
                w_v: z(d, d),
                w_proj: z(d, d),
                ln2_gamma: vec![Bf16::ZERO; d],
                ln2_beta: vec![Bf16::ZERO; d],
                w_ffn1: z(f, d),
                w_ffn2: z(d, f),
            })
            .collect();
        Self {
            model: model.clone(),
            wte: z(model.vocab_size as usize, d),
            wpe: z(model.max_tokens as usize, d),
            layers,
            lnf_gamma: vec![Bf16::ZERO; d],
            lnf_beta: vec![Bf16::ZERO; d],
        }
    }
}

/// Key and value rows of one layer, one entry per past token.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub keys: Vec<Vec<Bf16>>,
    pub values: Vec<Vec<Bf16>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub position: u32,
    pub input_token: u32,
    /// Residual stream after each layer.
    pub layer_outputs: Vec<Vec<Bf16>>,
    pub logits: Vec<Bf16>,
    pub next_token: u32,
}

/// Multi-head attention for one token against the cache, with the query and the
/// concatenated score vector broadcast in segments of `seg` elements.
pub fn multi_head_attention(
    q: &[Bf16],
    cache: &KvCache,
    num_heads: usize,
    seg: usize,
) -> Result<Vec<Bf16>, NumericsError> {
    let d = q.len();
    let dh = d / num_heads;
    let t = cache.keys.len();
    let scale = attention_scale(dh);
    let mut probs = Vec::with_capacity(num_heads * t);
    for h in 0..num_heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<Bf16> = cache.keys.iter().map(|k| segmented_dot(&q[r.clone()], &k[r.clone()], h * dh, seg)).collect();
        probs.extend(softmax_scaled(&scores, scale)?);
    }
    let mut col = vec![Bf16::ZERO; t];
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let h = c / dh;
        for (i, v) in cache.values.iter().enumerate() {
            col[i] = v[c];
        }
        out.push(segmented_dot(&probs[h * t..(h + 1) * t], &col, h * t, seg));
    }
    Ok(out)
}

/// One decoding step at `position` for `token`, appending to `caches`.
pub fn forward_token(
    w: &GptWeights,
    caches: &mut [KvCache],
    position: u32,
    token: u32,
    seg: usize,
    epsilon: Bf16,
) -> Result<TokenStep, NumericsError> {
    let m = &w.model;
    let pos_row = (position % m.max_tokens) as usize;
    let mut x = add_vec(w.wte.row(token as usize), w.wpe.row(pos_row));
    let mut layer_outputs = Vec::with_capacity(m.num_layers as usize);
    for (lw, cache) in w.layers.iter().zip(caches.iter_mut()) {
        let a = layernorm(&x, &lw.ln1_gamma, &lw.ln1_beta, epsilon)?;
        let q = vmm(&lw.w_q, &a, seg)?;
        let k = vmm(&lw.w_k, &a, seg)?;
        let v = vmm(&lw.w_v, &a, seg)?;
        cache.keys.push(k);
        cache.values.push(v);
        let ctx = multi_head_attention(&q, cache, m.num_heads as usize, seg)?;
        let attn = vmm(&lw.w_proj, &ctx, seg)?;
        x = add_vec(&x, &attn);
        let a2 = layernorm(&x, &lw.ln2_gamma, &lw.ln2_beta, epsilon)?;
        let h1 = vmm(&lw.w_ffn1, &a2, seg)?;
        let g: Vec<Bf16> = h1.iter().map(|&v| gelu(v)).collect();
        let f = vmm(&lw.w_ffn2, &g, seg)?;
        x = add_vec(&x, &f);
        layer_outputs.push(x.clone());
    }
    let xf = layernorm(&x, &w.lnf_gamma, &w.lnf_beta, epsilon)?;
    let logits = vmm(&w.wte, &xf, seg)?;
    let next_token = argmax(&logits) as u32;
    Ok(TokenStep { position, input_token: token, layer_outputs, logits, next_token })
}

/// Greedy generation of `token_count` steps starting from token 0.
pub fn golden_forward(w: &GptWeights, token_count: u32, seg: usize, epsilon: Bf16) -> Result<Vec<TokenStep>, NumericsError> {
    let mut caches = vec![KvCache::default(); w.model.num_layers as usize];
    let mut token = 0;
    let mut steps = Vec::with_capacity(token_count as usize);
    for p in 0..token_count {
        let step = forward_token(w, &mut caches, p, token, seg, epsilon)?;
        token = step.next_token;
        steps.push(step);
    }
    Ok(steps)
}
