use super::ConfigError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptModelConfig {
    pub name: String,
    pub num_layers: u32,
    pub d_model: u32,
    pub num_heads: u32,
    pub d_head: u32,
    pub d_ffn: u32,
    pub vocab_size: u32,
    /// Context length; also the number of learned position embeddings.
    pub max_tokens: u32,
}

impl GptModelConfig {
    pub fn new(name: &str, num_layers: u32, d_model: u32, num_heads: u32, vocab_size: u32, max_tokens: u32) -> Self {
        Self {
            name: name.to_string(),
            num_layers,
            d_model,
            num_heads,
            d_head: d_model / num_heads,
            d_ffn: 4 * d_model,
            vocab_size,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |constraint, detail: String| Err(ConfigError::Constraint { constraint, detail });
        if self.num_layers == 0 || self.d_model == 0 || self.num_heads == 0 || self.vocab_size == 0 || self.max_tokens == 0 {
            return bad("model dimensions > 0", format!("{self:?}"));
        }
        if self.d_model != self.num_heads * self.d_head {
            return bad("d_model = num_heads * d_head", format!("{} != {} * {}", self.d_model, self.num_heads, self.d_head));
        }
        if self.d_ffn != 4 * self.d_model {
            return bad("d_ffn = 4 * d_model", format!("{} != 4 * {}", self.d_ffn, self.d_model));
        }
        Ok(())
    }

    /// 12·N·d² + V·d + P·d plus biases and layernorm parameters.
    pub fn param_count(&self) -> u64 {
        let n = self.num_layers as u64;
        let d = self.d_model as u64;
        let per_layer_small = 13 * d;
        12 * n * d * d + self.vocab_size as u64 * d + self.max_tokens as u64 * d + n * per_layer_small + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCatalogEntry {
    pub config: GptModelConfig,
    pub published_params: u64,
    pub source: String,
}

const GPT2_SOURCE: &str = "GPT-2 released checkpoints (Radford et al. 2019)";
const GPT3_SOURCE: &str = "GPT-3 model table (Brown et al. 2020)";

fn entry(name: &str, layers: u32, d: u32, heads: u32, ctx: u32, published: u64, source: &str) -> ModelCatalogEntry {
    ModelCatalogEntry {
        config: GptModelConfig::new(name, layers, d, heads, 50257, ctx),
        published_params: published,
        source: source.to_string(),
    }
}

/// The eight evaluated GPT2/GPT3 variants.
pub fn model_catalog() -> Vec<ModelCatalogEntry> {
    vec![
        entry("gpt2-small", 12, 768, 12, 1024, 124_000_000, GPT2_SOURCE),
        entry("gpt2-medium", 24, 1024, 16, 1024, 355_000_000, GPT2_SOURCE),
        entry("gpt2-large", 36, 1280, 20, 1024, 774_000_000, GPT2_SOURCE),
        entry("gpt2-xl", 48, 1600, 25, 1024, 1_558_000_000, GPT2_SOURCE),
        entry("gpt3-small", 12, 768, 12, 2048, 125_000_000, GPT3_SOURCE),
        entry("gpt3-medium", 24, 1024, 16, 2048, 350_000_000, GPT3_SOURCE),
        entry("gpt3-large", 24, 1536, 16, 2048, 760_000_000, GPT3_SOURCE),
        entry("gpt3-xl", 24, 2048, 16, 2048, 1_300_000_000, GPT3_SOURCE),
    ]
}

/// Alternative configurations reachable by name but not part of the evaluated set.
pub const ALTERNATE_MODELS: &[&str] = &["gpt3-xl-1.15b"];

fn alternates() -> Vec<ModelCatalogEntry> {
    vec![entry(
        "gpt3-xl-1.15b",
        24,
        1920,
        15,
        2048,
        1_150_000_000,
        "1.15B parameter reading of GPT3-XL; 24 layers, 15 heads of 128",
    )]
}

pub fn lookup_model(name: &str) -> Result<ModelCatalogEntry, ConfigError> {
    model_catalog()
        .into_iter()
        .chain(alternates())
        .find(|e| e.config.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| ConfigError::UnknownModel(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_models_within_five_percent() {
        let cat = model_catalog();
        assert_eq!(cat.len(), 8);
        for e in cat.iter().chain(alternates().iter()) {
            e.config.validate().unwrap();
            let p = e.config.param_count() as f64;
            let rel = (p - e.published_params as f64).abs() / e.published_params as f64;
            assert!(rel < 0.05, "{}: {p} vs {}", e.config.name, e.published_params);
        }
    }

    #[test]
    fn named_lookups() {
        let xl = lookup_model("gpt3-xl").unwrap().config;
        let p = xl.param_count() as f64;
        assert!((1.15e9..=1.4e9).contains(&p));
        assert_eq!(lookup_model("gpt2-xl").unwrap().config.d_head, 64);
        let s = lookup_model("gpt3-small").unwrap().config;
        assert_eq!((s.d_model, s.num_heads), (768, 12));
        assert!(lookup_model("gpt5").is_err());
        let alt = lookup_model("gpt3-xl-1.15b").unwrap().config;
        assert!((1.15e9..=1.4e9).contains(&(alt.param_count() as f64)));
    }
}
