//! BF16 functional model of the ASIC arithmetic.

mod approx;
mod bf16;
pub mod golden;
mod ops;
pub mod oracle;

pub use approx::{fast_inv_sqrt, gelu, nr_divide, nr_reciprocal, taylor_exp, taylor_tanh, TANH_TAYLOR_LIMIT};
pub use bf16::{bf16_round, Bf16};
pub use golden::{golden_forward, GptWeights, KvCache, LayerWeights, TokenStep};
pub use ops::{
    add_vec, argmax, attention_head, attention_scale, bf16_sum, gelu_vec, layernorm, pim_dot, segmented_dot, softmax,
    softmax_scaled, vmm, Bf16Matrix, Bf16Vector, MAC_LANES,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("division by zero")]
    DivideByZero,
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
