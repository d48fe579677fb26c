//! Cycle-accurate simulator of a GDDR6 processing-in-memory GPT accelerator with a
//! companion ASIC, plus a bit-exact BF16 functional model of the ASIC arithmetic.

pub mod compiler;
pub mod config;
pub mod energy;
pub mod engine;
pub mod mapper;
pub mod numerics;
pub mod report;
pub mod shadow;
