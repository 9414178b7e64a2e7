//! Compiler, functional simulator and analytical performance model for a
//! multi-core FPGA LLM accelerator with N:M sparse DSP chains, mixed-precision
//! weights and length-bucketed instruction libraries.

pub mod error;
pub mod isa;
pub mod compression;
pub mod model;
pub mod compiler;
pub mod sim;
pub mod perf;

pub use error::{Error, Result};
