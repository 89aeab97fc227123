//! Multi-reference attention supervision on a toy diffusion transformer.

pub mod tensor;
pub mod correspondence;
pub mod attention;
pub mod objectives;
pub mod synth;
pub mod trainer;
pub mod cli;
