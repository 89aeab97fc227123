//! Joint multi-modal attention over target, text and reference tokens.
//!
//! The stack is a toy diffusion transformer: one weight set shared by the
//! target and reference latents, a separate one for text, and a LoRA delta
//! on the reference query/key/value projections. Every block records the
//! reference-query × target-key logits renormalized over target keys; the
//! mean of those slices over blocks and heads is the supervised attention
//! map.

mod lora;
mod model;
mod rope;

pub use lora::{project_qkv, BranchWeights, LoraAdapter, LoraSet};
pub use model::{ForwardOptions, ForwardOutput, Model, ModelInput};
pub use rope::{rope_apply, RopeConfig, RotaryTable};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{0}")]
    Contract(String),
}

/// Token stream a row belongs to. Reference slots are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Target,
    Text,
    Reference(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub n_text: usize,
    pub mlp_hidden: usize,
    pub target_base: f64,
    pub text_base: f64,
    pub reference_base: f64,
    pub reference_growth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_model: 32,
            heads: 4,
            blocks: 2,
            lora_rank: 4,
            lora_scale: 1.0,
            n_text: 4,
            mlp_hidden: 128,
            target_base: 10_000.0,
            text_base: 10_000.0,
            reference_base: 10_000.0,
            reference_growth: 1.5,
        }
    }
}

impl ModelConfig {
    /// Small enough to finite-difference every parameter.
    pub fn tiny() -> Self {
        Self {
            d_in: 4,
            d_model: 8,
            heads: 2,
            blocks: 1,
            lora_rank: 2,
            lora_scale: 1.0,
            n_text: 2,
            mlp_hidden: 16,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            head_dim: self.head_dim(),
            target_base: self.target_base,
            text_base: self.text_base,
            reference_base: self.reference_base,
            reference_growth: self.reference_growth,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("lora_rank", self.lora_rank),
            ("n_text", self.n_text),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.lora_scale.is_finite() {
            return Err(ModelError::Config("lora_scale must be finite".into()));
        }
        self.rope().validate()
    }
}

/// Per-(block, head) reference→target attention and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// `(block, head, [N_ref × N_tgt])`, in recording order.
    pub slices: Vec<(usize, usize, Tensor)>,
    pub averaged: Tensor,
}

/// Elementwise mean of every recorded slice.
pub fn average_trace(trace: &AttentionTrace) -> Result<Tensor, ModelError> {
    let (_, _, first) = trace
        .slices
        .first()
        .ok_or_else(|| ModelError::Contract("attention trace is empty".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for (_, _, s) in &trace.slices {
        if s.shape() != first.shape() {
            return Err(ModelError::Shape(format!(
                "trace slices {:?} and {:?} differ",
                first.shape(),
                s.shape()
            )));
        }
        for (a, x) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += x;
        }
    }
    let n = trace.slices.len() as f64;
    for a in acc.data_mut() {
        *a /= n;
    }
    Ok(acc)
}

/// Stacks reference token grids in slot order. Padded slots contribute zero
/// rows of their own length.
pub fn concat_references(refs: &[Tensor], valid_mask: &[bool]) -> Result<Tensor, ModelError> {
    if refs.len() != valid_mask.len() {
        return Err(ModelError::Shape(format!(
            "{} reference grids but {} mask entries",
            refs.len(),
            valid_mask.len()
        )));
    }
    let first = refs
        .first()
        .ok_or_else(|| ModelError::Contract("no reference slots".into()))?;
    let (_, d) = first.dims2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    for (r, &valid) in refs.iter().zip(valid_mask) {
        let (n, w) = r.dims2()?;
        if w != d {
            return Err(ModelError::Shape(format!(
                "reference width {w} does not match {d}"
            )));
        }
        rows += n;
        if valid {
            data.extend_from_slice(r.data());
        } else {
            data.extend(std::iter::repeat_n(0.0, n * d));
        }
    }
    Ok(Tensor::new(vec![rows, d], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, d: usize, base: f64) -> Tensor {
        Tensor::from_fn(&[rows, d], |i| base + i as f64)
    }

    #[test]
    fn concat_orders_slots() {
        let out = concat_references(&[t(4, 2, 0.0), t(4, 2, 100.0)], &[true, true]).unwrap();
        assert_eq!(out.shape(), &[8, 2]);
        assert_eq!(out.row(0), &[0.0, 1.0]);
        assert_eq!(out.row(4), &[100.0, 101.0]);
    }

    #[test]
    fn concat_single_is_identity() {
        let a = t(3, 2, 5.0);
        assert_eq!(concat_references(std::slice::from_ref(&a), &[true]).unwrap(), a);
    }

    #[test]
    fn padded_slot_rows_are_zero() {
        let refs = [t(4, 2, 1.0), t(4, 2, 1.0), t(4, 2, 1.0)];
        let out = concat_references(&refs, &[true, true, false]).unwrap();
        assert!((8..12).all(|r| out.row(r).iter().all(|&x| x == 0.0)));
        assert!(out.row(7).iter().all(|&x| x != 0.0));
    }

    #[test]
    fn average_examples() {
        let one = Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap();
        let tr = AttentionTrace {
            slices: vec![(0, 0, one.clone())],
            averaged: one.clone(),
        };
        assert_eq!(average_trace(&tr).unwrap(), one);

        let tr = AttentionTrace {
            slices: vec![
                (0, 0, Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()),
                (1, 0, Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap()),
            ],
            averaged: one,
        };
        assert_eq!(average_trace(&tr).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_trace_is_contract_error() {
        let tr = AttentionTrace {
            slices: vec![],
            averaged: Tensor::zeros(&[1, 1]),
        };
        assert!(matches!(average_trace(&tr), Err(ModelError::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            d_model: 24,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err(), "head dim 6 is not rotary-compatible");
    }
}
