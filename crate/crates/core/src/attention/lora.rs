use super::ModelError;
use crate::tensor::{matmul, Tape, Tensor, Var};

/// Low-rank delta `scale * B·A` on a `d×d` projection. Tokens are rows, so a
/// projected token is `x·(W + scale·B·A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[r×d]`
    pub a: Tensor,
    /// `[d×r]`
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `W + scale·B·A`, materialized.
    pub fn merged(&self, w: &Tensor) -> Result<Tensor, ModelError> {
        let ba = matmul(&self.b, &self.a)?;
        let mut out = w.clone();
        if out.shape() != ba.shape() {
            return Err(ModelError::Shape(format!(
                "LoRA delta {:?} does not match weight {:?}",
                ba.shape(),
                w.shape()
            )));
        }
        for (o, d) in out.data_mut().iter_mut().zip(ba.data()) {
            *o += self.scale * d;
        }
        Ok(out)
    }
}

/// Projection and MLP weights of one branch in one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

/// Tape handles for one adapter.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

pub(crate) fn linear_lora(
    tape: &mut Tape,
    x: Var,
    w: Var,
    lora: Option<LoraVars>,
) -> Result<Var, ModelError> {
    let base = tape.matmul(x, w)?;
    let Some(l) = lora else {
        return Ok(base);
    };
    let xb = tape.matmul(x, l.b)?;
    let delta = tape.matmul(xb, l.a)?;
    let delta = tape.scale(delta, l.scale);
    Ok(tape.add(base, delta)?)
}

/// `(Q, K, V)` of `tokens[N×d]`; with `lora`, each projection uses
/// `W + s·B·A`.
pub fn project_qkv(
    tokens: &Tensor,
    weights: &BranchWeights,
    lora: Option<&LoraSet>,
) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let (_, width) = tokens.dims2()?;
    let d = weights.wq.shape()[0];
    if width != d {
        return Err(ModelError::Shape(format!(
            "token width {width} does not match projection width {d}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(tokens);
    let mut project = |w: &Tensor, adapter: Option<&LoraAdapter>| -> Result<Tensor, ModelError> {
        let wv = tape.constant(w);
        let lv = adapter.map(|ad| LoraVars {
            a: tape.constant(&ad.a),
            b: tape.constant(&ad.b),
            scale: ad.scale,
        });
        let y = linear_lora(&mut tape, x, wv, lv)?;
        Ok(tape.tensor(y))
    };
    Ok((
        project(&weights.wq, lora.map(|l| &l.q))?,
        project(&weights.wk, lora.map(|l| &l.k))?,
        project(&weights.wv, lora.map(|l| &l.v))?,
    ))
}
