//! Training objectives: flow-matching regression, correspondence attention
//! loss, multi-reference disentanglement loss, and their weighted sum.
//!
//! Every loss has a tape form (`*_var`) used in training and a value form
//! that builds a throwaway tape.

use rand::Rng;
use thiserror::Error;

use crate::attention::{ForwardOptions, Model, ModelError, ModelInput};
use crate::correspondence::{validate_disjointness, DisjointnessReport, Sample, SampleAnnotation};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Floor applied to probabilities before every log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Flow-matching times are drawn from this open interval.
pub const TIME_RANGE: (f64, f64) = (0.001, 0.999);

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("annotation violates disjointness:{0}")]
    Disjointness(DisjointnessReport),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.6,
        }
    }
}

/// Switches for [`total_loss`]. A disabled term is still evaluated and
/// reported but never enters the total or its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossOptions {
    pub enable_sca: bool,
    pub enable_md: bool,
    pub stop_grad_target_keys: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            enable_sca: true,
            enable_md: true,
            stop_grad_target_keys: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_diff: f64,
    pub l_sca: f64,
    pub l_md: f64,
    pub total: f64,
    /// Effective slots, 1-based, in the order of `aggregates`.
    pub slots: Vec<usize>,
    /// Per-slot aggregate over the target grid, each `[N_tgt]`.
    pub aggregates: Vec<Tensor>,
}

/// `l_diff + alpha * l_sca + beta * l_md`.
pub fn combine(l_diff: f64, l_sca: f64, l_md: f64, weights: LossWeights) -> f64 {
    l_diff + weights.alpha * l_sca + weights.beta * l_md
}

fn check_annotation(ann: &SampleAnnotation) -> Result<(), LossError> {
    let report = validate_disjointness(ann);
    if report.is_ok() {
        Ok(())
    } else {
        Err(LossError::Disjointness(report))
    }
}

fn check_attention(tape: &Tape, avg: Var, ann: &SampleAnnotation) -> Result<usize, LossError> {
    let shape = tape.shape(avg);
    let expect = [ann.total_ref_tokens(), ann.target_token_count()];
    if shape != expect {
        return Err(LossError::Shape(format!(
            "attention map {shape:?} does not match annotation {expect:?}"
        )));
    }
    Ok(expect[1])
}

fn rows_of(ann: &SampleAnnotation, slot: usize) -> Result<Vec<usize>, LossError> {
    let set = ann
        .set(slot)
        .ok_or_else(|| LossError::Contract(format!("slot {slot} does not exist")))?;
    if !ann.valid_mask()[slot - 1] || set.is_empty() {
        return Err(LossError::Contract(format!("slot {slot} has no correspondence points")));
    }
    set.pairs()
        .iter()
        .map(|&(u, _)| ann.global_index(slot, u).map_err(|e| LossError::Contract(e.to_string())))
        .collect()
}

/// Negative log attention at every annotated cell, averaged per slot and then
/// over effective slots.
pub fn sca_loss_var(tape: &mut Tape, avg: Var, ann: &SampleAnnotation) -> Result<Var, LossError> {
    check_annotation(ann)?;
    let n_tgt = check_attention(tape, avg, ann)?;
    let slots = ann.effective_slots();
    if slots.is_empty() {
        return Err(LossError::Contract("no valid correspondence points".into()));
    }
    let mut acc: Option<Var> = None;
    for &slot in &slots {
        let rows = rows_of(ann, slot)?;
        let cells: Vec<usize> = rows
            .iter()
            .zip(ann.set(slot).expect("checked").pairs())
            .map(|(&g, &(_, v))| g * n_tgt + v)
            .collect();
        let picked = tape.gather(avg, &cells)?;
        let floored = tape.clamp_min(picked, PROB_FLOOR);
        let logs = tape.log(floored);
        let m = tape.mean(logs);
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m)?,
        });
    }
    let total = acc.expect("at least one slot");
    Ok(tape.scale(total, -1.0 / slots.len() as f64))
}

/// Mean of the slot's attention rows, L1-normalized; `[1 × N_tgt]`.
pub fn md_aggregate_var(
    tape: &mut Tape,
    avg: Var,
    ann: &SampleAnnotation,
    slot: usize,
) -> Result<Var, LossError> {
    check_attention(tape, avg, ann)?;
    let rows = rows_of(ann, slot)?;
    let picked = tape.gather_rows(avg, &rows)?;
    let mean = tape.mean_rows(picked)?;
    let z = tape.sum(mean);
    Ok(tape.div_scalar(mean, z)?)
}

/// `½ Σ (a − b)(log a' − log b')` with `'` the floored value.
pub fn sym_kl_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var, LossError> {
    let fa = tape.clamp_min(a, PROB_FLOOR);
    let fb = tape.clamp_min(b, PROB_FLOOR);
    let la = tape.log(fa);
    let lb = tape.log(fb);
    let dl = tape.sub(la, lb)?;
    let dp = tape.sub(a, b)?;
    let prod = tape.mul(dp, dl)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 0.5))
}

/// Negated mean symmetric KL over ordered pairs; a constant zero when fewer
/// than two aggregates are given.
pub fn md_loss_var(tape: &mut Tape, aggregates: &[Var]) -> Result<Var, LossError> {
    let k = aggregates.len();
    if k < 2 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = sym_kl_var(tape, aggregates[i], aggregates[j])?;
            acc = Some(match acc {
                None => d,
                Some(a) => tape.add(a, d)?,
            });
        }
    }
    let total = acc.expect("k >= 2");
    Ok(tape.scale(total, -1.0 / (k * (k - 1)) as f64))
}

/// Mean squared error between `pred` and the velocity `noise − clean`.
pub fn flow_matching_loss_var(
    tape: &mut Tape,
    pred: Var,
    clean: &Tensor,
    noise: &Tensor,
) -> Result<Var, LossError> {
    let target = velocity_target(clean, noise)?;
    if tape.shape(pred) != target.shape() {
        return Err(LossError::Shape(format!(
            "prediction {:?} does not match target {:?}",
            tape.shape(pred),
            target.shape()
        )));
    }
    let t = tape.constant(&target);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn sca_loss(avg: &Tensor, ann: &SampleAnnotation) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(avg);
    let l = sca_loss_var(&mut tape, a, ann)?;
    Ok(tape.scalar(l))
}

/// The slot's aggregate as a rank-1 `[N_tgt]` tensor.
pub fn md_aggregate(avg: &Tensor, ann: &SampleAnnotation, slot: usize) -> Result<Tensor, LossError> {
    let mut tape = Tape::new();
    let a = tape.constant(avg);
    let g = md_aggregate_var(&mut tape, a, ann, slot)?;
    let n = tape.shape(g)[1];
    Ok(tape.tensor(g).reshape(vec![n])?)
}

pub fn sym_kl(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::Shape(format!(
            "distributions of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut tape = Tape::new();
    let va = tape.constant(&Tensor::new(vec![a.len()], a.to_vec())?);
    let vb = tape.constant(&Tensor::new(vec![b.len()], b.to_vec())?);
    let d = sym_kl_var(&mut tape, va, vb)?;
    Ok(tape.scalar(d))
}

pub fn md_loss(aggregates: &[Tensor]) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = aggregates.iter().map(|a| tape.constant(a)).collect();
    if let Some(w) = aggregates.windows(2).find(|w| w[0].shape() != w[1].shape()) {
        return Err(LossError::Shape(format!(
            "aggregates {:?} and {:?} differ",
            w[0].shape(),
            w[1].shape()
        )));
    }
    let l = md_loss_var(&mut tape, &vars)?;
    Ok(tape.scalar(l))
}

/// `noise − clean`.
pub fn velocity_target(clean: &Tensor, noise: &Tensor) -> Result<Tensor, LossError> {
    if clean.shape() != noise.shape() {
        return Err(LossError::Shape(format!(
            "noise {:?} does not match clean tokens {:?}",
            noise.shape(),
            clean.shape()
        )));
    }
    let data = clean.data().iter().zip(noise.data()).map(|(c, n)| n - c).collect();
    Ok(Tensor::new(clean.shape().to_vec(), data)?)
}

/// `(1 − t)·clean + t·noise`.
pub fn interpolate(clean: &Tensor, noise: &Tensor, t: f64) -> Result<Tensor, LossError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(LossError::Contract(format!("time {t} outside (0, 1)")));
    }
    if clean.shape() != noise.shape() {
        return Err(LossError::Shape(format!(
            "noise {:?} does not match clean tokens {:?}",
            noise.shape(),
            clean.shape()
        )));
    }
    let data = clean
        .data()
        .iter()
        .zip(noise.data())
        .map(|(c, n)| (1.0 - t) * c + t * n)
        .collect();
    Ok(Tensor::new(clean.shape().to_vec(), data)?)
}

pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(TIME_RANGE.0..TIME_RANGE.1)
}

/// Flow-matching loss of `model` on one sample's target at time `t`.
pub fn flow_matching_loss(model: &Model, sample: &Sample, t: f64, noise: &Tensor) -> Result<f64, LossError> {
    let x_t = interpolate(&sample.target_tokens, noise, t)?;
    let input = model_input(sample, &x_t, t);
    let (velocity, _) = model.infer(&input, ForwardOptions::default())?;
    let mut tape = Tape::new();
    let p = tape.constant(&velocity);
    let l = flow_matching_loss_var(&mut tape, p, &sample.target_tokens, noise)?;
    Ok(tape.scalar(l))
}

pub fn model_input<'a>(sample: &'a Sample, noisy_target: &'a Tensor, t: f64) -> ModelInput<'a> {
    ModelInput {
        noisy_target,
        time: t,
        target_grid: sample.target_grid,
        refs: &sample.ref_tokens,
        ref_grids: &sample.ref_grids,
        valid_mask: sample.annotation.valid_mask(),
    }
}

/// Loss terms of one sample on an existing tape. Returns the total as a tape
/// scalar together with the value report.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var(
    tape: &mut Tape,
    model: &Model,
    vars: &[Var],
    sample: &Sample,
    t: f64,
    noise: &Tensor,
    weights: LossWeights,
    opts: LossOptions,
) -> Result<(Var, LossReport), LossError> {
    let ann = &sample.annotation;
    check_annotation(ann)?;
    let x_t = interpolate(&sample.target_tokens, noise, t)?;
    let input = model_input(sample, &x_t, t);
    let out = model.forward(
        tape,
        vars,
        &input,
        ForwardOptions {
            stop_grad_target_keys: opts.stop_grad_target_keys,
        },
    )?;
    let l_diff = flow_matching_loss_var(tape, out.velocity, &sample.target_tokens, noise)?;
    let l_sca = sca_loss_var(tape, out.average, ann)?;
    let slots = ann.effective_slots();
    let aggs = slots
        .iter()
        .map(|&s| md_aggregate_var(tape, out.average, ann, s))
        .collect::<Result<Vec<_>, _>>()?;
    let l_md = md_loss_var(tape, &aggs)?;

    let mut total = l_diff;
    if opts.enable_sca {
        let term = tape.scale(l_sca, weights.alpha);
        total = tape.add(total, term)?;
    }
    if opts.enable_md {
        let term = tape.scale(l_md, weights.beta);
        total = tape.add(total, term)?;
    }
    let report = LossReport {
        l_diff: tape.scalar(l_diff),
        l_sca: tape.scalar(l_sca),
        l_md: tape.scalar(l_md),
        total: tape.scalar(total),
        slots,
        aggregates: aggs
            .iter()
            .map(|&a| {
                let n = tape.shape(a)[1];
                tape.tensor(a).reshape(vec![n])
            })
            .collect::<Result<_, _>>()?,
    };
    Ok((total, report))
}

/// Value-only [`total_loss_var`].
pub fn total_loss(
    model: &Model,
    sample: &Sample,
    t: f64,
    noise: &Tensor,
    weights: LossWeights,
    opts: LossOptions,
) -> Result<LossReport, LossError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let (_, report) = total_loss_var(&mut tape, model, &vars, sample, t, noise, weights, opts)?;
    Ok(report)
}
