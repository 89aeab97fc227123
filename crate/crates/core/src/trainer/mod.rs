//! Optimization loop, evaluation metrics, ablations and checkpoints.

mod adam;
mod checkpoint;
mod eval;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use eval::{eval_noise, evaluate, evaluate_sample, EvalOptions, EvalReport, PairMass, SampleEval};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::attention::{Model, ModelConfig, ModelError};
use crate::correspondence::Sample;
use crate::objectives::{sample_time, total_loss_var, LossError, LossOptions, LossReport, LossWeights};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {term} at step {step}")]
    NonFinite { step: usize, term: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub enable_sca: bool,
    pub enable_md: bool,
    pub stop_grad_target_keys: bool,
    /// Evaluate every this many steps and after the last step; 0 evaluates
    /// only after the last step.
    pub eval_every: usize,
    pub eval_time: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            weights: LossWeights::default(),
            seed: 0,
            enable_sca: true,
            enable_md: true,
            stop_grad_target_keys: false,
            eval_every: 100,
            eval_time: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            enable_sca: self.enable_sca,
            enable_md: self.enable_md,
            stop_grad_target_keys: self.stop_grad_target_keys,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            time: self.eval_time,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be finite and nonnegative", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative".into());
        }
        let w = self.weights;
        if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.alpha.is_finite() && w.beta.is_finite()) {
            return bad(format!("loss weights ({}, {}) must be finite and nonnegative", w.alpha, w.beta));
        }
        if !(self.eval_time > 0.0 && self.eval_time < 1.0) {
            return bad(format!("eval_time = {} outside (0, 1)", self.eval_time));
        }
        Ok(())
    }
}

/// One optimizer step's losses, plus metrics on evaluation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_diff: f64,
    pub l_sca: f64,
    pub l_md: f64,
    pub total: f64,
    pub eval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub final_eval: Option<EvalReport>,
}

pub const LOG_HEADER: &str = "step,l_diff,l_sca,l_md,M,D";

impl TrainHistory {
    /// CSV with [`LOG_HEADER`]; `M` and `D` are empty on steps without an
    /// evaluation.
    pub fn to_log(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{},{},{},", r.step, r.l_diff, r.l_sca, r.l_md);
            if let Some((m, d)) = r.eval {
                let _ = write!(out, "{m},{d}");
            } else {
                out.push(',');
            }
            out.push('\n');
        }
        out
    }
}

/// Loss report and per-parameter gradients of the batch-mean total loss.
#[allow(clippy::type_complexity)]
pub fn batch_gradients(
    model: &Model,
    batch: &[(&Sample, f64, Tensor)],
    weights: LossWeights,
    opts: LossOptions,
) -> Result<(Vec<LossReport>, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let mut reports = Vec::with_capacity(batch.len());
    let mut acc = None;
    for (sample, t, noise) in batch {
        let (total, report) = total_loss_var(&mut tape, model, &vars, sample, *t, noise, weights, opts)?;
        reports.push(report);
        acc = Some(match acc {
            None => total,
            Some(a) => tape.add(a, total)?,
        });
    }
    let acc = acc.ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let loss = tape.scale(acc, 1.0 / batch.len() as f64);
    let grads = tape.backward(loss)?;
    let per_param = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    Ok((reports, per_param))
}

fn mean_of(reports: &[LossReport], f: impl Fn(&LossReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

/// Trains `model` in place on `train_set`, evaluating on `eval_set`.
///
/// The run is a pure function of the model's initial weights, the data and
/// `cfg`: batches, times and noise all come from one generator seeded with
/// `cfg.seed`.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    eval_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if cfg.steps > 0 && train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut history = TrainHistory::default();
    for step in 1..=cfg.steps {
        let batch: Vec<(&Sample, f64, Tensor)> = (0..cfg.batch_size)
            .map(|_| {
                let s = &train_set[rng.random_range(0..train_set.len())];
                let t = sample_time(&mut rng);
                let noise = Tensor::from_fn(s.target_tokens.shape(), |_| StandardNormal.sample(&mut rng));
                (s, t, noise)
            })
            .collect();
        let (reports, grads) = batch_gradients(model, &batch, cfg.weights, cfg.loss_options())?;
        let record = StepRecord {
            step,
            l_diff: mean_of(&reports, |r| r.l_diff),
            l_sca: mean_of(&reports, |r| r.l_sca),
            l_md: mean_of(&reports, |r| r.l_md),
            total: mean_of(&reports, |r| r.total),
            eval: None,
        };
        for (term, v) in [
            ("l_diff", record.l_diff),
            ("l_sca", record.l_sca),
            ("l_md", record.l_md),
            ("total", record.total),
        ] {
            if !v.is_finite() {
                return Err(TrainError::NonFinite { step, term });
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step, term: "gradient" });
        }
        opt.step(model.params_mut(), &grads);
        history.records.push(record);

        let due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if due && !eval_set.is_empty() {
            let report = evaluate(model, eval_set, cfg.eval_options())?;
            history.records.last_mut().expect("pushed").eval = Some((report.m, report.d));
            if step == cfg.steps {
                history.final_eval = Some(report);
            }
        }
    }
    Ok(history)
}

/// One row of an ablation: which terms are on and with what weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub enable_sca: bool,
    pub enable_md: bool,
    pub weights: LossWeights,
}

impl Variant {
    pub fn baseline() -> Self {
        Self {
            name: "baseline".into(),
            enable_sca: false,
            enable_md: false,
            weights: LossWeights { alpha: 0.0, beta: 0.0 },
        }
    }

    pub fn sca(alpha: f64) -> Self {
        Self {
            name: "+SCA".into(),
            enable_sca: true,
            enable_md: false,
            weights: LossWeights { alpha, beta: 0.0 },
        }
    }

    pub fn sca_md(weights: LossWeights) -> Self {
        Self {
            name: "+SCA+MD".into(),
            enable_sca: true,
            enable_md: true,
            weights,
        }
    }

    /// Baseline, +SCA and +SCA+MD with the given weights.
    pub fn standard(weights: LossWeights) -> Vec<Self> {
        vec![Self::baseline(), Self::sca(weights.alpha), Self::sca_md(weights)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub m: f64,
    pub d: f64,
    pub l_diff: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,alpha,beta,M,D,l_diff\n");
        for r in &self.rows {
            let w = r.variant.weights;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.variant.name, self.seed, w.alpha, w.beta, r.m, r.d, r.l_diff
            );
        }
        out
    }
}

/// Trains a fresh model per variant from the same seed and reports each
/// run's final evaluation.
pub fn ablation_run(
    model_config: &ModelConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    base: &TrainConfig,
    variants: &[Variant],
) -> Result<AblationTable, TrainError> {
    if eval_set.is_empty() {
        return Err(TrainError::Config("ablation needs a nonempty evaluation set".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = TrainConfig {
            enable_sca: v.enable_sca,
            enable_md: v.enable_md,
            weights: v.weights,
            ..base.clone()
        };
        let mut model = Model::new(model_config.clone(), base.seed)?;
        let history = train(&mut model, train_set, eval_set, &cfg)?;
        let report = match &history.final_eval {
            Some(r) => r.clone(),
            None => evaluate(&model, eval_set, cfg.eval_options())?,
        };
        rows.push(AblationRow {
            variant: v.clone(),
            m: report.m,
            d: report.d,
            l_diff: report.l_diff,
            history,
        });
    }
    Ok(AblationTable { seed: base.seed, rows })
}

/// Splits off the last `n_eval` samples for evaluation. With `n_eval` at
/// least the dataset size, both halves are the whole dataset.
pub fn split_holdout(dataset: &[Sample], n_eval: usize) -> (&[Sample], &[Sample]) {
    if n_eval == 0 {
        return (dataset, &[]);
    }
    if n_eval >= dataset.len() {
        return (dataset, dataset);
    }
    dataset.split_at(dataset.len() - n_eval)
}

/// Named parameters of `model`, ready for [`save_checkpoint`].
pub fn named_params(model: &Model) -> Vec<(String, Tensor)> {
    model
        .names()
        .iter()
        .cloned()
        .zip(model.params().iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_samples, SynthConfig};

    fn small_world() -> (ModelConfig, Vec<Sample>) {
        let synth = SynthConfig {
            height: 4,
            width: 4,
            slots: 2,
            ref_height: 2,
            ref_width: 2,
            points: 2,
            d_in: 4,
            ..SynthConfig::default()
        };
        let model = ModelConfig {
            d_in: 4,
            d_model: 8,
            heads: 2,
            blocks: 1,
            lora_rank: 2,
            n_text: 2,
            mlp_hidden: 16,
            ..ModelConfig::default()
        };
        (model, generate_samples(&synth, 6).unwrap())
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            lr: 1e-2,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let (mc, data) = small_world();
        let mut model = Model::new(mc.clone(), 0).unwrap();
        let before = model.params().to_vec();
        let h = train(&mut model, &data, &data, &quick(0)).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(h.to_log(), format!("{LOG_HEADER}\n"));
        assert_eq!(model.params(), before.as_slice());
    }

    #[test]
    fn zero_lr_step_is_bitwise_identity() {
        let (mc, data) = small_world();
        let mut model = Model::new(mc, 1).unwrap();
        let before: Vec<Vec<u64>> = model.params().iter().map(|p| p.data().iter().map(|x| x.to_bits()).collect()).collect();
        let cfg = TrainConfig { lr: 0.0, ..quick(1) };
        let h = train(&mut model, &data, &data, &cfg).unwrap();
        assert_eq!(h.records.len(), 1);
        let after: Vec<Vec<u64>> = model.params().iter().map(|p| p.data().iter().map(|x| x.to_bits()).collect()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn runs_are_deterministic() {
        let (mc, data) = small_world();
        let run = || {
            let mut model = Model::new(mc.clone(), 2).unwrap();
            let h = train(&mut model, &data[..4], &data[4..], &quick(5)).unwrap();
            (h.to_log(), named_params(&model))
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[1].ends_with(",,"), "no eval on step 1: {}", lines[1]);
        assert!(!lines[2].ends_with(",,"));
        assert!(!lines[5].ends_with(",,"), "final step is evaluated");
    }

    #[test]
    fn disabled_sca_matches_zero_alpha() {
        let (mc, data) = small_world();
        let mut model = Model::new(mc, 3).unwrap();
        // Move off the zero-query init so attention terms carry gradient.
        train(&mut model, &data, &[], &quick(3)).unwrap();
        let noise = Tensor::from_fn(data[0].target_tokens.shape(), |i| (i as f64).sin());
        let batch = [(&data[0], 0.3, noise)];
        let w = LossWeights { alpha: 0.0, beta: 0.6 };
        let (_, g_alpha0) = batch_gradients(&model, &batch, w, LossOptions::default()).unwrap();
        let off = LossOptions { enable_sca: false, ..LossOptions::default() };
        let (_, g_off) = batch_gradients(&model, &batch, LossWeights::default(), off).unwrap();
        for (a, b) in g_alpha0.iter().flatten().zip(g_off.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let (_, g_on) = batch_gradients(&model, &batch, LossWeights::default(), LossOptions::default()).unwrap();
        assert!(g_on.iter().flatten().zip(g_off.iter().flatten()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn untrained_model_has_uniform_mass() {
        let (mc, data) = small_world();
        let model = Model::new(mc, 4).unwrap();
        let r = evaluate(&model, &data, EvalOptions::default()).unwrap();
        assert!((r.m - 1.0 / 16.0).abs() < 1e-6);
        assert!(r.d.abs() < 1e-12);
    }

    #[test]
    fn mass_matches_loop_recomputation() {
        let (mc, data) = small_world();
        let mut model = Model::new(mc, 5).unwrap();
        train(&mut model, &data, &[], &quick(4)).unwrap();
        let opts = EvalOptions { time: 0.3, seed: 9 };
        let r = evaluate(&model, &data, opts).unwrap();
        let mut total = 0.0;
        for (i, s) in data.iter().enumerate() {
            let noise = eval_noise(9, i, s.target_tokens.shape());
            let x_t = crate::objectives::interpolate(&s.target_tokens, &noise, 0.3).unwrap();
            let (_, trace) = model
                .infer(&crate::objectives::model_input(s, &x_t, 0.3), Default::default())
                .unwrap();
            let (mut sum, mut count) = (0.0, 0);
            let counts = s.annotation.ref_token_counts();
            for set in s.annotation.sets() {
                let offset: usize = counts[..set.slot() - 1].iter().sum();
                for &(u, v) in set.pairs() {
                    sum += trace.averaged.at(offset + u, v);
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        assert!((r.m - total / data.len() as f64).abs() < 1e-12);
        assert!(r.m > 0.0 && r.m <= 1.0 && r.d >= 0.0);
    }

    #[test]
    fn nan_aborts_with_step_and_term() {
        let (mc, data) = small_world();
        let mut model = Model::new(mc, 6).unwrap();
        model.param_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
        match train(&mut model, &data, &[], &quick(2)) {
            Err(TrainError::NonFinite { step: 1, term: "l_diff" }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ablation_bookkeeping() {
        let (mc, data) = small_world();
        let t = ablation_run(&mc, &data, &data, &quick(2), &[Variant::baseline()]).unwrap();
        assert_eq!(t.rows.len(), 1);
        let t = ablation_run(&mc, &data, &data, &quick(2), &Variant::standard(LossWeights::default())).unwrap();
        assert_eq!(t.rows.len(), 3);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("0")));
    }

    #[test]
    fn holdout_split() {
        let (_, data) = small_world();
        let (a, b) = split_holdout(&data, 2);
        assert_eq!((a.len(), b.len()), (4, 2));
        assert_eq!(b[0].id, 4);
        let (a, b) = split_holdout(&data, 10);
        assert_eq!((a.len(), b.len()), (6, 6));
        assert!(split_holdout(&data, 0).1.is_empty());
    }
}
