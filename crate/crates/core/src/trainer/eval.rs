use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::TrainError;
use crate::attention::{ForwardOptions, Model};
use crate::correspondence::Sample;
use crate::objectives::{interpolate, md_aggregate, model_input, sym_kl, velocity_target};
use crate::tensor::Tensor;

/// Evaluation runs at one fixed time with noise fixed per sample position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub time: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { time: 0.2, seed: 0 }
    }
}

/// Averaged attention at one annotated cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMass {
    pub sample: u64,
    pub slot: usize,
    pub u: usize,
    pub v: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: u64,
    pub l_diff: f64,
    pub pairs: Vec<PairMass>,
    /// Effective slots and their aggregates, each `[N_tgt]`.
    pub slots: Vec<usize>,
    pub aggregates: Vec<Tensor>,
    /// Mean ordered-pair symmetric KL; `None` with fewer than two slots.
    pub divergence: Option<f64>,
}

impl SampleEval {
    pub fn mass(&self) -> f64 {
        self.pairs.iter().map(|p| p.mass).sum::<f64>() / self.pairs.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean supervised attention mass.
    pub m: f64,
    /// Mean pairwise aggregate divergence.
    pub d: f64,
    pub l_diff: f64,
    pub samples: Vec<SampleEval>,
}

impl EvalReport {
    pub fn pairs(&self) -> impl Iterator<Item = &PairMass> {
        self.samples.iter().flat_map(|s| &s.pairs)
    }
}

/// Noise for the sample at `position` in an evaluation set.
pub fn eval_noise(seed: u64, position: usize, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + position as u64);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

pub fn evaluate_sample(
    model: &Model,
    sample: &Sample,
    position: usize,
    opts: EvalOptions,
) -> Result<SampleEval, TrainError> {
    let ann = &sample.annotation;
    let noise = eval_noise(opts.seed, position, sample.target_tokens.shape());
    let x_t = interpolate(&sample.target_tokens, &noise, opts.time)?;
    let (velocity, trace) = model.infer(&model_input(sample, &x_t, opts.time), ForwardOptions::default())?;
    let target = velocity_target(&sample.target_tokens, &noise)?;
    let l_diff = velocity
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / target.numel() as f64;

    let slots = ann.effective_slots();
    let a = &trace.averaged;
    let mut pairs = Vec::new();
    for &k in &slots {
        for &(u, v) in ann.set(k).expect("effective slot").pairs() {
            let g = ann
                .global_index(k, u)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            pairs.push(PairMass {
                sample: sample.id,
                slot: k,
                u,
                v,
                mass: a.at(g, v),
            });
        }
    }
    let aggregates = slots
        .iter()
        .map(|&k| md_aggregate(a, ann, k))
        .collect::<Result<Vec<_>, _>>()?;
    let divergence = if aggregates.len() < 2 {
        None
    } else {
        let k = aggregates.len();
        let mut sum = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    sum += sym_kl(aggregates[i].data(), aggregates[j].data())?;
                }
            }
        }
        Some(sum / (k * (k - 1)) as f64)
    };
    Ok(SampleEval {
        id: sample.id,
        l_diff,
        pairs,
        slots,
        aggregates,
        divergence,
    })
}

/// Per-sample M, D and flow-matching loss, averaged over samples. D averages
/// only samples with at least two effective slots.
pub fn evaluate(model: &Model, dataset: &[Sample], opts: EvalOptions) -> Result<EvalReport, TrainError> {
    let samples = dataset
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_sample(model, s, i, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let n = samples.len().max(1) as f64;
    let m = samples.iter().map(SampleEval::mass).sum::<f64>() / n;
    let l_diff = samples.iter().map(|s| s.l_diff).sum::<f64>() / n;
    let divs: Vec<f64> = samples.iter().filter_map(|s| s.divergence).collect();
    let d = divs.iter().sum::<f64>() / divs.len().max(1) as f64;
    Ok(EvalReport {
        m,
        d,
        l_diff,
        samples,
    })
}
