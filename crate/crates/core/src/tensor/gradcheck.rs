use super::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("function is not deterministic: {first} vs {second} at the same point")]
    OracleViolation { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Added to the first analytic gradient entry before comparison. Test hook
    /// for confirming that the checker notices a wrong gradient.
    pub analytic_offset: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            analytic_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstEntry {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    pub checked: usize,
    pub value: f64,
}

pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    finite_difference_check_with(
        f,
        params,
        GradCheckOptions {
            h,
            ..Default::default()
        },
    )
}

/// Compares tape gradients of `f` against central differences over every
/// element of every parameter. `f` receives a fresh tape and one leaf per
/// parameter, in order, and returns a scalar node.
pub fn finite_difference_check_with<F>(
    mut f: F,
    params: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(GradCheckError::InvalidStep(opts.h));
    }

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &leaves)?;
    let value = tape.scalar(out);
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    if let Some(first) = analytic.iter_mut().find_map(|g| g.first_mut()) {
        *first += opts.analytic_offset;
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut eval = |work: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = work.iter().map(|p| tape.constant(p)).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.scalar(out))
    };

    let again = eval(&work)?;
    if again.to_bits() != value.to_bits() {
        return Err(GradCheckError::OracleViolation {
            first: value,
            second: again,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        value,
    };
    for pi in 0..work.len() {
        for (ei, &a) in analytic[pi].iter().enumerate() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + opts.h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - opts.h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some(WorstEntry {
                    param: pi,
                    element: ei,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
