//! Command-line front end.
//!
//! Exit codes: 0 success, 1 semantic failure (invalid data, gradient
//! tolerance, non-finite loss), 2 configuration error, 3 I/O or parse error.

mod export;
mod settings;

pub use export::{encode_pgm, masses_csv, to_gray, CSV_HEADER};
pub use settings::{resolve, Settings, KEYS};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{Model, ModelError};
use crate::correspondence::{load_dataset, scan_dataset, DataError, Sample};
use crate::objectives::{total_loss_var, LossError, LossOptions};
use crate::synth::{generate_dataset, generate_sample, SynthError};
use crate::tensor::{finite_difference_check_with, GradCheckOptions, TensorError};
use crate::trainer::{
    ablation_run, evaluate, load_checkpoint, named_params, save_checkpoint, split_holdout, train,
    eval_noise, TrainError, Variant,
};

#[derive(Debug, Parser)]
#[command(name = "mosaic", version, about = "Toy multi-reference attention supervision")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every record of a dataset.
    ValidateDataset {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the full training loss on a tiny world.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Train one model; writes metrics.csv, checkpoint.bin and config.txt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: TrainKnobs,
    },
    /// Train baseline, +SCA and +SCA+MD from one seed; writes ablation.csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: TrainKnobs,
    },
    /// Export per-slot attention maps (PGM) and supervised-cell masses (CSV).
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Export only the first N evaluated samples' maps.
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Debug, clap::Args)]
struct TrainKnobs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Leave the correspondence loss out of the total.
    #[arg(long)]
    no_sca: bool,
    /// Leave the disentanglement loss out of the total.
    #[arg(long)]
    no_md: bool,
    /// Stop attention-loss gradients at target keys.
    #[arg(long)]
    stop_grad: bool,
}

impl TrainKnobs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(v) = self.steps {
            out.push(format!("steps={v}"));
        }
        if let Some(v) = self.lr {
            out.push(format!("lr={v}"));
        }
        if let Some(v) = self.alpha {
            out.push(format!("alpha={v}"));
        }
        if let Some(v) = self.beta {
            out.push(format!("beta={v}"));
        }
        if let Some(v) = self.eval_samples {
            out.push(format!("eval_samples={v}"));
        }
        if self.no_sca {
            out.push("enable_sca=false".into());
        }
        if self.no_md {
            out.push("enable_md=false".into());
        }
        if self.stop_grad {
            out.push("stop_grad_target_keys=true".into());
        }
        out
    }
}

#[derive(Debug)]
pub enum CliError {
    Semantic(String),
    Config(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Semantic(_) => 1,
            Self::Config(_) => 2,
            Self::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Semantic(m) | Self::Config(m) | Self::Io(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Parse { .. } => Self::Io(e.to_string()),
            _ => Self::Semantic(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => Self::Config(e.to_string()),
            SynthError::Data(d) => d.into(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::Config(e.to_string()),
            _ => Self::Semantic(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Model(m) => m.into(),
            _ => Self::Semantic(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::Config(e.to_string()),
            TrainError::Io { .. } => Self::Io(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Loss(l) => l.into(),
            _ => Self::Semantic(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn settings_for(cli: &Cli, base: Settings, extra: Vec<String>) -> Result<Settings, CliError> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| io_err(p, e))?),
        None => None,
    };
    let origin = cli.config.as_ref().map(|p| p.display().to_string());
    let file = origin.as_deref().zip(text.as_deref());
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(extra);
    let env = std::env::var("SEED").ok();
    let s = resolve(base, env.as_deref(), file, &overrides).map_err(CliError::Config)?;
    s.model.validate()?;
    if s.model.d_in != s.synth.d_in {
        return Err(CliError::Config("d_in differs between data and model".into()));
    }
    Ok(s)
}

fn load(path: &Path, s: &Settings) -> Result<Vec<Sample>, CliError> {
    let data = load_dataset(path)?;
    if let Some(bad) = data.iter().find(|x| x.feature_dim() != s.model.d_in) {
        return Err(CliError::Config(format!(
            "sample {} has feature dimension {} but d_in = {}",
            bad.id,
            bad.feature_dim(),
            s.model.d_in
        )));
    }
    Ok(data)
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn gen_data(cli: &Cli, n: Option<usize>, out: &Path) -> Result<(), CliError> {
    let extra = n.map(|n| vec![format!("n={n}")]).unwrap_or_default();
    let s = settings_for(cli, Settings::default(), extra)?;
    s.synth.validate()?;
    generate_dataset(&s.synth, s.n, out)?;
    println!("wrote {} samples to {}", s.n, out.display());
    Ok(())
}

fn validate_dataset(data: &Path) -> Result<(), CliError> {
    let checks = scan_dataset(data)?;
    let mut bad = 0;
    for c in &checks {
        if let Err(e) = &c.outcome {
            bad += 1;
            println!("line {}: sample {}: {e}", c.line, c.id);
        }
    }
    println!("{} records, {bad} invalid", checks.len());
    if bad > 0 {
        return Err(CliError::Semantic(format!("{bad} invalid records")));
    }
    Ok(())
}

fn grad_check(cli: &Cli, h: f64, corrupt: bool) -> Result<(), CliError> {
    let s = settings_for(cli, Settings::tiny(), Vec::new())?;
    s.synth.validate()?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(CliError::Config(format!("step h = {h} must be positive")));
    }
    let tol = h.max(1e-5);
    let start = Instant::now();
    let sample = generate_sample(&s.synth, 0)?;
    let mut model = Model::new(s.model.clone(), s.seed())?;
    // Perturb every weight so zero-initialized paths are exercised too.
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed().wrapping_add(1));
    let dist = Normal::new(0.0, 0.3).expect("valid std");
    for p in model.params_mut() {
        for x in p.data_mut() {
            *x += dist.sample(&mut rng);
        }
    }
    let noise = eval_noise(s.seed(), 0, sample.target_tokens.shape());
    let opts = LossOptions {
        stop_grad_target_keys: false,
        ..s.train.loss_options()
    };
    let report = finite_difference_check_with(
        |tape, vars| {
            total_loss_var(tape, &model, vars, &sample, 0.35, &noise, s.train.weights, opts)
                .map(|(total, _)| total)
                .map_err(|e| TensorError::Contract(e.to_string()))
        },
        model.params(),
        GradCheckOptions {
            h,
            analytic_offset: if corrupt { 1.0 } else { 0.0 },
        },
    )
    .map_err(|e| CliError::Semantic(e.to_string()))?;
    println!(
        "max relative error {:e} over {} entries (tolerance {tol:e}, h {h:e}, {:.2}s)",
        report.max_rel_error,
        report.checked,
        start.elapsed().as_secs_f64()
    );
    if let Some(w) = report.worst {
        println!(
            "worst parameter {}[{}]: analytic {:e}, numeric {:e}",
            model.names()[w.param],
            w.element,
            w.analytic,
            w.numeric
        );
    }
    if report.max_rel_error < tol {
        Ok(())
    } else {
        Err(CliError::Semantic(format!(
            "gradient check failed: {:e} >= {tol:e}",
            report.max_rel_error
        )))
    }
}

fn run_train(cli: &Cli, data: &Path, out: &Path, knobs: &TrainKnobs) -> Result<(), CliError> {
    let s = settings_for(cli, Settings::default(), knobs.overrides())?;
    s.train.validate()?;
    let dataset = load(data, &s)?;
    let (train_set, eval_set) = split_holdout(&dataset, s.eval_samples);
    create_dir(out)?;
    let mut model = Model::new(s.model.clone(), s.seed())?;
    let history = train(&mut model, train_set, eval_set, &s.train)?;
    write_file(&out.join("metrics.csv"), history.to_log().as_bytes())?;
    save_checkpoint(&out.join("checkpoint.bin"), &named_params(&model))?;
    write_file(&out.join("config.txt"), s.to_text().as_bytes())?;
    if let Some(r) = history.final_eval {
        println!("final M {} D {} l_diff {}", r.m, r.d, r.l_diff);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_ablate(cli: &Cli, data: &Path, out: &Path, knobs: &TrainKnobs) -> Result<(), CliError> {
    let s = settings_for(cli, Settings::default(), knobs.overrides())?;
    s.train.validate()?;
    let dataset = load(data, &s)?;
    let (train_set, eval_set) = split_holdout(&dataset, s.eval_samples);
    create_dir(out)?;
    let table = ablation_run(&s.model, train_set, eval_set, &s.train, &Variant::standard(s.train.weights))?;
    let csv = table.to_csv();
    write_file(&out.join("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn export_attn(
    cli: &Cli,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    limit: Option<usize>,
) -> Result<(), CliError> {
    let s = settings_for(cli, Settings::default(), Vec::new())?;
    let dataset = load(data, &s)?;
    let mut model = Model::new(s.model.clone(), s.seed())?;
    model.load_params(load_checkpoint(checkpoint)?)?;
    let (_, eval_set) = split_holdout(&dataset, s.eval_samples);
    let eval_set = if eval_set.is_empty() { &dataset[..] } else { eval_set };
    let report = evaluate(&model, eval_set, s.train.eval_options())?;
    create_dir(out)?;
    let mut maps = 0;
    for (sample, ev) in eval_set.iter().zip(&report.samples).take(limit.unwrap_or(usize::MAX)) {
        for (slot, agg) in ev.slots.iter().zip(&ev.aggregates) {
            let pgm = encode_pgm(sample.target_grid, &to_gray(agg.data()));
            write_file(&out.join(format!("attn_s{}_k{slot}.pgm", sample.id)), &pgm)?;
            maps += 1;
        }
    }
    write_file(&out.join("attention.csv"), masses_csv(&report).as_bytes())?;
    println!("wrote {maps} maps and attention.csv to {} (M {})", out.display(), report.m);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { n, out } => gen_data(cli, *n, out),
        Command::ValidateDataset { data } => validate_dataset(data),
        Command::GradCheck { h, corrupt_grad } => grad_check(cli, *h, *corrupt_grad),
        Command::Train { data, out, knobs } => run_train(cli, data, out, knobs),
        Command::Ablate { data, out, knobs } => run_ablate(cli, data, out, knobs),
        Command::ExportAttn {
            checkpoint,
            data,
            out,
            samples,
        } => export_attn(cli, checkpoint, data, out, *samples),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
