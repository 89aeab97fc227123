//! `key = value` configuration shared by every subcommand.
//!
//! Precedence, highest first: command-line flags, the config file, the
//! `SEED` environment variable (seed only), built-in defaults.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::ModelConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Samples written by `gen-data`.
    pub n: usize,
    /// Samples held out from the end of the dataset for evaluation.
    pub eval_samples: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n: 256,
            eval_samples: 16,
        }
    }
}

/// Every key accepted in a config file or via `--set`.
pub const KEYS: &[&str] = &[
    "seed",
    "n",
    "height",
    "width",
    "slots",
    "ref_height",
    "ref_width",
    "points",
    "d_in",
    "sigma",
    "d_model",
    "heads",
    "blocks",
    "lora_rank",
    "lora_scale",
    "n_text",
    "mlp_hidden",
    "target_base",
    "text_base",
    "reference_base",
    "reference_growth",
    "steps",
    "lr",
    "batch_size",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "alpha",
    "beta",
    "enable_sca",
    "enable_md",
    "stop_grad_target_keys",
    "eval_every",
    "eval_time",
    "eval_samples",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for key {key}"))
}

impl Settings {
    /// The small world used by `grad-check`: a 4×4 target, two 2×2
    /// references with two points each, one block of width 8.
    pub fn tiny() -> Self {
        Self {
            synth: SynthConfig {
                height: 4,
                width: 4,
                slots: 2,
                ref_height: 2,
                ref_width: 2,
                points: 2,
                d_in: 8,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                d_in: 8,
                d_model: 8,
                heads: 2,
                blocks: 1,
                lora_rank: 2,
                n_text: 2,
                mlp_hidden: 16,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => {
                let s = parse(key, v)?;
                self.train.seed = s;
                self.synth.seed = s;
            }
            "n" => self.n = parse(key, v)?,
            "height" => self.synth.height = parse(key, v)?,
            "width" => self.synth.width = parse(key, v)?,
            "slots" => self.synth.slots = parse(key, v)?,
            "ref_height" => self.synth.ref_height = parse(key, v)?,
            "ref_width" => self.synth.ref_width = parse(key, v)?,
            "points" => self.synth.points = parse(key, v)?,
            "d_in" => {
                let d = parse(key, v)?;
                self.synth.d_in = d;
                self.model.d_in = d;
            }
            "sigma" => self.synth.sigma = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "blocks" => self.model.blocks = parse(key, v)?,
            "lora_rank" => self.model.lora_rank = parse(key, v)?,
            "lora_scale" => self.model.lora_scale = parse(key, v)?,
            "n_text" => self.model.n_text = parse(key, v)?,
            "mlp_hidden" => self.model.mlp_hidden = parse(key, v)?,
            "target_base" => self.model.target_base = parse(key, v)?,
            "text_base" => self.model.text_base = parse(key, v)?,
            "reference_base" => self.model.reference_base = parse(key, v)?,
            "reference_growth" => self.model.reference_growth = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "eps" => self.train.eps = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "alpha" => self.train.weights.alpha = parse(key, v)?,
            "beta" => self.train.weights.beta = parse(key, v)?,
            "enable_sca" => self.train.enable_sca = parse(key, v)?,
            "enable_md" => self.train.enable_md = parse(key, v)?,
            "stop_grad_target_keys" => self.train.stop_grad_target_keys = parse(key, v)?,
            "eval_every" => self.train.eval_every = parse(key, v)?,
            "eval_time" => self.train.eval_time = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies a config file's text. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected key = value", i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_pair(&mut self, pair: &str) -> Result<(), String> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("override {pair:?} is not key=value"))?;
        self.set(k.trim(), v)
    }

    /// Every key with its current value, in a form [`Settings::apply_text`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let m = &self.model;
        let t = &self.train;
        let values: Vec<String> = vec![
            t.seed.to_string(),
            self.n.to_string(),
            s.height.to_string(),
            s.width.to_string(),
            s.slots.to_string(),
            s.ref_height.to_string(),
            s.ref_width.to_string(),
            s.points.to_string(),
            s.d_in.to_string(),
            s.sigma.to_string(),
            m.d_model.to_string(),
            m.heads.to_string(),
            m.blocks.to_string(),
            m.lora_rank.to_string(),
            m.lora_scale.to_string(),
            m.n_text.to_string(),
            m.mlp_hidden.to_string(),
            m.target_base.to_string(),
            m.text_base.to_string(),
            m.reference_base.to_string(),
            m.reference_growth.to_string(),
            t.steps.to_string(),
            t.lr.to_string(),
            t.batch_size.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.eps.to_string(),
            t.weight_decay.to_string(),
            t.weights.alpha.to_string(),
            t.weights.beta.to_string(),
            t.enable_sca.to_string(),
            t.enable_md.to_string(),
            t.stop_grad_target_keys.to_string(),
            t.eval_every.to_string(),
            t.eval_time.to_string(),
            self.eval_samples.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Applies the three sources to `base` in precedence order.
pub fn resolve(
    base: Settings,
    env_seed: Option<&str>,
    file: Option<(&str, &str)>,
    overrides: &[String],
) -> Result<Settings, String> {
    let mut s = base;
    if let Some(seed) = env_seed {
        s.set("seed", seed).map_err(|e| format!("SEED environment variable: {e}"))?;
    }
    if let Some((origin, text)) = file {
        s.apply_text(text, origin)?;
    }
    for o in overrides {
        s.apply_pair(o)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let mut s = Settings::default();
        s.set("lr", "0.003").unwrap();
        s.set("enable_md", "false").unwrap();
        s.set("d_in", "6").unwrap();
        let text = s.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        let mut back = Settings::default();
        back.apply_text(&text, "t").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.model.d_in, 6);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut s = Settings::default();
        let e = s.apply_text("lr = 1\nlearning_rate = 2\n", "cfg").unwrap_err();
        assert!(e.contains("cfg:2") && e.contains("learning_rate"), "{e}");
        assert!(s.apply_text("steps 3", "cfg").is_err());
        assert!(s.set("steps", "-1").is_err());
        assert!(s.apply_pair("steps").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut s = Settings::default();
        s.apply_text("# header\n\nsteps = 7  # trailing\n", "cfg").unwrap();
        assert_eq!(s.train.steps, 7);
    }

    #[test]
    fn precedence_is_flags_file_env() {
        let s = resolve(Settings::default(), Some("5"), None, &[]).unwrap();
        assert_eq!((s.train.seed, s.synth.seed), (5, 5));
        let s = resolve(Settings::default(), Some("5"), Some(("f", "seed = 6")), &[]).unwrap();
        assert_eq!(s.seed(), 6);
        let s = resolve(Settings::default(), Some("5"), Some(("f", "seed = 6")), &["seed=7".into()]).unwrap();
        assert_eq!(s.seed(), 7);
        assert!(resolve(Settings::default(), Some("x"), None, &[]).is_err());
    }
}
