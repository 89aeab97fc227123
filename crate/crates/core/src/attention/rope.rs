//! 2D axial rotary embeddings with a separate frequency base per branch.
//!
//! Each head chunk of width `head_dim` is split in half: the first half
//! rotates with the token's x coordinate, the second with y. Within a half,
//! pair `i` rotates by `pos * base^(-4i / head_dim)`.

use super::{Branch, ModelError};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub target_base: f64,
    pub text_base: f64,
    /// Reference slot `k` uses `reference_base * reference_growth^k`.
    pub reference_base: f64,
    pub reference_growth: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            target_base: 10_000.0,
            text_base: 10_000.0,
            reference_base: 10_000.0,
            reference_growth: 1.5,
        }
    }

    pub fn base(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Target => self.target_base,
            Branch::Text => self.text_base,
            Branch::Reference(k) => self.reference_base * self.reference_growth.powi(k as i32),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(4) {
            return Err(ModelError::Config(format!(
                "rotary head dimension {} is not divisible by 4",
                self.head_dim
            )));
        }
        for b in [self.target_base, self.text_base, self.reference_base, self.reference_growth] {
            if !(b > 0.0 && b.is_finite()) {
                return Err(ModelError::Config(format!("rotary base {b} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-pair cosines and sines for `positions.len()` tokens of width `width`.
#[derive(Debug, Clone, Default)]
pub struct RotaryTable {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RotaryTable {
    pub fn build(
        positions: &[(usize, usize)],
        width: usize,
        config: &RopeConfig,
        branch: Branch,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let hd = config.head_dim;
        if !width.is_multiple_of(hd) {
            return Err(ModelError::Config(format!(
                "width {width} is not a multiple of head dimension {hd}"
            )));
        }
        let base = config.base(branch);
        let quarter = hd / 4;
        let inv_freq: Vec<f64> = (0..quarter)
            .map(|i| base.powf(-((4 * i) as f64) / hd as f64))
            .collect();
        let pairs = width / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(x, y) in positions {
            for p in 0..pairs {
                let within = p % (hd / 2);
                let (coord, i) = if within < quarter {
                    (x, within)
                } else {
                    (y, within - quarter)
                };
                let angle = coord as f64 * inv_freq[i];
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self { cos, sin })
    }

    pub fn extend(&mut self, other: RotaryTable) {
        self.cos.extend(other.cos);
        self.sin.extend(other.sin);
    }
}

/// Rotates `tokens[N×d]` by the positions of one branch.
pub fn rope_apply(
    tokens: &Tensor,
    positions: &[(usize, usize)],
    config: &RopeConfig,
    branch: Branch,
) -> Result<Tensor, ModelError> {
    let (n, d) = tokens.dims2()?;
    if positions.len() != n {
        return Err(ModelError::Shape(format!(
            "{n} tokens but {} positions",
            positions.len()
        )));
    }
    let table = RotaryTable::build(positions, d, config, branch)?;
    let mut tape = Tape::new();
    let x = tape.constant(tokens);
    let y = tape.rotary(x, table.cos, table.sin)?;
    Ok(tape.tensor(y))
}

pub(crate) fn rope_var(tape: &mut Tape, x: Var, table: &RotaryTable) -> Result<Var, ModelError> {
    Ok(tape.rotary(x, table.cos.clone(), table.sin.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn origin_is_identity() {
        let x = Tensor::from_fn(&[1, 8], |i| i as f64 - 3.0);
        let y = rope_apply(&x, &[(0, 0)], &RopeConfig::new(8), Branch::Target).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn distinct_bases_distinguish() {
        let x = Tensor::from_fn(&[1, 8], |i| 1.0 + i as f64);
        let mut lo = RopeConfig::new(8);
        lo.target_base = 100.0;
        let hi = RopeConfig::new(8);
        let a = rope_apply(&x, &[(1, 0)], &lo, Branch::Target).unwrap();
        let b = rope_apply(&x, &[(1, 0)], &hi, Branch::Target).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
        // Reference slots differ from the target by default.
        let cfg = RopeConfig::new(8);
        assert_ne!(cfg.base(Branch::Reference(1)), cfg.base(Branch::Target));
        assert_ne!(cfg.base(Branch::Reference(1)), cfg.base(Branch::Reference(2)));
    }

    #[test]
    fn rejects_bad_head_dim() {
        let x = Tensor::zeros(&[1, 6]);
        assert!(matches!(
            rope_apply(&x, &[(0, 0)], &RopeConfig::new(6), Branch::Text),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn x_and_y_use_separate_halves() {
        let x = Tensor::from_fn(&[1, 8], |_| 1.0);
        let cfg = RopeConfig::new(8);
        let y = rope_apply(&x, &[(3, 0)], &cfg, Branch::Target).unwrap();
        assert_eq!(&y.data()[4..], &x.data()[4..]);
        let y = rope_apply(&x, &[(0, 3)], &cfg, Branch::Target).unwrap();
        assert_eq!(&y.data()[..4], &x.data()[..4]);
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(seed in any::<u64>(), px in 0usize..64, py in 0usize..64, k in 1usize..5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[1, 32], |_| rng.random_range(-2.0..2.0));
            let y = rope_apply(&x, &[(px, py)], &RopeConfig::new(8), Branch::Reference(k)).unwrap();
            prop_assert!((x.l2_norm() - y.l2_norm()).abs() < 1e-12);
        }
    }
}
