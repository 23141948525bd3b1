//! AWGN channel with a per-image average power constraint.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

/// How the SNR of a transmission is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SnrSpec {
    FixedDb(f64),
    /// Sandwich schedule over `[lo_db, hi_db]`.
    SandwichRange { lo_db: f64, hi_db: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Channel uses per image.
    pub bandwidth: usize,
    pub power: f64,
    pub snr: SnrSpec,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            bandwidth: 64,
            power: 1.0,
            snr: SnrSpec::SandwichRange {
                lo_db: -10.0,
                hi_db: 10.0,
            },
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth == 0 {
            return Err(Error::Config("channel.bandwidth must be >= 1".into()));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::Config("channel.power must be > 0".into()));
        }
        match self.snr {
            SnrSpec::FixedDb(db) if !db.is_finite() => {
                Err(Error::Config("channel.snr fixed_db must be finite".into()))
            }
            SnrSpec::SandwichRange { lo_db, hi_db } if !(lo_db < hi_db) => Err(Error::Config(
                format!("channel.snr range needs lo_db < hi_db, got [{lo_db}, {hi_db}]"),
            )),
            _ => Ok(()),
        }
    }

    /// SNR for training iteration `iteration`.
    pub fn training_snr<R: Rng + ?Sized>(&self, iteration: usize, rng: &mut R) -> f64 {
        match self.snr {
            SnrSpec::FixedDb(db) => db,
            SnrSpec::SandwichRange { lo_db, hi_db } => sandwich_snr(iteration, lo_db, hi_db, rng),
        }
    }
}

/// `sigma^2 = P / 10^(snr_db / 10)`.
pub fn snr_db_to_noise_var(snr_db: f64, power: f64) -> f64 {
    power / 10f64.powf(snr_db / 10.0)
}

/// Scale that brings `row` to mean square `power`, or `None` for an all-zero
/// row.
pub fn power_scale(row: &[f64], power: f64) -> Option<f64> {
    let energy: f64 = row.iter().map(|v| v * v).sum();
    (energy > 0.0).then(|| (power * row.len() as f64 / energy).sqrt())
}

/// Rescales each row of `[N, B]` to mean square `power`. Returns the
/// normalized tensor and the number of all-zero rows left unchanged.
pub fn power_normalize(x: &Tensor, power: f64) -> Result<(Tensor, usize)> {
    let [_, b] = match *x.shape() {
        [n, b] => [n, b],
        ref s => return Err(Error::dim("power_normalize", format!("expected [N,B], got {s:?}"))),
    };
    let mut out = x.clone();
    let mut zero_rows = 0;
    for row in out.data_mut().chunks_mut(b) {
        match power_scale(row, power) {
            Some(s) => row.iter_mut().for_each(|v| *v *= s),
            None => zero_rows += 1,
        }
    }
    Ok((out, zero_rows))
}

/// Mean square of each row.
pub fn row_power(x: &Tensor) -> Vec<f64> {
    x.rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
        .collect()
}

/// I.i.d. zero-mean Gaussian samples with variance `noise_var`.
pub fn awgn<R: Rng + ?Sized>(shape: &[usize], noise_var: f64, rng: &mut R) -> Result<Tensor> {
    if !(noise_var >= 0.0) {
        return Err(Error::Validation(format!("noise variance {noise_var} must be >= 0")));
    }
    let numel = shape.iter().product();
    let data = if noise_var == 0.0 {
        vec![0.0; numel]
    } else {
        let normal = Normal::new(0.0, noise_var.sqrt()).expect("finite std");
        (0..numel).map(|_| normal.sample(rng)).collect()
    };
    Tensor::new(shape.to_vec(), data)
}

/// `y = x + z` with `z ~ N(0, noise_var)` i.i.d.
pub fn transmit<R: Rng + ?Sized>(x: &Tensor, noise_var: f64, rng: &mut R) -> Result<Tensor> {
    let z = awgn(x.shape(), noise_var, rng)?;
    let data = x.data().iter().zip(z.data()).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Tape version of [`transmit`]; the noise is a constant for backward.
pub fn transmit_var<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    noise_var: f64,
    rng: &mut R,
) -> Result<Var> {
    let z = awgn(tape.value(x).shape(), noise_var, rng)?;
    tape.add_const(x, &z)
}

/// Sandwich-rule SNR: lowest, highest, then uniform in dB, repeating.
pub fn sandwich_snr<R: Rng + ?Sized>(iteration: usize, lo_db: f64, hi_db: f64, rng: &mut R) -> f64 {
    match iteration % 3 {
        0 => lo_db,
        1 => hi_db,
        _ => rng.random_range(lo_db..=hi_db),
    }
}

/// Empirical SNR in dB of a clean signal and its noisy copy.
pub fn empirical_snr_db(clean: &Tensor, received: &Tensor) -> f64 {
    let signal: f64 = clean.data().iter().map(|v| v * v).sum();
    let noise: f64 = clean
        .data()
        .iter()
        .zip(received.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    10.0 * (signal / noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_variance_from_db() {
        assert_eq!(snr_db_to_noise_var(0.0, 1.0), 1.0);
        assert!((snr_db_to_noise_var(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((snr_db_to_noise_var(-10.0, 1.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let x = Tensor::new(vec![2, 4], vec![2., 0., 0., 0., 4., 0., 0., 0.]).unwrap();
        let (y, zeros) = power_normalize(&x, 1.0).unwrap();
        assert_eq!(zeros, 0);
        assert_eq!(y.data(), &[2., 0., 0., 0., 2., 0., 0., 0.]);
    }

    #[test]
    fn zero_row_is_untouched_and_counted() {
        let x = Tensor::new(vec![2, 2], vec![0., 0., 1., 1.]).unwrap();
        let (y, zeros) = power_normalize(&x, 1.0).unwrap();
        assert_eq!(zeros, 1);
        assert_eq!(&y.data()[..2], &[0., 0.]);
    }

    #[test]
    fn random_rows_hit_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = crate::gradcheck::random_tensor(&[16, 64], &mut rng);
        let (y, _) = power_normalize(&x, 1.0).unwrap();
        for p in row_power(&y) {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_transmit_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = crate::gradcheck::random_tensor(&[3, 5], &mut rng);
        assert_eq!(transmit(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn negative_variance_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(vec![1, 2]);
        assert!(matches!(transmit(&x, -1.0, &mut rng), Err(Error::Validation(_))));
    }

    #[test]
    fn noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::zeros(vec![1000, 1000]);
        let y = transmit(&x, 1.0, &mut rng).unwrap();
        let n = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn transmit_is_seeded() {
        let x = Tensor::zeros(vec![2, 8]);
        let a = transmit(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = transmit(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sandwich_cycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sandwich_snr(0, -10.0, 10.0, &mut rng), -10.0);
        assert_eq!(sandwich_snr(1, -10.0, 10.0, &mut rng), 10.0);
        assert_eq!(sandwich_snr(3, -10.0, 10.0, &mut rng), -10.0);
        assert_eq!(sandwich_snr(4, -10.0, 10.0, &mut rng), 10.0);
        for i in [2, 5, 8, 11] {
            let v = sandwich_snr(i, -10.0, 10.0, &mut rng);
            assert!((-10.0..=10.0).contains(&v));
        }
    }

    #[test]
    fn config_validation() {
        assert!(ChannelConfig::default().validate().is_ok());
        let mut c = ChannelConfig::default();
        c.snr = SnrSpec::SandwichRange { lo_db: 5.0, hi_db: 5.0 };
        assert!(c.validate().is_err());
        c = ChannelConfig { bandwidth: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
