//! Value-level softmax and losses. The tape ops in [`super::tape`] reuse these
//! for their forward passes.

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) -> Result<()> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, &mut out)?;
    Ok(out)
}

fn check_one_hot(row: &[f64], n: usize) -> Result<()> {
    let ones = row.iter().filter(|&&t| t == 1.0).count();
    let zeros = row.iter().filter(|&&t| t == 0.0).count();
    if ones != 1 || ones + zeros != row.len() {
        return Err(Error::Validation(format!("target row {n} is not one-hot")));
    }
    Ok(())
}

/// Mean over rows of `-sum_k t_k ln(clamp(p_k))` for `[N, K]` inputs given
/// as flat row-major slices.
pub fn cross_entropy(probs: &[f64], targets: &[f64], classes: usize) -> Result<f64> {
    if probs.len() != targets.len() || classes == 0 || probs.len() % classes != 0 {
        return Err(Error::dim(
            "cross_entropy",
            format!("probs {} vs targets {} with K={classes}", probs.len(), targets.len()),
        ));
    }
    let rows = probs.len() / classes;
    let mut total = 0.0;
    for (n, (p, t)) in probs
        .chunks(classes)
        .zip(targets.chunks(classes))
        .enumerate()
    {
        check_one_hot(t, n)?;
        total -= p
            .iter()
            .zip(t)
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| t * p.clamp(PROB_CLAMP, 1.0).ln())
            .sum::<f64>();
    }
    Ok(total / rows as f64)
}

/// `-[t ln d + (1 - t) ln(1 - d)]` with `d` clamped to `[1e-12, 1 - 1e-12]`.
pub fn binary_cross_entropy(d: f64, target: f64) -> f64 {
    let d = d.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * d.ln() + (1.0 - target) * (1.0 - d).ln())
}

/// Tempered sigmoid `1 / (1 + exp(-T x))`.
pub fn tempered_sigmoid(x: f64, temperature: f64) -> f64 {
    let z = temperature * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_stable() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.25).collect();
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0], 2).unwrap(), 0.0);
        let uniform = vec![0.1; 10];
        let mut t = vec![0.0; 10];
        t[3] = 1.0;
        let ce = cross_entropy(&uniform, &t, 10).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        assert!((ce - 2.302585).abs() < 1e-6);
        let ce = cross_entropy(&[1.0, 0.0], &[0.0, 1.0], 2).unwrap();
        assert!((ce - 1e12f64.ln()).abs() < 1e-9);
        assert!((ce - 27.631).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let err = cross_entropy(&[0.5, 0.5], &[0.5, 0.5], 2).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 1.0], 2).is_err());
    }

    #[test]
    fn bce_cases() {
        assert!((binary_cross_entropy(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(binary_cross_entropy(1.0, 1.0) < 1e-11);
        assert!((binary_cross_entropy(0.9, 0.0) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tempered_sigmoid_values() {
        assert_eq!(tempered_sigmoid(0.0, 3.0), 0.5);
        assert!((tempered_sigmoid(1.0, 10.0) - 0.9999546).abs() < 1e-7);
        assert!(tempered_sigmoid(-800.0, 10.0) >= 0.0);
    }
}
