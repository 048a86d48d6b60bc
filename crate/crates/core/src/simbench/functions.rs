use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

use crate::data::Matrix;
use crate::error::{HteError, Result};

/// Number of leading covariates the eight functions read.
pub const MIN_P: usize = 9;

fn ind(b: bool) -> f64 {
    f64::from(u8::from(b))
}

fn f4(x: &[f64]) -> f64 {
    let (a, b, c) = (x[1], x[3], x[5]);
    a * b * c
        + 2.0 * a * b * (1.0 - c)
        + 3.0 * a * (1.0 - b) * c
        + 4.0 * a * (1.0 - b) * (1.0 - c)
        + 5.0 * (1.0 - a) * b * c
        + 6.0 * (1.0 - a) * b * (1.0 - c)
        + 7.0 * (1.0 - a) * (1.0 - b) * c
        + 8.0 * (1.0 - a) * (1.0 - b) * (1.0 - c)
}

fn f5(x: &[f64]) -> f64 {
    x[0] + x[2] + x[4] + x[6] + x[7] + x[8] - 2.0
}

/// The benchmark functions `f_1 … f_8`, with `x₁` at `x[0]`.
pub fn eval_f(k: usize, x: &[f64]) -> Result<f64> {
    if x.len() < MIN_P {
        return Err(HteError::PTooSmall {
            p: x.len(),
            needed: MIN_P,
        });
    }
    Ok(match k {
        1 => 0.0,
        2 => 5.0 * ind(x[0] > 1.0) - 5.0,
        3 => 2.0 * x[0] - 4.0,
        4 => f4(x),
        5 => f5(x),
        6 => {
            4.0 * ind(x[0] > 1.0) * ind(x[2] > 0.0)
                + 4.0 * ind(x[4] > 1.0) * ind(x[6] > 0.0)
                + 2.0 * x[7] * x[8]
        }
        7 => {
            0.5 * (x[0] * x[0] + x[1] + x[2] * x[2] + x[3] + x[4] * x[4] + x[5] + x[6] * x[6] + x[7]
                + x[8] * x[8]
                - 11.0)
        }
        8 => (f4(x) + f5(x)) / std::f64::consts::SQRT_2,
        _ => return Err(HteError::InvalidParameter(format!("function index must be 1..=8, got {k}"))),
    })
}

/// Odd-numbered (1-based) columns standard normal, even-numbered
/// Bernoulli(1/2) coded 0.0/1.0.
pub fn draw_features<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Matrix {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        for j in 0..p {
            data.push(if j % 2 == 0 {
                StandardNormal.sample(rng)
            } else {
                f64::from(u8::from(coin.sample(rng)))
            });
        }
    }
    Matrix::new(n, p, data).expect("shape by construction")
}

/// `e^{μ−τ/2} / (1 + e^{μ−τ/2})`.
pub fn biased_propensity(mu: f64, tau: f64) -> f64 {
    let z = mu - tau / 2.0;
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
    use crate::rng::stream;

    #[test]
    fn worked_values() {
        let zero = [0.0; 9];
        assert_eq!(eval_f(1, &[3.0; 9]).unwrap(), 0.0);
        assert_eq!(eval_f(2, &zero).unwrap(), -5.0);
        let mut x = zero;
        x[0] = 2.0;
        assert_eq!(eval_f(2, &x).unwrap(), 0.0);
        let mut ones = zero;
        ones[1] = 1.0;
        ones[3] = 1.0;
        ones[5] = 1.0;
        assert_eq!(eval_f(4, &ones).unwrap(), 1.0);
        assert_eq!(eval_f(4, &zero).unwrap(), 8.0);
        assert_eq!(eval_f(7, &zero).unwrap(), -5.5);
        assert_eq!(eval_f(1, &[0.0; 8]).unwrap_err().kind(), "p-too-small");
    }

    #[test]
    fn logistic_is_overflow_safe() {
        assert_eq!(biased_propensity(0.0, 0.0), 0.5);
        assert_eq!(biased_propensity(1.0, 2.0), 0.5);
        assert_eq!(biased_propensity(1e6, 0.0), 1.0);
        assert_eq!(biased_propensity(-1e6, 0.0), 0.0);
    }

    #[test]
    fn feature_columns_have_expected_laws() {
        let x = draw_features(10_000, 2, &mut stream(1));
        let c1 = x.column(0);
        let c2 = x.column(1);
        let m1 = c1.iter().sum::<f64>() / 1e4;
        let v1 = c1.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / (1e4 - 1.0);
        let m2 = c2.iter().sum::<f64>() / 1e4;
        assert!((0.9..=1.1).contains(&v1));
        assert!((0.47..=0.53).contains(&m2));
        assert!(c2.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
