//! Inductive conformal calibration of a heuristic uncertainty.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalScale {
    pub q_hat: f64,
    pub alpha: f64,
    pub n_cal: usize,
}

/// Finite-sample corrected quantile level `min(1, (n+1)(1-alpha)/n)`.
pub fn quantile_level(n: usize, alpha: f64) -> f64 {
    let n = n as f64;
    // (n+1) - (n+1) alpha rounds better than (n+1) (1 - alpha)
    ((n + 1.0 - (n + 1.0) * alpha) / n).min(1.0)
}

/// Empirical quantile with "higher" interpolation: the sorted value at index
/// `ceil(level * (n - 1))`.
pub fn higher_quantile(values: &[f64], level: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = level * (sorted.len() - 1) as f64;
    // guard against 0.9999999 style round-off pushing past an exact index
    let idx = if (pos - pos.round()).abs() < 1e-9 {
        pos.round()
    } else {
        pos.ceil()
    } as usize;
    sorted[idx.min(sorted.len() - 1)]
}

impl ConformalScale {
    pub fn identity() -> Self {
        ConformalScale {
            q_hat: 1.0,
            alpha: 0.05,
            n_cal: 0,
        }
    }

    /// Scores `err / u` and takes their conservative quantile.
    pub fn calibrate(u_cal: &[f64], err_cal: &[f64], alpha: f64) -> Result<Self> {
        if u_cal.is_empty() || u_cal.len() != err_cal.len() {
            return Err(Error::invalid(format!(
                "calibration needs equal non-empty inputs, got {} and {}",
                u_cal.len(),
                err_cal.len()
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        if let Some((i, u)) = u_cal.iter().enumerate().find(|(_, &u)| !(u > 0.0)) {
            return Err(Error::invalid(format!(
                "calibration uncertainty {i} is {u}; scores need u > 0"
            )));
        }
        let scores: Vec<f64> = err_cal.iter().zip(u_cal).map(|(e, u)| e / u).collect();
        let q_hat = higher_quantile(&scores, quantile_level(scores.len(), alpha));
        if !(q_hat > 0.0) {
            return Err(Error::Degenerate(format!("calibrated scale {q_hat} is not positive")));
        }
        Ok(ConformalScale {
            q_hat,
            alpha,
            n_cal: scores.len(),
        })
    }

    pub fn apply(&self, u: f64) -> f64 {
        self.q_hat * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn unit_scores_give_unit_scale() {
        let u = [0.3, 1.0, 2.5];
        let c = ConformalScale::calibrate(&u, &u, 0.05).unwrap();
        assert_eq!(c.q_hat, 1.0);
        assert_eq!(c.apply(0.7), 0.7);
    }

    #[test]
    fn small_sample_caps_level() {
        assert_eq!(quantile_level(4, 0.05), 1.0);
        let c = ConformalScale::calibrate(&[1.0; 4], &[0.5, 1.0, 1.5, 2.0], 0.05).unwrap();
        assert_eq!(c.q_hat, 2.0);
    }

    #[test]
    fn level_for_hundred_points() {
        assert_eq!(quantile_level(100, 0.05), 0.9595);
        // 0.9595 * 99 = 94.99..., so the 96th smallest score
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = ConformalScale::calibrate(&vec![1.0; 100], &s, 0.05).unwrap();
        assert_eq!(c.q_hat, 96.0);
    }

    #[test]
    fn higher_quantile_matches_sorting_oracle() {
        let mut rng = seeded(1);
        for _ in 0..200 {
            let n = rng.random_range(1..50);
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let level: f64 = rng.random();
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            // first sorted index at or beyond the fractional position
            let idx = (0..n).find(|&i| i as f64 >= level * (n - 1) as f64 - 1e-9).unwrap();
            assert_eq!(higher_quantile(&v, level), s[idx]);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ConformalScale::calibrate(&[1.0, 0.0], &[1.0, 1.0], 0.05).is_err());
        assert!(ConformalScale::calibrate(&[1.0, -1.0], &[1.0, 1.0], 0.05).is_err());
        assert!(ConformalScale::calibrate(&[], &[], 0.05).is_err());
        assert!(ConformalScale::calibrate(&[1.0], &[1.0, 2.0], 0.05).is_err());
        assert!(ConformalScale::calibrate(&[1.0], &[0.0], 0.05).is_err());
    }

    #[test]
    fn exchangeable_coverage() {
        let mut rng = seeded(9);
        let mut covered = 0;
        let mut total = 0;
        for _ in 0..20 {
            let draw = |rng: &mut crate::rng::Rng| {
                let u: f64 = rng.random_range(0.5..2.0);
                (u, u * rng.random::<f64>().powi(2) * 3.0)
            };
            let (u, e): (Vec<f64>, Vec<f64>) = (0..100).map(|_| draw(&mut rng)).unzip();
            let c = ConformalScale::calibrate(&u, &e, 0.05).unwrap();
            for _ in 0..1000 {
                let (u, e) = draw(&mut rng);
                covered += (e <= c.apply(u)) as usize;
                total += 1;
            }
        }
        assert!(covered as f64 / total as f64 >= 0.92);
    }
}
