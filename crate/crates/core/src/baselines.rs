//! Comparison methods: ensemble force spread as the CV, and the calibrated
//! uncertainty used directly as an attractive bias energy.

use crate::dynamics::{CollectiveVariable, ExternalBias};
use crate::error::{check_dim, Error, Result};
use crate::potentials::Pes;
use crate::rng::rng_from;
use crate::surrogate::{FeatureMap, FitOptions, LabeledSet, SurrogateModel};
use crate::uncertainty::GmmUncertainty;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MEMBERS: usize = 5;
/// Fraction of the data each member trains on.
pub const MEMBER_SPLIT: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<SurrogateModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub mu_e: f64,
    pub mu_f: Vec<f64>,
    pub sigma_e: f64,
    pub sigma_f: f64,
    pub grad_sigma_f: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<SurrogateModel>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid(format!("an ensemble needs at least 2 members, got {}", members.len())));
        }
        let dim = members[0].dim();
        for m in &members {
            check_dim(dim, m.dim())?;
        }
        Ok(Ensemble { members })
    }

    /// Member `i` gets a lattice with `per_dim + i % 2` centres per dimension,
    /// shifted by `i / M` of a spacing, and its own random 80% of the data.
    pub fn train(
        bounds: &[(f64, f64)],
        periodic: &[bool],
        data: &LabeledSet,
        m: usize,
        per_dim: usize,
        opts: &FitOptions,
        seed: u64,
    ) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::invalid("ensemble training needs at least 2 records"));
        }
        let members = (0..m)
            .map(|i| {
                let fm = FeatureMap::lattice(bounds, periodic, per_dim + i % 2, 1.5, i as f64 / m as f64)?;
                let mut idx: Vec<usize> = (0..data.len()).collect();
                idx.shuffle(&mut rng_from(seed, &[i as u64]));
                let keep = ((data.len() as f64 * MEMBER_SPLIT).round() as usize).max(1);
                idx.truncate(keep);
                idx.sort_unstable();
                SurrogateModel::fit(&fm, &data.subset(&idx), opts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(members)
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    /// Mean and spread of member predictions. `sigma_e` uses the `M - 1`
    /// divisor; `sigma_f = sqrt(sum_m |F_m - mu_F|^2 / (dim (M - 1)))`.
    pub fn predict(&self, x: &[f64]) -> EnsemblePrediction {
        let m = self.members.len();
        let dim = self.dim();
        let mut energies = Vec::with_capacity(m);
        let mut forces = Vec::with_capacity(m);
        for member in &self.members {
            let mut f = vec![0.0; dim];
            energies.push(member.energy_forces(x, &mut f));
            forces.push(f);
        }
        let mf = m as f64;
        let mu_e = energies.iter().sum::<f64>() / mf;
        let sigma_e = (energies.iter().map(|e| (e - mu_e).powi(2)).sum::<f64>() / (mf - 1.0)).sqrt();
        let mut mu_f = vec![0.0; dim];
        for f in &forces {
            for (a, b) in mu_f.iter_mut().zip(f) {
                *a += b / mf;
            }
        }
        let norm = dim as f64 * (mf - 1.0);
        let spread: f64 = forces
            .iter()
            .map(|f| f.iter().zip(&mu_f).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        let sigma_f = (spread / norm).sqrt();
        let mut grad_sigma_f = vec![0.0; dim];
        if sigma_f > 0.0 {
            // dF_m/dx = -H_m, and the mean term drops out since the
            // deviations sum to zero
            for (member, f) in self.members.iter().zip(&forces) {
                let h = member.hessian(x);
                for a in 0..dim {
                    let dev = f[a] - mu_f[a];
                    for (b, g) in grad_sigma_f.iter_mut().enumerate() {
                        *g -= dev * h[a * dim + b];
                    }
                }
            }
            grad_sigma_f.iter_mut().for_each(|g| *g /= sigma_f * norm);
        }
        EnsemblePrediction {
            mu_e,
            mu_f,
            sigma_e,
            sigma_f,
            grad_sigma_f,
        }
    }
}

/// The ensemble mean as a potential.
impl Pes for Ensemble {
    fn dim(&self) -> usize {
        Ensemble::dim(self)
    }

    fn periodic(&self) -> &[bool] {
        self.members[0].periodic()
    }

    fn bounds(&self) -> Option<&[(f64, f64)]> {
        None
    }

    fn energy_forces(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        let m = self.members.len() as f64;
        let mut f = vec![0.0; forces.len()];
        forces.iter_mut().for_each(|v| *v = 0.0);
        let mut e = 0.0;
        for member in &self.members {
            e += member.energy_forces(x, &mut f) / m;
            for (a, b) in forces.iter_mut().zip(&f) {
                *a += b / m;
            }
        }
        e
    }
}

/// `sigma_F` of an ensemble as a collective variable.
pub struct EnsembleCv<'a>(pub &'a Ensemble);

impl CollectiveVariable for EnsembleCv<'_> {
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.0.predict(x);
        grad.copy_from_slice(&p.grad_sigma_f);
        p.sigma_f
    }
}

/// Coupling width and acquisition cutoff of the ensemble-CV method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSchedule {
    pub sigma1: f64,
    pub sigma_decay: f64,
    pub cutoff1: f64,
    pub cutoff_decay: f64,
}

impl Default for EnsembleSchedule {
    fn default() -> Self {
        EnsembleSchedule {
            sigma1: 0.15,
            sigma_decay: 0.9,
            cutoff1: 0.25,
            cutoff_decay: 0.9,
        }
    }
}

impl EnsembleSchedule {
    /// `(sigma_i, cutoff_i)` for generation `i >= 1`.
    pub fn at(&self, generation: u32) -> (f64, f64) {
        let p = generation.saturating_sub(1) as i32;
        (self.sigma1 * self.sigma_decay.powi(p), self.cutoff1 * self.cutoff_decay.powi(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasEnergyPolicy {
    pub gamma: f64,
    pub gamma_growth: f64,
    pub u_cutoff: f64,
    pub cutoff_decay: f64,
}

impl Default for BiasEnergyPolicy {
    fn default() -> Self {
        BiasEnergyPolicy {
            gamma: 0.005,
            gamma_growth: 1.3,
            u_cutoff: 2.0,
            cutoff_decay: 0.9,
        }
    }
}

impl BiasEnergyPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("bias strength gamma must be positive"));
        }
        Ok(())
    }

    /// `(gamma_i, cutoff_i)` for generation `i >= 1`.
    pub fn at(&self, generation: u32) -> (f64, f64) {
        let p = generation.saturating_sub(1) as i32;
        (self.gamma * self.gamma_growth.powi(p), self.u_cutoff * self.cutoff_decay.powi(p))
    }
}

/// Bias energy `-gamma u(x)`, pulling the system towards uncertain regions.
pub struct UncertaintyAttraction<'a> {
    pub uncertainty: &'a GmmUncertainty,
    pub gamma: f64,
}

impl ExternalBias for UncertaintyAttraction<'_> {
    fn add_bias(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        let mut g = vec![0.0; forces.len()];
        let u = self.uncertainty.value_and_gradient(x, &mut g);
        for (f, gi) in forces.iter_mut().zip(&g) {
            *f += self.gamma * gi;
        }
        -self.gamma * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{Configuration, GroundTruthPotential};
    use crate::rng::seeded;
    use crate::surrogate::{LabeledRecord, Provenance};
    use rand::Rng;

    fn mb_data(n: usize, seed: u64) -> LabeledSet {
        let gt = GroundTruthPotential::muller_brown(0.05);
        let mut rng = seeded(seed);
        let mut set = LabeledSet::new();
        for _ in 0..n {
            let c = gt.config(vec![rng.random_range(-1.5..1.2), rng.random_range(-0.5..2.0)]);
            let (e, f) = gt.evaluate(&c).unwrap();
            set.push(LabeledRecord {
                config: c,
                energy: e,
                forces: f,
                provenance: Provenance::Initial,
            })
            .unwrap();
        }
        set
    }

    fn mb_ensemble() -> Ensemble {
        Ensemble::train(
            &crate::potentials::MULLER_BROWN_BOUNDS,
            &[false, false],
            &mb_data(120, 1),
            5,
            8,
            &FitOptions::default(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn identical_members_have_no_spread() {
        let e = mb_ensemble();
        let same = Ensemble::new(vec![e.members[0].clone(), e.members[0].clone(), e.members[0].clone()]).unwrap();
        let p = same.predict(&[0.1, 0.5]);
        assert_eq!(p.sigma_e, 0.0);
        assert_eq!(p.sigma_f, 0.0);
        assert!(p.grad_sigma_f.iter().all(|&g| g == 0.0));
        assert!(Ensemble::new(vec![e.members[0].clone()]).is_err());
    }

    #[test]
    fn two_member_energy_statistics() {
        let fm = FeatureMap::lattice(&[(-1.0, 1.0)], &[false], 4, 1.5, 0.0).unwrap();
        let e = Ensemble::new(vec![SurrogateModel::zero(fm.clone(), 1.0), SurrogateModel::zero(fm, 3.0)]).unwrap();
        let p = e.predict(&[0.2]);
        assert_eq!(p.mu_e, 2.0);
        assert!((p.sigma_e - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn force_spread_oracle() {
        // direct evaluation of the definition from member predictions
        let e = mb_ensemble();
        let x = [-0.3, 0.9];
        let fs: Vec<Vec<f64>> = e
            .members
            .iter()
            .map(|m| m.predict(&Configuration::nonperiodic(x.to_vec())).unwrap().forces)
            .collect();
        let mu: Vec<f64> = (0..2).map(|a| fs.iter().map(|f| f[a]).sum::<f64>() / 5.0).collect();
        let mu = &mu;
        let s: f64 = fs.iter().flat_map(|f| (0..2).map(move |a| (f[a] - mu[a]).powi(2))).sum();
        let p = e.predict(&x);
        assert!((p.sigma_f - (s / (2.0 * 4.0)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sigma_f_gradient_matches_finite_differences() {
        let e = mb_ensemble();
        let mut rng = seeded(4);
        for _ in 0..20 {
            let x = [rng.random_range(-1.3..1.0), rng.random_range(-0.3..1.8)];
            let p = e.predict(&x);
            let h = 1e-5;
            for d in 0..2 {
                let mut a = x;
                let mut b = x;
                a[d] += h;
                b[d] -= h;
                let num = (e.predict(&a).sigma_f - e.predict(&b).sigma_f) / (2.0 * h);
                assert!((num - p.grad_sigma_f[d]).abs() <= 1e-5 * num.abs().max(1.0));
            }
        }
    }

    #[test]
    fn member_order_does_not_matter() {
        let e = mb_ensemble();
        let mut rev = e.members.clone();
        rev.reverse();
        let r = Ensemble::new(rev).unwrap();
        let (a, b) = (e.predict(&[0.0, 0.4]), r.predict(&[0.0, 0.4]));
        assert!((a.sigma_f - b.sigma_f).abs() < 1e-12);
        assert!((a.sigma_e - b.sigma_e).abs() < 1e-12);
        assert!((a.mu_e - b.mu_e).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let s = EnsembleSchedule::default();
        assert_eq!(s.at(1), (0.15, 0.25));
        let (sig, cut) = s.at(3);
        assert!((sig - 0.1215).abs() < 1e-15 && (cut - 0.2025).abs() < 1e-15);
        let b = BiasEnergyPolicy::default();
        assert_eq!(b.at(1), (0.005, 2.0));
        let (g, c) = b.at(2);
        assert!((g - 0.0065).abs() < 1e-15 && (c - 1.8).abs() < 1e-15);
    }

    #[test]
    fn ensemble_mean_is_a_potential() {
        let e = mb_ensemble();
        let x = [0.2, 0.3];
        let mut f = [0.0; 2];
        let v = e.energy_forces(&x, &mut f);
        let p = e.predict(&x);
        assert!((v - p.mu_e).abs() < 1e-12);
        assert!((f[0] - p.mu_f[0]).abs() < 1e-12 && (f[1] - p.mu_f[1]).abs() < 1e-12);
    }
}
