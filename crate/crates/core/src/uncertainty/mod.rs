//! Uncertainty of a surrogate as the negative log-likelihood of its latent
//! features under a Gaussian mixture, rescaled by conformal calibration.

mod conformal;
mod gmm;
mod kmeans;

pub use conformal::{higher_quantile, quantile_level, ConformalScale};
pub use gmm::{em_fit, relative_regularization, EmFit, EmOptions, GmmModel, DEGENERATE_WEIGHT, MAX_RESEEDS};
pub use kmeans::{kmeans, KMeansResult, MAX_LLOYD_ITERATIONS};

use crate::dynamics::CollectiveVariable;
use crate::error::{check_dim, Result};
use crate::potentials::Configuration;
use crate::surrogate::{LabeledSet, SurrogateModel};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Version tag of the persisted uncertainty record.
pub const UNCERTAINTY_VERSION: u32 = 1;

/// Covariance floor `1 / (2 pi)`: with every eigenvalue of every component
/// at least this, each component density is below 1 and the NLL is positive
/// everywhere, which conformal scores require.
pub const POSITIVE_NLL_REG: f64 = 1.0 / (2.0 * std::f64::consts::PI);

/// Zero point of the raw uncertainty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllReference {
    /// The NLL itself.
    #[default]
    Absolute,
    /// NLL minus its lower bound [`GmmModel::nll_lower_bound`], so the raw
    /// value is non-negative whatever the covariance scale.
    Peak,
}

impl std::fmt::Display for NllReference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NllReference::Absolute => "absolute",
            NllReference::Peak => "peak",
        })
    }
}

impl std::str::FromStr for NllReference {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(NllReference::Absolute),
            "peak" => Ok(NllReference::Peak),
            _ => Err(crate::Error::Config(format!("unknown NLL reference `{s}`"))),
        }
    }
}

/// Mixture size and covariance regularisation of [`GmmUncertainty::fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyOptions {
    pub components: usize,
    pub reg_scale: f64,
    pub reg_floor: f64,
    pub reference: NllReference,
}

/// Calibrated uncertainty `u(x) = q_hat * (NLL(zeta(x)) - offset)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmUncertainty {
    pub model: SurrogateModel,
    pub gmm: GmmModel,
    pub offset: f64,
    pub scale: ConformalScale,
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    gmm: GmmModel,
    offset: f64,
    scale: ConformalScale,
}

impl GmmUncertainty {
    /// Fits the mixture on the latents of `training` with regularisation
    /// `max(reg_scale * trace(cov) / D, reg_floor)`. The scale starts as the
    /// identity.
    pub fn fit(model: SurrogateModel, training: &LabeledSet, opts: &UncertaintyOptions, seed: u64) -> Result<Self> {
        let latents: Vec<Vec<f64>> = training.configs().map(|c| model.latent(c.coords())).collect();
        let reg = relative_regularization(&latents, opts.reg_scale).max(opts.reg_floor);
        let fit = em_fit(&latents, &EmOptions::new(opts.components, seed, reg))?;
        let offset = match opts.reference {
            NllReference::Absolute => 0.0,
            NllReference::Peak => fit.model.nll_lower_bound(),
        };
        Ok(GmmUncertainty {
            model,
            gmm: fit.model,
            offset,
            scale: ConformalScale::identity(),
        })
    }

    /// Raw (uncalibrated) uncertainty of a configuration.
    pub fn raw(&self, x: &[f64]) -> f64 {
        self.gmm.nll(&self.model.latent(x)) - self.offset
    }

    /// Calibrated value.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.scale.apply(self.raw(x))
    }

    /// Calibrated value and spatial gradient.
    pub fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (zeta, jac) = self.model.featurize(x);
        let nll = self.gmm.nll_gradient(&zeta, &jac, grad);
        grad.iter_mut().for_each(|g| *g *= self.scale.q_hat);
        self.scale.apply(nll - self.offset)
    }

    /// Calibrates against force-error norms on a labelled set.
    pub fn calibrate(&mut self, calibration: &LabeledSet, alpha: f64) -> Result<()> {
        let (u, err) = self.raw_and_errors(calibration)?;
        self.scale = ConformalScale::calibrate(&u, &err, alpha)?;
        Ok(())
    }

    /// Raw NLL and `|F - F_pred|` for every record.
    pub fn raw_and_errors(&self, data: &LabeledSet) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut u = Vec::with_capacity(data.len());
        let mut err = Vec::with_capacity(data.len());
        for rec in data.records() {
            check_dim(self.model.dim(), rec.config.dim())?;
            let p = self.model.predict(&rec.config)?;
            u.push(self.gmm.nll(&p.zeta) - self.offset);
            err.push(force_error(&p.forces, &rec.forces));
        }
        Ok((u, err))
    }

    pub fn evaluate(&self, config: &Configuration) -> Result<(f64, Vec<f64>)> {
        check_dim(self.model.dim(), config.dim())?;
        let mut grad = vec![0.0; config.dim()];
        let u = self.value_and_gradient(config.coords(), &mut grad);
        Ok((u, grad))
    }

    /// Saves the mixture and scale; the surrogate has its own checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let r = Record {
            version: UNCERTAINTY_VERSION,
            gmm: self.gmm.clone(),
            offset: self.offset,
            scale: self.scale.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&r)?)?;
        Ok(())
    }

    pub fn load(path: &Path, model: SurrogateModel) -> Result<Self> {
        let r: Record = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if r.version != UNCERTAINTY_VERSION {
            return Err(crate::Error::Config(format!("unsupported uncertainty version {}", r.version)));
        }
        check_dim(model.latent_dim(), r.gmm.dim())?;
        Ok(GmmUncertainty {
            model,
            gmm: r.gmm,
            offset: r.offset,
            scale: r.scale,
        })
    }
}

/// Euclidean norm of the force residual.
pub fn force_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

impl CollectiveVariable for GmmUncertainty {
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.value_and_gradient(x, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::GroundTruthPotential;
    use crate::rng::seeded;
    use crate::surrogate::{FeatureMap, FitOptions, LabeledRecord, Provenance};
    use rand::Rng;

    fn opts(reg_scale: f64, reg_floor: f64, reference: NllReference) -> UncertaintyOptions {
        UncertaintyOptions {
            components: 2,
            reg_scale,
            reg_floor,
            reference,
        }
    }

    pub(crate) fn left_well_setup() -> (GroundTruthPotential, GmmUncertainty) {
        let gt = GroundTruthPotential::double_well(1, 1.0, 1.0);
        let fm = FeatureMap::lattice(&[(-2.0, 2.0)], &[false], 16, 1.5, 0.0).unwrap();
        let mut rng = seeded(5);
        let mut set = LabeledSet::new();
        for _ in 0..60 {
            let x = -1.0 + 0.3 * (rng.random::<f64>() - 0.5);
            let c = gt.config(vec![x]);
            let (e, f) = gt.evaluate(&c).unwrap();
            set.push(LabeledRecord {
                config: c,
                energy: e,
                forces: f,
                provenance: Provenance::Initial,
            })
            .unwrap();
        }
        let model = SurrogateModel::fit(&fm, &set, &FitOptions::default()).unwrap();
        (gt, GmmUncertainty::fit(model, &set, &opts(1e-2, 0.0, NllReference::Absolute), 3).unwrap())
    }

    #[test]
    fn unit_scale_is_raw_nll() {
        let (_, u) = left_well_setup();
        assert_eq!(u.value(&[0.3]), u.raw(&[0.3]));
    }

    #[test]
    fn scale_is_linear() {
        let (_, mut u) = left_well_setup();
        let mut g1 = [0.0];
        let v1 = u.value_and_gradient(&[0.4], &mut g1);
        u.scale.q_hat = 2.0;
        let mut g2 = [0.0];
        let v2 = u.value_and_gradient(&[0.4], &mut g2);
        assert_eq!(v2, 2.0 * v1);
        assert_eq!(g2[0], 2.0 * g1[0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, mut u) = left_well_setup();
        u.scale.q_hat = 0.7;
        let mut rng = seeded(8);
        for _ in 0..50 {
            let x = rng.random_range(-1.8..1.8);
            let mut g = [0.0];
            u.value_and_gradient(&[x], &mut g);
            let h = 1e-5;
            let num = (u.value(&[x + h]) - u.value(&[x - h])) / (2.0 * h);
            assert!((num - g[0]).abs() <= 1e-6 * num.abs().max(1.0), "{x}: {num} vs {}", g[0]);
        }
    }

    #[test]
    fn higher_away_from_training_data() {
        let (_, u) = left_well_setup();
        assert!(u.raw(&[1.0]) > u.raw(&[-1.0]));
    }

    #[test]
    fn calibration_preserves_ordering() {
        let (_, mut u) = left_well_setup();
        let xs: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
        let before: Vec<f64> = xs.iter().map(|&x| u.value(&[x])).collect();
        u.scale.q_hat = 3.7;
        let after: Vec<f64> = xs.iter().map(|&x| u.value(&[x])).collect();
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let argmin = |v: &[f64]| v.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(&before), argmax(&after));
        assert_eq!(argmin(&before), argmin(&after));
    }

    #[test]
    fn floor_or_peak_reference_makes_raw_positive() {
        let (gt, u) = left_well_setup();
        let mut set = LabeledSet::new();
        for i in 0..40 {
            let c = gt.config(vec![-1.0 + 0.005 * i as f64]);
            let (e, f) = gt.evaluate(&c).unwrap();
            set.push(LabeledRecord {
                config: c,
                energy: e,
                forces: f,
                provenance: Provenance::Initial,
            })
            .unwrap();
        }
        let tight = GmmUncertainty::fit(u.model.clone(), &set, &opts(1e-6, 0.0, NllReference::Absolute), 1).unwrap();
        assert!(tight.raw(&[-0.9]) < 0.0);
        let floored = GmmUncertainty::fit(u.model.clone(), &set, &opts(1e-6, POSITIVE_NLL_REG, NllReference::Absolute), 1).unwrap();
        let peak = GmmUncertainty::fit(u.model.clone(), &set, &opts(1e-6, 0.0, NllReference::Peak), 1).unwrap();
        assert_eq!(peak.gmm, tight.gmm);
        for i in 0..=400 {
            let x = -2.0 + 0.01 * i as f64;
            assert!(floored.raw(&[x]) > 0.0, "{x}");
            assert!(peak.raw(&[x]) >= 0.0, "{x}");
            assert_eq!(peak.raw(&[x]), tight.raw(&[x]) - peak.offset);
        }
        for z in floored.gmm.means() {
            assert!(floored.gmm.nll(&z) > 0.0);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let (_, u) = left_well_setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gmm.json");
        u.save(&p).unwrap();
        let back = GmmUncertainty::load(&p, u.model.clone()).unwrap();
        assert_eq!(back, u);
    }
}
