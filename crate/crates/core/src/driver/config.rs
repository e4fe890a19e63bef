//! Flat `key = value` run configuration.

use crate::dynamics::Mode;
use crate::error::{Error, Result};
use crate::potentials::{GroundTruthPotential, PotentialKind};
use crate::uncertainty::NllReference;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Version written to and required from every config file.
pub const CONFIG_SCHEMA: u32 = 1;

/// Generation-1 step count restored by `full_scale = true`.
pub const FULL_STEPS1: u64 = 50_000;

/// How new configurations are proposed each generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// eABF(-GaMD) on the calibrated mixture uncertainty.
    GmmCv,
    /// eABF-GaMD on the force spread of a surrogate ensemble.
    EnsembleCv,
    /// Plain Langevin with the uncertainty as an attractive bias energy.
    BiasEnergy,
    /// Plain Langevin on the surrogate.
    Unbiased,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GmmCv => "gmm_cv",
            Method::EnsembleCv => "ensemble_cv",
            Method::BiasEnergy => "bias_energy",
            Method::Unbiased => "unbiased",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm_cv" => Ok(Method::GmmCv),
            "ensemble_cv" => Ok(Method::EnsembleCv),
            "bias_energy" => Ok(Method::BiasEnergy),
            "unbiased" => Ok(Method::Unbiased),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u32, u64, usize, bool, PotentialKind, Method, Mode, NllReference);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<u32> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{e}"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr, $doc:literal;)*) => {
        /// Every knob of a campaign. A campaign is a pure function of this.
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// Recognised keys, in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Current value of a key in text form.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.render()),)*
                    _ => None,
                }
            }

            /// One-line description of a key.
            pub fn describe(key: &str) -> Option<&'static str> {
                match key {
                    $(stringify!($key) => Some($doc),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    potential: PotentialKind = PotentialKind::MullerBrown, "ground-truth surface: muller_brown, double_well_nd, toy_dipeptide_torus";
    potential_dim: usize = 2, "dimension of double_well_nd (other kinds are 2-D)";
    muller_brown_scale: f64 = crate::potentials::MULLER_BROWN_SCALE, "energy scale of the Müller–Brown surface";
    double_well_height: f64 = 1.0, "barrier height h of the double well";
    double_well_k: f64 = 1.0, "transverse spring constant of the double well";
    method: Method = Method::GmmCv, "gmm_cv, ensemble_cv, bias_energy or unbiased";
    sampling_mode: Mode = Mode::EabfGamd, "dynamics used by gmm_cv and ensemble_cv: eabf_gamd, eabf or unbiased";
    generations: u32 = 11, "number of generations";
    seed: u64 = 1, "campaign seed; every random stream derives from it";
    output_dir: String = String::new(), "run directory (empty: no files written)";
    kt1: f64 = 1.0, "lower sampling temperature";
    kt2: f64 = 1.667, "higher sampling temperature";
    full_scale: bool = false, "use the full generation-1 step count (overrides steps1)";
    steps1: u64 = 20_000, "steps per run in generation 1";
    steps_growth: f64 = 1.2, "per-generation factor on the step count";
    sigma1: f64 = 0.5, "coupling width in generation 1";
    sigma_growth: f64 = 0.8, "per-generation factor on the coupling width";
    u_cutoff1: f64 = 2.0, "acquisition cutoff in generation 1";
    cutoff_growth: f64 = 1.05, "per-generation factor on the cutoff";
    features_explore: usize = 64, "feature count of the exploration surrogate";
    features_production: usize = 256, "feature count of the production surrogate";
    width_factor: f64 = 1.5, "feature width over lattice spacing";
    ridge: f64 = 1e-4, "ridge penalty on feature weights";
    force_weight: f64 = 1.0, "weight of force residuals in the fit";
    gmm_components: usize = 8, "mixture components";
    gmm_reg_scale: f64 = 1e-6, "covariance regularisation as a multiple of trace(cov)/D";
    gmm_reg_floor: f64 = crate::uncertainty::POSITIVE_NLL_REG, "lower bound on the covariance regularisation";
    nll_reference: NllReference = NllReference::Absolute, "zero point of the raw uncertainty: absolute NLL, or peak (NLL minus its lower bound)";
    alpha: f64 = 0.05, "conformal miscoverage level";
    calibration_size: usize = 100, "held-out calibration records per generation (upper limit)";
    calibration_fraction: f64 = 0.2, "largest fraction of the dataset held out for calibration";
    cv_lo: f64 = -5.0, "lower edge of the ABF range";
    cv_hi: f64 = 25.0, "upper edge of the ABF range";
    cv_abort: f64 = 25.0, "biased runs stop when the CV exceeds this";
    abf_bins: usize = 64, "ABF bins";
    abf_n_full: u64 = 100, "samples per bin before the ABF bias is applied in full";
    gamd_prerun: u64 = 2000, "steps of the unbiased run that sets the boost";
    gamd_sigma0: f64 = 0.01, "boost standard-deviation bound";
    fire_steps: usize = 10, "relaxation steps applied to each generation's start";
    record_stride: u64 = 10, "steps between recorded frames";
    cosine_threshold: f64 = 0.015, "complete-linkage cutoff on cosine distance";
    max_new: usize = 200, "acquisitions per generation (upper limit)";
    max_candidates: usize = 2000, "candidates clustered per generation (upper limit)";
    initial_points: usize = 100, "size of the initial single-basin dataset";
    test_points: usize = 9800, "size of the held-out test set";
    coverage_bins: usize = 50, "bins per CV dimension of the coverage grid";
    pmf_generations: Vec<u32> = vec![1, 6, 11], "generations that train the production model and compute a PMF";
    pmf_bins: usize = 12, "umbrella windows and PMF bins per CV dimension";
    pmf_steps: u64 = 3000, "steps per umbrella window";
    pmf_equilibration: u64 = 500, "umbrella steps discarded per window";
    pmf_cap: f64 = 8.0, "reference bins above this many kT1 are excluded from the PMF error";
    ensemble_members: usize = 5, "ensemble size";
    ensemble_sigma1: f64 = 0.15, "ensemble coupling width in generation 1";
    ensemble_sigma_decay: f64 = 0.9, "per-generation factor on the ensemble coupling width";
    ensemble_cutoff1: f64 = 0.25, "ensemble acquisition cutoff in generation 1";
    ensemble_cutoff_decay: f64 = 0.9, "per-generation factor on the ensemble cutoff";
    bias_gamma1: f64 = 0.005, "bias strength in generation 1";
    bias_gamma_growth: f64 = 1.3, "per-generation factor on the bias strength";
    bias_cutoff1: f64 = 2.0, "bias-energy acquisition cutoff in generation 1";
    bias_cutoff_decay: f64 = 0.9, "per-generation factor on the bias-energy cutoff";
}

impl RunConfig {
    /// Parses a config file. Blank lines and `#` comments are ignored; the
    /// `schema_version` key is required, unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut schema = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("key `{key}` repeated"),
                });
            }
            if key == "schema_version" {
                schema = Some(value.parse::<u32>().map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: format!("schema_version: {e}"),
                })?);
                continue;
            }
            cfg.set(key, value).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        match schema {
            Some(CONFIG_SCHEMA) => {}
            Some(v) => return Err(Error::Config(format!("unsupported schema_version {v}"))),
            None => return Err(Error::Config("missing schema_version".into())),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full config text; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> String {
        let mut out = format!("schema_version = {CONFIG_SCHEMA}\n");
        for key in Self::KEYS {
            let doc = Self::describe(key).unwrap_or("");
            let value = self.get(key).unwrap_or_default();
            out.push_str(&format!("\n# {doc}\n{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.generations < 1 {
            return bad("generations must be at least 1");
        }
        let positive = [
            ("steps_growth", self.steps_growth),
            ("sigma_growth", self.sigma_growth),
            ("cutoff_growth", self.cutoff_growth),
            ("ensemble_sigma_decay", self.ensemble_sigma_decay),
            ("ensemble_cutoff_decay", self.ensemble_cutoff_decay),
            ("bias_gamma_growth", self.bias_gamma_growth),
            ("bias_cutoff_decay", self.bias_cutoff_decay),
            ("kt1", self.kt1),
            ("kt2", self.kt2),
            ("sigma1", self.sigma1),
            ("ensemble_sigma1", self.ensemble_sigma1),
            ("bias_gamma1", self.bias_gamma1),
            ("width_factor", self.width_factor),
            ("gmm_reg_scale", self.gmm_reg_scale),
            ("gamd_sigma0", self.gamd_sigma0),
            ("pmf_cap", self.pmf_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return bad("calibration_fraction must lie in (0, 1)");
        }
        if !(self.cv_lo < self.cv_hi) {
            return bad("cv_lo must be below cv_hi");
        }
        if !(self.cosine_threshold > 0.0 && self.cosine_threshold < 2.0) {
            return bad("cosine_threshold must lie in (0, 2)");
        }
        if self.gmm_reg_floor < 0.0 {
            return bad("gmm_reg_floor must be non-negative");
        }
        if self.ridge < 0.0 || self.force_weight < 0.0 {
            return bad("ridge and force_weight must be non-negative");
        }
        for (name, v) in [
            ("record_stride", self.record_stride as usize),
            ("abf_bins", self.abf_bins),
            ("gmm_components", self.gmm_components),
            ("initial_points", self.initial_points),
            ("test_points", self.test_points),
            ("coverage_bins", self.coverage_bins),
            ("pmf_bins", self.pmf_bins),
            ("calibration_size", self.calibration_size),
            ("max_candidates", self.max_candidates),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.ensemble_members < 2 {
            return bad("ensemble_members must be at least 2");
        }
        if self.features_explore < 4 || self.features_production < 4 {
            return bad("feature counts must be at least 4");
        }
        if self.pmf_steps <= self.pmf_equilibration && !self.pmf_generations.is_empty() {
            return bad("pmf_steps must exceed pmf_equilibration");
        }
        if self.potential == PotentialKind::DoubleWellNd && !(1..=crate::surrogate::MAX_DIM).contains(&self.potential_dim) {
            return Err(Error::Config(format!("potential_dim must lie in 1..={}", crate::surrogate::MAX_DIM)));
        }
        Ok(())
    }

    /// Generation-1 step count after the `full_scale` switch.
    pub fn effective_steps1(&self) -> u64 {
        if self.full_scale {
            FULL_STEPS1
        } else {
            self.steps1
        }
    }

    pub fn uncertainty_options(&self) -> crate::uncertainty::UncertaintyOptions {
        crate::uncertainty::UncertaintyOptions {
            components: self.gmm_components,
            reg_scale: self.gmm_reg_scale,
            reg_floor: self.gmm_reg_floor,
            reference: self.nll_reference,
        }
    }

    pub fn ground_truth(&self) -> GroundTruthPotential {
        match self.potential {
            PotentialKind::MullerBrown => GroundTruthPotential::muller_brown(self.muller_brown_scale),
            PotentialKind::DoubleWellNd => {
                GroundTruthPotential::double_well(self.potential_dim, self.double_well_height, self.double_well_k)
            }
            PotentialKind::ToyDipeptideTorus => GroundTruthPotential::toy_dipeptide_torus(),
        }
    }
}
