//! The active-learning loop: configuration, schedules, datasets, generations
//! and run-directory persistence.

mod config;

pub use config::{Method, RunConfig, CONFIG_SCHEMA, FULL_STEPS1};

use crate::acquisition::{acquire, label_with_oracle, AcquisitionOutcome, AcquisitionPolicy};
use crate::baselines::{Ensemble, EnsembleCv, EnsembleSchedule, BiasEnergyPolicy, UncertaintyAttraction};
use crate::dynamics::{
    gamd_estimate, run_simulation, AbfEstimator, CollectiveVariable, CouplingParams, ExternalBias, Frame, GamdParams, Limits,
    Mode, RunManifest, Simulation, Termination, Thermo, Trajectory,
};
use crate::error::{Error, Result};
use crate::freeenergy::{cap_reference, coverage_fraction, mbar_windows, pmf_from_weights, pmf_mae, run_umbrella, Alignment, PmfGrid, UmbrellaPlan};
use crate::grid::{Axis, GridSpec};
use crate::potentials::{fire_relax, reference_pmf_binned, Configuration, FireParams, GroundTruthPotential, Pes, PotentialKind};
use crate::rng::{derive_seed, label, rng_from};
use crate::surrogate::{FeatureMap, FitOptions, LabeledRecord, LabeledSet, Provenance, SurrogateModel};
use crate::uncertainty::GmmUncertainty;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// MBAR convergence tolerance and iteration cap for PMF checkpoints.
pub const MBAR_TOL: f64 = 1e-6;
pub const MBAR_MAX_ITER: usize = 20_000;

/// Steps, coupling width and acquisition cutoff of one generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: u64,
    pub sigma: f64,
    pub cutoff: f64,
}

/// `(steps1 * g^(i-1), sigma1 * g^(i-1), cutoff1 * g^(i-1))` with the
/// configured growth factors; steps are rounded to the nearest integer.
pub fn schedule(generation: u32, config: &RunConfig) -> Result<Schedule> {
    if generation < 1 {
        return Err(Error::invalid("generations are numbered from 1"));
    }
    let p = (generation - 1) as i32;
    Ok(Schedule {
        steps: (config.effective_steps1() as f64 * config.steps_growth.powi(p)).round() as u64,
        sigma: config.sigma1 * config.sigma_growth.powi(p),
        cutoff: config.u_cutoff1 * config.cutoff_growth.powi(p),
    })
}

/// Schedule actually used by the configured method: the ensemble method
/// takes its own width and cutoff, the bias-energy method its own cutoff.
pub fn method_schedule(generation: u32, config: &RunConfig) -> Result<(Schedule, Option<f64>)> {
    let mut s = schedule(generation, config)?;
    match config.method {
        Method::EnsembleCv => {
            let (sigma, cutoff) = ensemble_schedule(config).at(generation);
            s.sigma = sigma;
            s.cutoff = cutoff;
            Ok((s, None))
        }
        Method::BiasEnergy => {
            let (gamma, cutoff) = bias_policy(config).at(generation);
            s.cutoff = cutoff;
            Ok((s, Some(gamma)))
        }
        _ => Ok((s, None)),
    }
}

fn ensemble_schedule(c: &RunConfig) -> EnsembleSchedule {
    EnsembleSchedule {
        sigma1: c.ensemble_sigma1,
        sigma_decay: c.ensemble_sigma_decay,
        cutoff1: c.ensemble_cutoff1,
        cutoff_decay: c.ensemble_cutoff_decay,
    }
}

fn bias_policy(c: &RunConfig) -> BiasEnergyPolicy {
    BiasEnergyPolicy {
        gamma: c.bias_gamma1,
        gamma_growth: c.bias_gamma_growth,
        u_cutoff: c.bias_cutoff1,
        cutoff_decay: c.bias_cutoff_decay,
    }
}

/// Energy MAE per configuration and force MAE per component.
pub fn evaluate_test_set(model: &dyn Pes, test: &LabeledSet) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut e_abs = 0.0;
    let mut f_abs = 0.0;
    let mut n_f = 0usize;
    let mut f = vec![0.0; model.dim()];
    for r in test.records() {
        crate::error::check_dim(model.dim(), r.config.dim())?;
        let e = model.energy_forces(r.config.coords(), &mut f);
        e_abs += (e - r.energy).abs();
        for (a, b) in f.iter().zip(&r.forces) {
            f_abs += (a - b).abs();
        }
        n_f += f.len();
    }
    Ok((e_abs / test.len() as f64, f_abs / n_f as f64))
}

/// A potential restricted to a box, so runs stop where the ground truth
/// would refuse to label.
pub struct Bounded<'a> {
    pub inner: &'a dyn Pes,
    pub bounds: Vec<(f64, f64)>,
}

impl Pes for Bounded<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn periodic(&self) -> &[bool] {
        self.inner.periodic()
    }

    fn bounds(&self) -> Option<&[(f64, f64)]> {
        Some(&self.bounds)
    }

    fn energy_forces(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        self.inner.energy_forces(x, forces)
    }
}

/// Coordinates the collective-variable grid is built on.
pub fn cv_dims(gt: &GroundTruthPotential) -> Vec<usize> {
    match gt.kind() {
        PotentialKind::DoubleWellNd => vec![0],
        _ => vec![0, 1],
    }
}

/// Histogram grid over the CV coordinates with `bins` per dimension. The
/// double well uses `[-2, 2]`, the others their full domain.
pub fn cv_grid(gt: &GroundTruthPotential, bins: usize) -> GridSpec {
    let axes = cv_dims(gt)
        .iter()
        .map(|&d| match gt.kind() {
            PotentialKind::ToyDipeptideTorus => Axis::angular(bins),
            PotentialKind::DoubleWellNd => Axis::new(-2.0, 2.0, bins),
            PotentialKind::MullerBrown => {
                let (lo, hi) = gt.domain_bounds()[d];
                Axis::new(lo, hi, bins)
            }
        })
        .collect();
    GridSpec::new(axes)
}

/// Local minima sorted by energy; the double well's are placed analytically.
pub fn minima(gt: &GroundTruthPotential) -> Vec<Vec<f64>> {
    if gt.kind() == PotentialKind::DoubleWellNd {
        let dim = gt.dim();
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        a[0] = -1.0;
        b[0] = 1.0;
        return vec![a, b];
    }
    gt.find_minima(120)
}

/// Index into `minima` of the basin `x` drains into.
pub fn basin(gt: &GroundTruthPotential, minima: &[Vec<f64>], x: &[f64]) -> usize {
    if gt.kind() == PotentialKind::DoubleWellNd {
        return usize::from(x[0] >= 0.0);
    }
    gt.basin_of(x, minima)
}

/// Frames of unbiased ground-truth Langevin at `kt` from `start`, every
/// `stride` steps after `equilibration`, keeping those accepted by `keep`.
/// A run that leaves the domain is restarted from `start` with a fresh seed.
#[allow(clippy::too_many_arguments)]
pub fn sample_ground_truth(
    gt: &GroundTruthPotential,
    start: &[f64],
    kt: f64,
    n: usize,
    stride: u64,
    equilibration: u64,
    seed: u64,
    keep: impl Fn(&[f64]) -> bool,
) -> Result<Vec<Vec<f64>>> {
    const MAX_SEGMENTS: u64 = 10_000;
    let mut sim = Simulation::unbiased(gt, Thermo::new(kt));
    sim.limits = Limits::new(kt, f64::INFINITY);
    let est = AbfEstimator::new(0.0, 1.0, 1, 1)?;
    let start = gt.config(start.to_vec());
    let mut out = Vec::with_capacity(n);
    for segment in 0..MAX_SEGMENTS {
        let remaining = (n - out.len()) as u64;
        let steps = equilibration + stride * remaining.max(1);
        let traj = run_simulation(&sim, &start, steps, stride, est.clone(), derive_seed(seed, &[segment]))?;
        for f in traj.frames.iter().filter(|f| f.step > equilibration) {
            if keep(&f.coords) {
                out.push(f.coords.clone());
                if out.len() == n {
                    return Ok(out);
                }
            }
        }
    }
    Err(Error::Degenerate(format!("ground-truth sampling found {} of {n} frames", out.len())))
}

fn label_all(gt: &GroundTruthPotential, points: Vec<Vec<f64>>, provenance: Provenance) -> Result<LabeledSet> {
    let configs: Vec<Configuration> = points.into_iter().map(|p| gt.config(p)).collect();
    let mut set = LabeledSet::new();
    set.extend(label_with_oracle(&configs, gt, provenance)?)?;
    Ok(set)
}

/// Initial dataset: unbiased ground truth at `kt1` from the global minimum,
/// restricted to its basin.
pub fn initial_dataset(config: &RunConfig, gt: &GroundTruthPotential, minima: &[Vec<f64>]) -> Result<LabeledSet> {
    let seed = derive_seed(config.seed, &[label("initial")]);
    let points = sample_ground_truth(gt, &minima[0], config.kt1, config.initial_points, 50, 500, seed, |x| {
        basin(gt, minima, x) == 0
    })?;
    label_all(gt, points, Provenance::Initial)
}

/// Held-out test set: half from unbiased ground truth at `kt2`, half at
/// `4 kt1`.
pub fn test_dataset(config: &RunConfig, gt: &GroundTruthPotential, minima: &[Vec<f64>]) -> Result<LabeledSet> {
    let half = config.test_points / 2;
    let mut points = Vec::with_capacity(config.test_points);
    for (i, (kt, n)) in [(config.kt2, half), (4.0 * config.kt1, config.test_points - half)].into_iter().enumerate() {
        let seed = derive_seed(config.seed, &[label("test"), i as u64]);
        points.extend(sample_ground_truth(gt, &minima[0], kt, n, 20, 1000, seed, |_| true)?);
    }
    label_all(gt, points, Provenance::Initial)
}

/// Outcome of one biased or unbiased exploration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kt: f64,
    pub mode: Mode,
    pub termination: Termination,
    pub steps_completed: u64,
    pub frames: usize,
    pub gamd_k: Option<f64>,
    pub gamd_e: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfReport {
    /// PMF error in kT1 units over bins defined in both surfaces.
    pub pmf_mae: f64,
    pub pmf_bins_compared: usize,
    pub mbar_iterations: usize,
    pub mbar_residual: f64,
}

/// Per-generation record. Dataset size, coverage and test errors describe
/// the training set this generation started from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: u32,
    pub method: Method,
    pub dataset_size: usize,
    /// Fraction of coverage-grid bins holding a training configuration.
    pub coverage: f64,
    /// Same fraction for the frames sampled in this generation.
    pub trajectory_coverage: f64,
    /// Test errors of the exploration model.
    pub test_energy_mae: f64,
    pub test_force_mae: f64,
    /// Test errors of the production-size model fitted on the same dataset.
    pub production_energy_mae: f64,
    pub production_force_mae: f64,
    pub schedule: Schedule,
    pub gamma: Option<f64>,
    pub q_hat: Option<f64>,
    pub calibration_size: usize,
    pub runs: Vec<RunReport>,
    pub candidates: usize,
    pub clusters: usize,
    pub acquired: usize,
    /// Both runs stopped before their first step.
    pub degenerate: bool,
    pub pmf: Option<PmfReport>,
}

/// Files of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["models", "trajectories", "reports"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn config_lock(&self) -> PathBuf {
        self.root.join("config.lock")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, generation: u32) -> PathBuf {
        self.reports().join(format!("gen{generation:02}.json"))
    }
}

/// All reports of a run directory, in generation order.
pub fn load_reports(root: &Path) -> Result<Vec<GenerationReport>> {
    let dir = RunDir { root: root.to_path_buf() };
    let mut out = Vec::new();
    for g in 1.. {
        let p = dir.report(g);
        if !p.exists() {
            break;
        }
        out.push(serde_json::from_str(&std::fs::read_to_string(p)?)?);
    }
    Ok(out)
}

/// Models fitted at the start of a generation.
pub enum Explorer {
    Gmm(GmmUncertainty),
    Ensemble(Ensemble),
    Plain(GmmUncertainty),
}

impl Explorer {
    pub fn pes(&self) -> &dyn Pes {
        match self {
            Explorer::Gmm(u) | Explorer::Plain(u) => &u.model,
            Explorer::Ensemble(e) => e,
        }
    }

    /// Latent vector used for clustering.
    pub fn latent(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Explorer::Gmm(u) | Explorer::Plain(u) => u.model.latent(x),
            Explorer::Ensemble(e) => e.members[0].latent(x),
        }
    }

    pub fn cv(&self) -> Box<dyn CollectiveVariable + '_> {
        match self {
            Explorer::Gmm(u) | Explorer::Plain(u) => Box::new(UncertaintyCv(u)),
            Explorer::Ensemble(e) => Box::new(EnsembleCv(e)),
        }
    }
}

struct UncertaintyCv<'a>(&'a GmmUncertainty);

impl CollectiveVariable for UncertaintyCv<'_> {
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.0.value_and_gradient(x, grad)
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.0.value(x)
    }
}

/// Models and trajectories of one generation before acquisition.
pub struct GenerationSamples {
    pub generation: u32,
    pub schedule: Schedule,
    pub gamma: Option<f64>,
    pub explorer: Explorer,
    pub calibration_size: usize,
    pub trajectories: Vec<Trajectory>,
    pub runs: Vec<RunReport>,
    pub manifests: Vec<RunManifest>,
}

/// Everything a campaign carries between generations.
pub struct Campaign {
    pub config: RunConfig,
    pub ground_truth: GroundTruthPotential,
    pub minima: Vec<Vec<f64>>,
    pub dataset: LabeledSet,
    pub test_set: LabeledSet,
    pub coverage_grid: GridSpec,
    pub reports: Vec<GenerationReport>,
    pub run_dir: Option<RunDir>,
}

impl Campaign {
    /// Builds the initial and test datasets; writes `config.lock` when the
    /// config names an output directory.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let gt = config.ground_truth();
        let minima = minima(&gt);
        let dataset = initial_dataset(&config, &gt, &minima)?;
        let test_set = test_dataset(&config, &gt, &minima)?;
        let run_dir = if config.output_dir.is_empty() {
            None
        } else {
            let d = RunDir::create(Path::new(&config.output_dir))?;
            std::fs::write(d.config_lock(), config.to_text())?;
            std::fs::write(d.dataset(), dataset.to_csv())?;
            Some(d)
        };
        Ok(Campaign {
            coverage_grid: cv_grid(&gt, config.coverage_bins),
            config,
            ground_truth: gt,
            minima,
            dataset,
            test_set,
            reports: Vec::new(),
            run_dir,
        })
    }

    /// Reopens a run directory written by an earlier campaign: the config is
    /// read from `config.lock`, the dataset from `dataset.csv` and the
    /// finished generations from `reports/`.
    pub fn resume(root: &Path) -> Result<Self> {
        let dir = RunDir { root: root.to_path_buf() };
        let mut config = RunConfig::parse(&std::fs::read_to_string(dir.config_lock())?)?;
        config.output_dir = root.to_string_lossy().into_owned();
        let gt = config.ground_truth();
        let minima = minima(&gt);
        let reports = load_reports(root)?;
        let dataset = if dir.dataset().exists() {
            LabeledSet::from_csv(&std::fs::read_to_string(dir.dataset())?, gt.periodic())?
        } else if reports.is_empty() {
            initial_dataset(&config, &gt, &minima)?
        } else {
            return Err(Error::Config(format!("{} has reports but no dataset", root.display())));
        };
        let last = dataset
            .records()
            .iter()
            .map(|r| match r.provenance {
                Provenance::Initial => 0,
                Provenance::Generation(g) => g,
            })
            .max()
            .unwrap_or(0);
        if last > reports.len() as u32 {
            return Err(Error::Config(format!(
                "dataset holds generation {last} but only {} reports exist",
                reports.len()
            )));
        }
        let test_set = test_dataset(&config, &gt, &minima)?;
        Ok(Campaign {
            coverage_grid: cv_grid(&gt, config.coverage_bins),
            config,
            ground_truth: gt,
            minima,
            dataset,
            test_set,
            reports,
            run_dir: Some(RunDir::create(root)?),
        })
    }

    pub fn next_generation(&self) -> u32 {
        self.reports.len() as u32 + 1
    }

    fn seed(&self, generation: u32, stream: &str) -> u64 {
        derive_seed(self.config.seed, &[label(stream), generation as u64])
    }

    fn fit_options(&self, generation: u32) -> FitOptions {
        FitOptions {
            ridge: self.config.ridge,
            force_weight: self.config.force_weight,
            generation,
        }
    }

    /// Surrogate with `features` lattice centres on the ground-truth domain.
    pub fn fit_surrogate(&self, data: &LabeledSet, features: usize, generation: u32) -> Result<SurrogateModel> {
        let gt = &self.ground_truth;
        let fm = FeatureMap::lattice_with_size(gt.domain_bounds(), gt.periodic(), features, self.config.width_factor, 0.0)?;
        SurrogateModel::fit(&fm, data, &self.fit_options(generation))
    }

    /// Splits the dataset into training and calibration records with a
    /// fresh shuffle per generation.
    pub fn calibration_split(&self, generation: u32) -> (LabeledSet, LabeledSet) {
        let n = self.dataset.len();
        let n_cal = self
            .config
            .calibration_size
            .min((n as f64 * self.config.calibration_fraction).floor() as usize)
            .max(1)
            .min(n.saturating_sub(1));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from(self.seed(generation, "split"), &[]));
        let (cal, train) = idx.split_at_mut(n_cal);
        cal.sort_unstable();
        train.sort_unstable();
        (self.dataset.subset(train), self.dataset.subset(cal))
    }

    /// Fits the models the configured method samples with.
    pub fn fit_explorer(&self, generation: u32) -> Result<(Explorer, usize)> {
        let c = &self.config;
        match c.method {
            Method::EnsembleCv => {
                let gt = &self.ground_truth;
                let per_dim = (c.features_explore as f64).powf(1.0 / gt.dim() as f64).round() as usize;
                let e = Ensemble::train(
                    gt.domain_bounds(),
                    gt.periodic(),
                    &self.dataset,
                    c.ensemble_members,
                    per_dim,
                    &self.fit_options(generation),
                    self.seed(generation, "ensemble"),
                )?;
                Ok((Explorer::Ensemble(e), 0))
            }
            _ => {
                let (train, cal) = self.calibration_split(generation);
                let model = self.fit_surrogate(&train, c.features_explore, generation)?;
                let mut u = GmmUncertainty::fit(model, &train, &c.uncertainty_options(), self.seed(generation, "gmm"))?;
                u.calibrate(&cal, c.alpha)?;
                let n_cal = cal.len();
                Ok((
                    if c.method == Method::GmmCv {
                        Explorer::Gmm(u)
                    } else {
                        Explorer::Plain(u)
                    },
                    n_cal,
                ))
            }
        }
    }

    /// Uniformly drawn training configuration, relaxed on `pes`.
    pub fn start_config(&self, pes: &dyn Pes, generation: u32) -> Configuration {
        let mut rng = rng_from(self.seed(generation, "start"), &[]);
        let pick = &self.dataset.records()[rng.random_range(0..self.dataset.len())];
        let relaxed = fire_relax(pes, &pick.config, self.config.fire_steps, &FireParams::default());
        if pes.domain_violation(relaxed.coords()).is_some() {
            pick.config.clone()
        } else {
            relaxed
        }
    }

    /// Runs one exploration trajectory at `kt` under `mode` (or the bias
    /// policy of the method). GaMD parameters come from an unbiased pre-run
    /// on the same surface.
    #[allow(clippy::too_many_arguments)]
    pub fn explore(
        &self,
        explorer: &Explorer,
        mode: Mode,
        kt: f64,
        sched: &Schedule,
        gamma: Option<f64>,
        start: &Configuration,
        seed: u64,
    ) -> Result<(Trajectory, RunReport, RunManifest)> {
        let c = &self.config;
        let pes = Bounded {
            inner: explorer.pes(),
            bounds: self.ground_truth.domain_bounds().to_vec(),
        };
        let thermo = Thermo::new(kt);
        let gamd = if mode == Mode::EabfGamd {
            Some(self.gamd_prerun(&pes, thermo, start, derive_seed(seed, &[label("gamd")]))?)
        } else {
            None
        };
        let cv = explorer.cv();
        let attraction;
        let mut sim = Simulation::unbiased(&pes, thermo);
        sim.cv = Some(cv.as_ref());
        sim.mode = mode;
        if mode.is_biased() {
            sim.coupling = Some(CouplingParams::new(sched.sigma, kt, thermo.dt)?);
            sim.gamd = gamd.clone();
            sim.limits = Limits::new(kt, c.cv_abort);
        } else {
            sim.limits = Limits::new(kt, f64::INFINITY);
            if let (Some(g), Explorer::Plain(u)) = (gamma, explorer) {
                attraction = UncertaintyAttraction { uncertainty: u, gamma: g };
                sim.bias = Some(&attraction as &dyn ExternalBias);
            }
        }
        let est = AbfEstimator::new(c.cv_lo, c.cv_hi, c.abf_bins, c.abf_n_full)?;
        let traj = run_simulation(&sim, start, sched.steps, c.record_stride, est, seed)?;
        let manifest = traj.manifest(&sim, seed, sched.steps, c.record_stride);
        let report = RunReport {
            kt,
            mode,
            termination: traj.termination,
            steps_completed: traj.steps_completed,
            frames: traj.frames.len(),
            gamd_k: gamd.as_ref().map(|g| g.k),
            gamd_e: gamd.as_ref().map(|g| g.e),
        };
        Ok((traj, report, manifest))
    }

    fn gamd_prerun(&self, pes: &dyn Pes, thermo: Thermo, start: &Configuration, seed: u64) -> Result<GamdParams> {
        let mut sim = Simulation::unbiased(pes, thermo);
        sim.limits = Limits::new(thermo.kt, f64::INFINITY);
        let traj = run_simulation(&sim, start, self.config.gamd_prerun, 1, AbfEstimator::new(0.0, 1.0, 1, 1)?, seed)?;
        let energies: Vec<f64> = traj.frames.iter().map(|f| f.energy).collect();
        if energies.len() < 2 {
            return Ok(GamdParams::disabled());
        }
        gamd_estimate(&energies, self.config.gamd_sigma0)
    }

    /// Mode of the exploration runs for the configured method.
    pub fn exploration_mode(&self) -> Mode {
        match self.config.method {
            Method::GmmCv | Method::EnsembleCv => self.config.sampling_mode,
            Method::BiasEnergy | Method::Unbiased => Mode::Unbiased,
        }
    }

    /// Fits the next generation's models and runs its two exploration
    /// trajectories (kT1, then kT2) without touching the dataset.
    pub fn sample_generation(&self) -> Result<GenerationSamples> {
        let g = self.next_generation();
        let c = &self.config;
        let (schedule, gamma) = method_schedule(g, c)?;
        let (explorer, calibration_size) = self.fit_explorer(g)?;
        let start = self.start_config(explorer.pes(), g);
        let mode = self.exploration_mode();
        let mut samples = GenerationSamples {
            generation: g,
            schedule,
            gamma,
            explorer,
            calibration_size,
            trajectories: Vec::new(),
            runs: Vec::new(),
            manifests: Vec::new(),
        };
        for (i, kt) in [c.kt1, c.kt2].into_iter().enumerate() {
            let seed = self.seed(g, &format!("run{i}"));
            let (t, r, m) = self.explore(&samples.explorer, mode, kt, &schedule, gamma, &start, seed)?;
            samples.trajectories.push(t);
            samples.runs.push(r);
            samples.manifests.push(m);
        }
        Ok(samples)
    }

    /// Writes a generation's trajectories and their manifests.
    pub fn write_trajectories(&self, dir: &RunDir, samples: &GenerationSamples) -> Result<()> {
        for (i, (t, m)) in samples.trajectories.iter().zip(&samples.manifests).enumerate() {
            t.write(&dir.trajectories(), &format!("gen{:02}_run{i}", samples.generation), m)?;
        }
        Ok(())
    }

    /// One generation: fit, sample at both temperatures, acquire, label and
    /// append.
    pub fn run_generation(&mut self) -> Result<GenerationReport> {
        let samples = self.sample_generation()?;
        let g = samples.generation;
        let c = self.config.clone();
        let sched = samples.schedule;
        let explorer = &samples.explorer;
        let (test_energy_mae, test_force_mae) = evaluate_test_set(explorer.pes(), &self.test_set)?;
        let coverage = self.dataset_coverage();
        let trajs = &samples.trajectories;
        let runs = samples.runs.clone();
        let degenerate = runs.iter().all(|r| r.steps_completed == 0);

        let pool: Vec<&Frame> = trajs.iter().flat_map(|t| t.frames.iter()).collect();
        let pts: Vec<Vec<f64>> = pool.iter().map(|f| cv_slice(&f.coords, &self.ground_truth)).collect();
        let trajectory_coverage = coverage_fraction(pts.iter().map(|v| v.as_slice()), &self.coverage_grid);
        let u: Vec<f64> = pool.iter().map(|f| f.xi).collect();
        let latents: Vec<Vec<f64>> = pool.iter().map(|f| explorer.latent(&f.coords)).collect();
        let policy = AcquisitionPolicy {
            u_cutoff: sched.cutoff,
            cutoff_growth: c.cutoff_growth,
            cosine_threshold: c.cosine_threshold,
            max_new_per_generation: c.max_new,
            max_candidates: c.max_candidates,
            seed: self.seed(g, "acquire"),
        };
        policy.validate()?;
        let outcome: AcquisitionOutcome = acquire(&u, &latents, sched.cutoff, &policy, &mut rng_from(policy.seed, &[]))?;
        let configs: Vec<Configuration> = outcome
            .selected
            .iter()
            .map(|&i| self.ground_truth.config(pool[i].coords.clone()))
            .collect();
        let new: Vec<LabeledRecord> = label_with_oracle(&configs, &self.ground_truth, Provenance::Generation(g))?;

        let production = self.fit_surrogate(&self.dataset, c.features_production, g)?;
        let (production_energy_mae, production_force_mae) = evaluate_test_set(&production, &self.test_set)?;
        let pmf = if c.pmf_generations.contains(&g) {
            Some(self.pmf_checkpoint(&production, g)?)
        } else {
            None
        };

        let q_hat = match explorer {
            Explorer::Gmm(u) | Explorer::Plain(u) => Some(u.scale.q_hat),
            Explorer::Ensemble(_) => None,
        };
        let report = GenerationReport {
            generation: g,
            method: c.method,
            dataset_size: self.dataset.len(),
            coverage,
            trajectory_coverage,
            test_energy_mae,
            test_force_mae,
            production_energy_mae,
            production_force_mae,
            schedule: sched,
            gamma: samples.gamma,
            q_hat,
            calibration_size: samples.calibration_size,
            runs,
            candidates: outcome.candidates,
            clusters: outcome.clusters,
            acquired: new.len(),
            degenerate,
            pmf,
        };
        if let Some(dir) = &self.run_dir {
            self.persist(dir, &samples, &report)?;
        }
        self.dataset.extend(new)?;
        if let Some(dir) = &self.run_dir {
            std::fs::write(dir.dataset(), self.dataset.to_csv())?;
        }
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Coverage of the current dataset on the coverage grid.
    pub fn dataset_coverage(&self) -> f64 {
        let pts: Vec<Vec<f64>> = self.dataset.configs().map(|c| cv_slice(c.coords(), &self.ground_truth)).collect();
        coverage_fraction(pts.iter().map(|v| v.as_slice()), &self.coverage_grid)
    }

    /// Umbrella/MBAR PMF of the production model and its error against the
    /// ground-truth reference.
    pub fn pmf_checkpoint(&self, model: &SurrogateModel, generation: u32) -> Result<PmfReport> {
        let c = &self.config;
        let (pmf, mbar_iterations, mbar_residual) = self.umbrella_pmf(model, self.seed(generation, "umbrella"))?;
        let grid = &pmf.grid;
        let reference = reference_pmf_binned(&self.ground_truth, grid, &cv_dims(&self.ground_truth), c.kt1, 64, 8)?;
        let capped = cap_reference(&reference, c.pmf_cap * c.kt1);
        let pmf_mae = pmf_mae(&pmf.values, &capped, Alignment::Mean)? / c.kt1;
        let pmf_bins_compared = pmf.values.iter().zip(&capped).filter(|(a, b)| a.is_some() && b.is_some()).count();
        if let Some(dir) = &self.run_dir {
            model.save(&dir.models().join(format!("gen{generation:02}_production.json")))?;
            std::fs::write(dir.reports().join(format!("pmf_gen{generation:02}.csv")), pmf.to_csv())?;
        }
        Ok(PmfReport {
            pmf_mae,
            pmf_bins_compared,
            mbar_iterations,
            mbar_residual,
        })
    }

    /// Umbrella sampling on `model` at `kt1` over the PMF grid, combined by
    /// MBAR.
    pub fn umbrella_pmf(&self, model: &SurrogateModel, seed: u64) -> Result<(PmfGrid, usize, f64)> {
        let c = &self.config;
        let gt = &self.ground_truth;
        let grid = cv_grid(gt, c.pmf_bins);
        let pes = Bounded {
            inner: model,
            bounds: gt.domain_bounds().to_vec(),
        };
        let plan = UmbrellaPlan::on_grid(&grid, cv_dims(gt), c.kt1, c.pmf_steps, c.pmf_equilibration, seed);
        let template = gt.config(self.minima[0].clone());
        let windows = run_umbrella(&pes, &template, &plan)?;
        let (mbar, samples) = mbar_windows(&windows, c.kt1, MBAR_TOL, MBAR_MAX_ITER)?;
        Ok((pmf_from_weights(&samples, &mbar.weights, &grid, c.kt1), mbar.iterations, mbar.residual))
    }

    /// Saves the exploration models of generation `g`.
    pub fn save_explorer(&self, dir: &RunDir, g: u32, explorer: &Explorer) -> Result<()> {
        match explorer {
            Explorer::Gmm(u) | Explorer::Plain(u) => {
                u.model.save(&dir.models().join(format!("gen{g:02}_surrogate.json")))?;
                u.save(&dir.models().join(format!("gen{g:02}_uncertainty.json")))?;
            }
            Explorer::Ensemble(e) => {
                std::fs::write(dir.models().join(format!("gen{g:02}_ensemble.json")), serde_json::to_string(e)?)?;
            }
        }
        Ok(())
    }

    fn persist(&self, dir: &RunDir, samples: &GenerationSamples, report: &GenerationReport) -> Result<()> {
        let g = samples.generation;
        self.save_explorer(dir, g, &samples.explorer)?;
        self.write_trajectories(dir, samples)?;
        std::fs::write(dir.report(g), serde_json::to_string_pretty(report)?)?;
        let mut acq = String::from("generation,candidates,clusters,selected\n");
        for r in self.reports.iter().chain(std::iter::once(report)) {
            acq.push_str(&format!("{},{},{},{}\n", r.generation, r.candidates, r.clusters, r.acquired));
        }
        std::fs::write(dir.reports().join("acquisition.csv"), acq)?;
        Ok(())
    }
}

fn cv_slice(x: &[f64], gt: &GroundTruthPotential) -> Vec<f64> {
    cv_dims(gt).iter().map(|&d| x[d]).collect()
}

/// Result of a full campaign.
pub struct CampaignOutcome {
    pub reports: Vec<GenerationReport>,
    pub dataset: LabeledSet,
}

impl CampaignOutcome {
    /// True when any generation was degenerate.
    pub fn degenerate(&self) -> bool {
        self.reports.iter().any(|r| r.degenerate)
    }
}

/// Runs every generation of `config`.
pub fn run_campaign(config: RunConfig) -> Result<CampaignOutcome> {
    let mut c = Campaign::new(config)?;
    for _ in 0..c.config.generations {
        c.run_generation()?;
    }
    Ok(CampaignOutcome {
        reports: c.reports,
        dataset: c.dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::GroundTruthPotential;

    fn full() -> RunConfig {
        RunConfig {
            full_scale: true,
            ..RunConfig::default()
        }
    }

    #[test]
    fn schedule_values() {
        let c = full();
        let s1 = schedule(1, &c).unwrap();
        assert_eq!((s1.steps, s1.sigma, s1.cutoff), (50_000, 0.5, 2.0));
        let s2 = schedule(2, &c).unwrap();
        assert_eq!(s2.steps, 60_000);
        assert!((s2.sigma - 0.4).abs() < 1e-12 && (s2.cutoff - 2.1).abs() < 1e-12);
        let s5 = schedule(5, &c).unwrap();
        assert_eq!(s5.steps, 103_680);
        assert!((s5.sigma - 0.2048).abs() < 1e-12);
        // 2 * 1.05^4 by hand
        assert!((s5.cutoff - 2.431_012_5).abs() < 1e-12);
        assert!(schedule(0, &c).is_err());
        assert_eq!(schedule(1, &RunConfig::default()).unwrap().steps, 20_000);
    }

    #[test]
    fn method_schedules() {
        let mut c = full();
        c.method = Method::EnsembleCv;
        let (s, g) = method_schedule(1, &c).unwrap();
        assert_eq!((s.sigma, s.cutoff, g), (0.15, 0.25, None));
        let (s, _) = method_schedule(3, &c).unwrap();
        assert!((s.sigma - 0.15 * 0.81).abs() < 1e-12);
        c.method = Method::BiasEnergy;
        let (s, g) = method_schedule(2, &c).unwrap();
        assert!((g.unwrap() - 0.0065).abs() < 1e-15);
        assert!((s.cutoff - 1.8).abs() < 1e-12);
        assert_eq!(s.steps, 60_000);
    }

    fn labelled(gt: &GroundTruthPotential, pts: &[[f64; 2]]) -> LabeledSet {
        label_all(gt, pts.iter().map(|p| p.to_vec()).collect(), Provenance::Initial).unwrap()
    }

    struct Constant(f64);

    impl Pes for Constant {
        fn dim(&self) -> usize {
            2
        }

        fn periodic(&self) -> &[bool] {
            &[false, false]
        }

        fn bounds(&self) -> Option<&[(f64, f64)]> {
            None
        }

        fn energy_forces(&self, _: &[f64], f: &mut [f64]) -> f64 {
            f.fill(0.0);
            self.0
        }
    }

    #[test]
    fn test_set_errors() {
        let gt = RunConfig::default().ground_truth();
        let set = labelled(&gt, &[[-0.5, 1.4], [0.6, 0.0], [0.0, 0.5]]);
        assert_eq!(evaluate_test_set(&gt, &set).unwrap(), (0.0, 0.0));

        let mut e_abs = 0.0;
        let mut f_abs = 0.0;
        for r in set.records() {
            e_abs += (r.energy - 1.5).abs();
            f_abs += r.forces.iter().map(|f| f.abs()).sum::<f64>();
        }
        let (e, f) = evaluate_test_set(&Constant(1.5), &set).unwrap();
        assert!((e - e_abs / 3.0).abs() < 1e-12);
        assert!((f - f_abs / 6.0).abs() < 1e-12);
        assert!(evaluate_test_set(&gt, &LabeledSet::new()).is_err());
    }

    #[test]
    fn grids_and_basins() {
        let gt = RunConfig::default().ground_truth();
        assert_eq!(cv_grid(&gt, 50).total_bins(), 2500);
        let m = minima(&gt);
        assert_eq!(m.len(), 3);
        assert_eq!(basin(&gt, &m, &[-0.55, 1.45]), 0);

        let mut c = RunConfig::default();
        c.potential = PotentialKind::DoubleWellNd;
        c.potential_dim = 3;
        let dw = c.ground_truth();
        assert_eq!(cv_dims(&dw), vec![0]);
        let m = minima(&dw);
        assert_eq!(basin(&dw, &m, &[0.3, -1.0, 2.0]), 1);
        assert_eq!(basin(&dw, &m, &[-0.3, 1.0, 2.0]), 0);
    }

    #[test]
    fn ground_truth_sampling_is_seeded_and_filtered() {
        let gt = RunConfig::default().ground_truth();
        let m = minima(&gt);
        let keep = |x: &[f64]| x[1] > 1.3;
        let a = sample_ground_truth(&gt, &m[0], 1.0, 30, 10, 100, 7, keep).unwrap();
        let b = sample_ground_truth(&gt, &m[0], 1.0, 30, 10, 100, 7, keep).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|x| x[1] > 1.3));
        let c = sample_ground_truth(&gt, &m[0], 1.0, 30, 10, 100, 8, keep).unwrap();
        assert_ne!(a, c);
    }

    fn report() -> GenerationReport {
        GenerationReport {
            generation: 3,
            method: Method::GmmCv,
            dataset_size: 140,
            coverage: 0.0312,
            trajectory_coverage: 0.1 / 3.0,
            test_energy_mae: 1.0 / 7.0,
            test_force_mae: 2.5,
            production_energy_mae: 0.3,
            production_force_mae: 0.7,
            schedule: Schedule {
                steps: 28_800,
                sigma: 0.32000000000000006,
                cutoff: 2.205,
            },
            gamma: None,
            q_hat: Some(1.234_567_890_123_456_7),
            calibration_size: 28,
            runs: vec![RunReport {
                kt: 1.667,
                mode: Mode::EabfGamd,
                termination: Termination::CvAbort,
                steps_completed: 1234,
                frames: 124,
                gamd_k: Some(0.25),
                gamd_e: Some(-3.0),
            }],
            candidates: 80,
            clusters: 20,
            acquired: 20,
            degenerate: false,
            pmf: Some(PmfReport {
                pmf_mae: 0.41,
                pmf_bins_compared: 97,
                mbar_iterations: 311,
                mbar_residual: 9.9e-7,
            }),
        }
    }

    #[test]
    fn report_serde_roundtrip() {
        let r = report();
        let back: GenerationReport = serde_json::from_str(&serde_json::to_string_pretty(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn reports_reload_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        for g in 1..=3 {
            let mut r = report();
            r.generation = g;
            std::fs::write(run.report(g), serde_json::to_string(&r).unwrap()).unwrap();
        }
        let back = load_reports(dir.path()).unwrap();
        assert_eq!(back.iter().map(|r| r.generation).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(run.report(11).ends_with("gen11.json"));
    }
}
