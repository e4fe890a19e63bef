//! Langevin dynamics with an extended-system ABF bias on a collective
//! variable and an optional Gaussian-accelerated boost.

use crate::error::{check_dim, Error, Result};
use crate::grid::Axis;
use crate::potentials::{Configuration, Pes};
use crate::rng::{seeded, Rng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

/// A scalar function of the coordinates with its gradient.
pub trait CollectiveVariable: Sync {
    /// Writes the gradient into `grad` and returns the value.
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.value_gradient(x, &mut g)
    }
}

/// The CV `x[index]`.
#[derive(Clone, Copy, Debug)]
pub struct CoordinateCv(pub usize);

impl CollectiveVariable for CoordinateCv {
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        grad[self.0] = 1.0;
        x[self.0]
    }
}

/// An additional fixed bias acting on the physical coordinates.
pub trait ExternalBias: Sync {
    /// Adds the bias force to `forces` and returns the bias energy.
    fn add_bias(&self, x: &[f64], forces: &mut [f64]) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unbiased,
    Eabf,
    EabfGamd,
}

impl Mode {
    pub fn is_biased(self) -> bool {
        self != Mode::Unbiased
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Unbiased => "unbiased",
            Mode::Eabf => "eabf",
            Mode::EabfGamd => "eabf_gamd",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbiased" => Ok(Mode::Unbiased),
            "eabf" => Ok(Mode::Eabf),
            "eabf_gamd" => Ok(Mode::EabfGamd),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thermo {
    pub kt: f64,
    pub friction: f64,
    pub dt: f64,
}

impl Thermo {
    pub const DEFAULT_DT: f64 = 0.005;
    pub const DEFAULT_FRICTION: f64 = 1.0;

    pub fn new(kt: f64) -> Self {
        Thermo {
            kt,
            friction: Self::DEFAULT_FRICTION,
            dt: Self::DEFAULT_DT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    pub sigma: f64,
    pub beta: f64,
    pub lambda_mass: f64,
}

/// Spring period of the default fictitious mass, in time steps.
pub const LAMBDA_PERIOD_STEPS: f64 = 40.0;

impl CouplingParams {
    /// Mass chosen so that the spring period is `LAMBDA_PERIOD_STEPS * dt`.
    pub fn new(sigma: f64, kt: f64, dt: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(kt > 0.0) {
            return Err(Error::invalid("coupling needs sigma > 0 and kT > 0"));
        }
        let beta = 1.0 / kt;
        let kappa = 1.0 / (beta * sigma * sigma);
        let period = LAMBDA_PERIOD_STEPS * dt / (2.0 * std::f64::consts::PI);
        Ok(CouplingParams {
            sigma,
            beta,
            lambda_mass: kappa * period * period,
        })
    }

    /// Spring constant `1 / (beta sigma^2)`.
    pub fn kappa(&self) -> f64 {
        1.0 / (self.beta * self.sigma * self.sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbfEstimator {
    pub axis: Axis,
    pub counts: Vec<u64>,
    pub sums: Vec<f64>,
    pub n_full: u64,
}

impl AbfEstimator {
    pub const DEFAULT_BINS: usize = 64;
    pub const DEFAULT_N_FULL: u64 = 100;

    pub fn new(lo: f64, hi: f64, bins: usize, n_full: u64) -> Result<Self> {
        if !(hi > lo) || bins == 0 || n_full == 0 {
            return Err(Error::invalid("ABF grid needs lo < hi, bins > 0, n_full > 0"));
        }
        Ok(AbfEstimator {
            axis: Axis::new(lo, hi, bins),
            counts: vec![0; bins],
            sums: vec![0.0; bins],
            n_full,
        })
    }

    pub fn record(&mut self, lambda: f64, force: f64) {
        if let Some(i) = self.axis.index(lambda) {
            self.counts[i] += 1;
            self.sums[i] += force;
        }
    }

    /// `-min(1, N / N_full) * mean force` in the bin of `lambda`.
    pub fn bias_force(&self, lambda: f64) -> f64 {
        match self.axis.index(lambda) {
            Some(i) if self.counts[i] > 0 => {
                let n = self.counts[i];
                let ramp = (n as f64 / self.n_full as f64).min(1.0);
                -ramp * self.sums[i] / n as f64
            }
            _ => 0.0,
        }
    }

    /// Keeps `lambda` inside the bin range by reflecting at the edges.
    fn confine(&self, lambda: &mut f64, velocity: &mut f64) {
        let (lo, hi) = (self.axis.lo, self.axis.hi);
        if *lambda < lo {
            *lambda = (2.0 * lo - *lambda).min(hi);
            *velocity = -*velocity;
        } else if *lambda > hi {
            *lambda = (2.0 * hi - *lambda).max(lo);
            *velocity = -*velocity;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GamdParams {
    pub k: f64,
    pub e: f64,
    pub sigma0: f64,
    pub v_max: f64,
    pub v_min: f64,
    pub v_avg: f64,
    pub sigma_v: f64,
}

pub const DEFAULT_SIGMA0: f64 = 0.01;

impl GamdParams {
    /// `k = (1 - sigma0 / sigma_V) (V_max - V_min) / (V_avg - V_min)` and
    /// `E = V_min + 1 / k`; `k = 0` when the statistics cannot support a boost.
    pub fn from_stats(v_max: f64, v_min: f64, v_avg: f64, sigma_v: f64, sigma0: f64) -> Self {
        let disabled = sigma_v <= sigma0 || v_avg <= v_min;
        let k = if disabled {
            0.0
        } else {
            (1.0 - sigma0 / sigma_v) * (v_max - v_min) / (v_avg - v_min)
        };
        let e = if k > 0.0 { v_min + 1.0 / k } else { v_min };
        GamdParams {
            k,
            e,
            sigma0,
            v_max,
            v_min,
            v_avg,
            sigma_v,
        }
    }

    pub fn disabled() -> Self {
        Self::from_stats(0.0, 0.0, 0.0, 0.0, DEFAULT_SIGMA0)
    }

    /// `(1/2 k (E - V)^2, -k (E - V))` below the threshold, zero above.
    pub fn boost(&self, v: f64) -> (f64, f64) {
        if v < self.e && self.k > 0.0 {
            let d = self.e - v;
            (0.5 * self.k * d * d, -self.k * d)
        } else {
            (0.0, 0.0)
        }
    }

    /// Factor applied to the physical force, `1 + dBoost/dV`.
    pub fn force_scale(&self, v: f64) -> f64 {
        1.0 + self.boost(v).1
    }
}

/// Boost constants from the energies of an unbiased pre-run (population
/// standard deviation).
pub fn gamd_estimate(energies: &[f64], sigma0: f64) -> Result<GamdParams> {
    if energies.is_empty() {
        return Err(Error::invalid("GaMD statistics need at least one energy"));
    }
    let n = energies.len() as f64;
    let v_max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let v_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let v_avg = energies.iter().sum::<f64>() / n;
    let sigma_v = (energies.iter().map(|v| (v - v_avg).powi(2)).sum::<f64>() / n).sqrt();
    Ok(GamdParams::from_stats(v_max, v_min, v_avg, sigma_v, sigma0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    /// Abort when `|V|` exceeds this.
    pub v_abort: f64,
    /// Abort when the CV exceeds this (biased modes only).
    pub xi_abort: f64,
}

impl Limits {
    pub fn new(kt: f64, xi_abort: f64) -> Self {
        Limits {
            v_abort: 1e3 * kt.max(f64::MIN_POSITIVE),
            xi_abort,
        }
    }

    pub fn none() -> Self {
        Limits {
            v_abort: f64::INFINITY,
            xi_abort: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    OutOfDomain,
    /// Non-finite energy, force or CV.
    Unphysical,
    EnergyAbort,
    CvAbort,
}

impl Termination {
    pub fn is_early(self) -> bool {
        self != Termination::Completed
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Completed => "completed",
            Termination::OutOfDomain => "out_of_domain",
            Termination::Unphysical => "unphysical",
            Termination::EnergyAbort => "energy_abort",
            Termination::CvAbort => "cv_abort",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedState {
    pub config: Configuration,
    pub velocities: Vec<f64>,
    pub lambda: f64,
    pub lambda_velocity: f64,
    pub time_step_index: u64,
    /// Physical energy at the current coordinates.
    pub energy: f64,
    /// CV at the current coordinates (NaN when not evaluated).
    pub xi: f64,
    forces: Vec<f64>,
    lambda_force: f64,
}

impl ExtendedState {
    pub fn forces(&self) -> &[f64] {
        &self.forces
    }

    pub fn lambda_force(&self) -> f64 {
        self.lambda_force
    }
}

/// Everything a run needs besides its owned state.
pub struct Simulation<'a> {
    pub pes: &'a dyn Pes,
    pub cv: Option<&'a dyn CollectiveVariable>,
    pub bias: Option<&'a dyn ExternalBias>,
    pub gamd: Option<GamdParams>,
    pub coupling: Option<CouplingParams>,
    pub thermo: Thermo,
    pub mode: Mode,
    pub limits: Limits,
}

struct Evaluation {
    energy: f64,
    xi: f64,
    spring: f64,
}

impl<'a> Simulation<'a> {
    pub fn unbiased(pes: &'a dyn Pes, thermo: Thermo) -> Self {
        Simulation {
            pes,
            cv: None,
            bias: None,
            gamd: None,
            coupling: None,
            thermo,
            mode: Mode::Unbiased,
            limits: Limits::none(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mode.is_biased() && (self.cv.is_none() || self.coupling.is_none()) {
            return Err(Error::invalid(format!("mode {} needs a CV and coupling", self.mode)));
        }
        if self.mode == Mode::EabfGamd && self.gamd.is_none() {
            return Err(Error::invalid("mode eabf_gamd needs GaMD parameters"));
        }
        if !(self.thermo.dt > 0.0) || !(self.thermo.kt >= 0.0) || !(self.thermo.friction >= 0.0) {
            return Err(Error::invalid("thermostat needs dt > 0, kT >= 0, friction >= 0"));
        }
        Ok(())
    }

    /// Forces at `state`'s coordinates, written into the state. Returns the
    /// spring force on lambda (0 when unbiased).
    fn evaluate(&self, state: &mut ExtendedState, grad: &mut [f64]) -> Evaluation {
        let x = state.config.coords();
        let forces = &mut state.forces;
        let energy = self.pes.energy_forces(x, forces);
        if self.mode == Mode::EabfGamd {
            if let Some(g) = &self.gamd {
                let s = g.force_scale(energy);
                forces.iter_mut().for_each(|f| *f *= s);
            }
        }
        if let Some(b) = self.bias {
            b.add_bias(x, forces);
        }
        let mut xi = f64::NAN;
        let mut spring = 0.0;
        if self.mode.is_biased() {
            let cv = self.cv.expect("validated");
            let kappa = self.coupling.expect("validated").kappa();
            xi = cv.value_gradient(x, grad);
            spring = kappa * (xi - state.lambda);
            for (f, g) in forces.iter_mut().zip(grad.iter()) {
                *f -= spring * g;
            }
        }
        Evaluation { energy, xi, spring }
    }

    fn check(&self, state: &ExtendedState, ev: &Evaluation) -> Option<Termination> {
        let finite = ev.energy.is_finite()
            && state.forces.iter().all(|f| f.is_finite())
            && (!self.mode.is_biased() || ev.xi.is_finite());
        if !finite {
            return Some(Termination::Unphysical);
        }
        if ev.energy.abs() > self.limits.v_abort {
            return Some(Termination::EnergyAbort);
        }
        if self.mode.is_biased() && ev.xi > self.limits.xi_abort {
            return Some(Termination::CvAbort);
        }
        None
    }

    /// State at `config` with Maxwell-Boltzmann velocities and lambda = xi.
    pub fn init_state(
        &self,
        config: &Configuration,
        estimator: &AbfEstimator,
        rng: &mut Rng,
    ) -> Result<std::result::Result<ExtendedState, Termination>> {
        self.validate()?;
        check_dim(self.pes.dim(), config.dim())?;
        let dim = config.dim();
        let sd = self.thermo.kt.sqrt();
        let velocities: Vec<f64> = (0..dim).map(|_| sd * normal(rng)).collect();
        let mut state = ExtendedState {
            config: config.clone(),
            velocities,
            lambda: 0.0,
            lambda_velocity: 0.0,
            time_step_index: 0,
            energy: 0.0,
            xi: f64::NAN,
            forces: vec![0.0; dim],
            lambda_force: 0.0,
        };
        if self.pes.domain_violation(config.coords()).is_some() {
            return Ok(Err(Termination::OutOfDomain));
        }
        if let (true, Some(cv), Some(c)) = (self.mode.is_biased(), self.cv, self.coupling) {
            let xi = cv.value(config.coords());
            state.lambda = xi;
            estimator.confine(&mut state.lambda, &mut 0.0);
            state.lambda_velocity = (self.thermo.kt / c.lambda_mass).sqrt() * normal(rng);
        }
        let mut grad = vec![0.0; dim];
        let ev = self.evaluate(&mut state, &mut grad);
        state.energy = ev.energy;
        state.xi = ev.xi;
        if let Some(t) = self.check(&state, &ev) {
            return Ok(Err(t));
        }
        if self.mode.is_biased() {
            state.lambda_force = ev.spring + estimator.bias_force(state.lambda);
        }
        Ok(Ok(state))
    }

    /// One BAOAB step for the coordinates and lambda. On termination the
    /// state is left at the rejected position and must not be emitted.
    pub fn step(&self, state: &mut ExtendedState, estimator: &mut AbfEstimator, rng: &mut Rng) -> std::result::Result<(), Termination> {
        let dt = self.thermo.dt;
        let half = 0.5 * dt;
        let c1 = (-self.thermo.friction * dt).exp();
        let c2 = (1.0 - c1 * c1).max(0.0).sqrt() * self.thermo.kt.sqrt();
        let biased = self.mode.is_biased();
        let m_l = self.coupling.map(|c| c.lambda_mass).unwrap_or(1.0);

        // B
        for (v, f) in state.velocities.iter_mut().zip(&state.forces) {
            *v += half * f;
        }
        // A O A
        let mut x = state.config.coords().to_vec();
        for (xi, v) in x.iter_mut().zip(&state.velocities) {
            *xi += half * v;
        }
        for v in state.velocities.iter_mut() {
            *v = c1 * *v + c2 * normal(rng);
        }
        for (xi, v) in x.iter_mut().zip(&state.velocities) {
            *xi += half * v;
        }
        state.config.set_coords(&x);
        if biased {
            state.lambda_velocity += half * state.lambda_force / m_l;
            state.lambda += half * state.lambda_velocity;
            state.lambda_velocity = c1 * state.lambda_velocity + c2 / m_l.sqrt() * normal(rng);
            state.lambda += half * state.lambda_velocity;
            estimator.confine(&mut state.lambda, &mut state.lambda_velocity);
        }
        state.time_step_index += 1;
        if self.pes.domain_violation(state.config.coords()).is_some() {
            return Err(Termination::OutOfDomain);
        }
        let mut grad = vec![0.0; x.len()];
        let ev = self.evaluate(state, &mut grad);
        state.energy = ev.energy;
        state.xi = ev.xi;
        if let Some(t) = self.check(state, &ev) {
            return Err(t);
        }
        // B
        for (v, f) in state.velocities.iter_mut().zip(&state.forces) {
            *v += half * f;
        }
        if biased {
            estimator.record(state.lambda, ev.spring);
            state.lambda_force = ev.spring + estimator.bias_force(state.lambda);
            state.lambda_velocity += half * state.lambda_force / m_l;
        }
        Ok(())
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub step: u64,
    pub coords: Vec<f64>,
    /// Physical (unboosted, unbiased) energy.
    pub energy: f64,
    /// CV value; NaN when the run does not evaluate one.
    pub xi: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    pub termination: Termination,
    /// Steps integrated successfully.
    pub steps_completed: u64,
    pub estimator: AbfEstimator,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub mode: Mode,
    pub n_steps: u64,
    pub record_stride: u64,
    pub thermo: Thermo,
    pub coupling: Option<CouplingParams>,
    pub gamd: Option<GamdParams>,
    pub termination: Termination,
    pub steps_completed: u64,
    pub frames: usize,
}

/// Integrates `n_steps` from `initial`, recording every `record_stride`
/// steps (step 0 included). Deterministic in `seed`.
pub fn run_simulation(
    sim: &Simulation,
    initial: &Configuration,
    n_steps: u64,
    record_stride: u64,
    mut estimator: AbfEstimator,
    seed: u64,
) -> Result<Trajectory> {
    if record_stride == 0 {
        return Err(Error::invalid("record stride must be positive"));
    }
    let mut rng = seeded(seed);
    let mut state = match sim.init_state(initial, &estimator, &mut rng)? {
        Ok(s) => s,
        Err(t) => {
            return Ok(Trajectory {
                frames: Vec::new(),
                termination: t,
                steps_completed: 0,
                estimator,
            })
        }
    };
    let cv_for_frames = if sim.mode.is_biased() { None } else { sim.cv };
    let frame = |s: &ExtendedState| Frame {
        step: s.time_step_index,
        coords: s.config.coords().to_vec(),
        energy: s.energy,
        xi: match cv_for_frames {
            Some(cv) => cv.value(s.config.coords()),
            None => s.xi,
        },
        lambda: if sim.mode.is_biased() { s.lambda } else { f64::NAN },
    };
    let mut frames = vec![frame(&state)];
    let mut termination = Termination::Completed;
    for _ in 0..n_steps {
        if let Err(t) = sim.step(&mut state, &mut estimator, &mut rng) {
            termination = t;
            break;
        }
        if state.time_step_index % record_stride == 0 {
            frames.push(frame(&state));
        }
    }
    let steps_completed = if termination.is_early() {
        state.time_step_index - 1
    } else {
        state.time_step_index
    };
    Ok(Trajectory {
        frames,
        termination,
        steps_completed,
        estimator,
    })
}

impl Trajectory {
    pub fn manifest(&self, sim: &Simulation, seed: u64, n_steps: u64, record_stride: u64) -> RunManifest {
        RunManifest {
            seed,
            mode: sim.mode,
            n_steps,
            record_stride,
            thermo: sim.thermo,
            coupling: sim.coupling,
            gamd: sim.gamd.clone(),
            termination: self.termination,
            steps_completed: self.steps_completed,
            frames: self.frames.len(),
        }
    }

    /// Columnar CSV: `step,x0..,V,xi,lambda`.
    pub fn to_csv(&self) -> String {
        let dim = self.frames.first().map_or(0, |f| f.coords.len());
        let mut out = String::from("step");
        for i in 0..dim {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(",V,xi,lambda\n");
        for f in &self.frames {
            out.push_str(&f.step.to_string());
            for c in &f.coords {
                out.push_str(&format!(",{c:?}"));
            }
            out.push_str(&format!(",{:?},{:?},{:?}\n", f.energy, f.xi, f.lambda));
        }
        out
    }

    pub fn write(&self, dir: &Path, name: &str, manifest: &RunManifest) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{name}.csv")), self.to_csv())?;
        let mut f = std::fs::File::create(dir.join(format!("{name}.json")))?;
        f.write_all(serde_json::to_string_pretty(manifest)?.as_bytes())?;
        Ok(())
    }
}
