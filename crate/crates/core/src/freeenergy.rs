//! Umbrella sampling, MBAR reweighting and free-energy surface metrics.

use crate::dynamics::{run_simulation, AbfEstimator, ExternalBias, Limits, Simulation, Termination, Thermo};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::potentials::{periodic_delta, Configuration, Pes};
use crate::rng::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Harmonic restraint `K/2 |xi - center|^2` on a subset of coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Restraint {
    pub cv_dims: Vec<usize>,
    pub center: Vec<f64>,
    pub force_constant: f64,
    pub periodic: Vec<bool>,
}

impl Restraint {
    fn displacement(&self, d: usize, value: f64) -> f64 {
        if self.periodic[d] {
            periodic_delta(value, self.center[d])
        } else {
            value - self.center[d]
        }
    }

    /// Restraint energy at CV values `xi`.
    pub fn energy_at(&self, xi: &[f64]) -> f64 {
        let s: f64 = xi
            .iter()
            .enumerate()
            .map(|(d, &v)| self.displacement(d, v).powi(2))
            .sum();
        0.5 * self.force_constant * s
    }
}

impl ExternalBias for Restraint {
    fn add_bias(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        let mut e = 0.0;
        for (d, &i) in self.cv_dims.iter().enumerate() {
            let delta = self.displacement(d, x[i]);
            forces[i] -= self.force_constant * delta;
            e += delta * delta;
        }
        0.5 * self.force_constant * e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmbrellaWindow {
    pub restraint: Restraint,
    /// CV values of the retained frames.
    pub samples: Vec<Vec<f64>>,
    /// Restraint energy of each retained frame under this window.
    pub restrained_energies: Vec<f64>,
    pub termination: Termination,
    pub steps_completed: u64,
}

impl UmbrellaWindow {
    /// True when no samples survived equilibration.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmbrellaPlan {
    pub cv_dims: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub force_constant: f64,
    pub steps: u64,
    pub equilibration: u64,
    pub record_stride: u64,
    pub thermo: Thermo,
    pub seed: u64,
}

impl UmbrellaPlan {
    /// Windows at the bin centres of `grid`, with the force constant that
    /// gives a restrained standard deviation of half the smallest spacing.
    pub fn on_grid(grid: &GridSpec, cv_dims: Vec<usize>, kt: f64, steps: u64, equilibration: u64, seed: u64) -> Self {
        let spacing = grid.axes.iter().map(|a| a.width()).fold(f64::INFINITY, f64::min);
        UmbrellaPlan {
            cv_dims,
            centers: grid.centers(),
            force_constant: kt / (0.5 * spacing).powi(2),
            steps,
            equilibration,
            record_stride: 10,
            thermo: Thermo::new(kt),
            seed,
        }
    }
}

/// Restrained unbiased-mode Langevin in every window, in parallel. Each
/// window starts from `template` with its CV coordinates set to the centre.
/// Frames before `equilibration` steps are dropped; windows that terminate
/// early keep their partial samples.
pub fn run_umbrella(pes: &dyn Pes, template: &Configuration, plan: &UmbrellaPlan) -> Result<Vec<UmbrellaWindow>> {
    if !(plan.force_constant > 0.0) {
        return Err(Error::invalid("umbrella force constant must be positive"));
    }
    let periodic: Vec<bool> = plan.cv_dims.iter().map(|&i| template.periodic()[i]).collect();
    plan.centers
        .par_iter()
        .enumerate()
        .map(|(w, center)| {
            let restraint = Restraint {
                cv_dims: plan.cv_dims.clone(),
                center: center.clone(),
                force_constant: plan.force_constant,
                periodic: periodic.clone(),
            };
            let mut coords = template.coords().to_vec();
            for (&i, &c) in plan.cv_dims.iter().zip(center) {
                coords[i] = c;
            }
            let start = Configuration::new(coords, template.periodic().to_vec())?;
            let mut sim = Simulation::unbiased(pes, plan.thermo);
            sim.bias = Some(&restraint);
            sim.limits = Limits::new(plan.thermo.kt, f64::INFINITY);
            let est = AbfEstimator::new(0.0, 1.0, 1, 1)?;
            let traj = run_simulation(&sim, &start, plan.steps, plan.record_stride, est, derive_seed(plan.seed, &[w as u64]))?;
            let samples: Vec<Vec<f64>> = traj
                .frames
                .iter()
                .filter(|f| f.step > plan.equilibration)
                .map(|f| plan.cv_dims.iter().map(|&i| f.coords[i]).collect())
                .collect();
            let restrained_energies = samples.iter().map(|s| restraint.energy_at(s)).collect();
            Ok(UmbrellaWindow {
                restraint,
                samples,
                restrained_energies,
                termination: traj.termination,
                steps_completed: traj.steps_completed,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbarResult {
    /// Reduced free energies of the states, `f[0] = 0`.
    pub f: Vec<f64>,
    /// Normalised weights of every sample in the unbiased state.
    pub weights: Vec<f64>,
    /// `ln sum_k N_k exp(f_k - u_kn)` per sample.
    pub log_denominators: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Entries of `exp(-(u_kn - min_k u_kn))` below this are dropped.
const MBAR_SPARSITY: f64 = 1e-30;

/// Self-consistent MBAR on reduced energies `reduced[k][n]` of every sample
/// `n` (pooled over states) in state `k`, with `counts[k]` samples drawn from
/// state `k`. Iterates until `max |delta f| < tol`.
pub fn mbar_solve(reduced: &[Vec<f64>], counts: &[usize], tol: f64, max_iter: usize) -> Result<MbarResult> {
    let k = reduced.len();
    if k == 0 || counts.len() != k {
        return Err(Error::invalid("MBAR needs one count per state"));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::invalid("MBAR needs at least one sample"));
    }
    if reduced.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("every state needs a reduced energy for every sample"));
    }
    // Per-sample sparse columns of c_kn = exp(-(u_kn - m_n)); m_n cancels in
    // both the free-energy update and the weights.
    let mut cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for s in 0..n {
        let m = (0..k).map(|j| reduced[j][s]).fold(f64::INFINITY, f64::min);
        if !m.is_finite() {
            return Err(Error::invalid(format!("sample {s} has no finite reduced energy")));
        }
        cols.push(
            (0..k)
                .filter_map(|j| {
                    let c = (-(reduced[j][s] - m)).exp();
                    (c > MBAR_SPARSITY).then_some((j, c))
                })
                .collect(),
        );
    }
    let nk: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mut f: Vec<f64> = vec![0.0; k];
    let mut denom = vec![0.0; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        let ef: Vec<f64> = f.iter().zip(&nk).map(|(fi, ni)| ni * fi.exp()).collect();
        for (d, col) in denom.iter_mut().zip(&cols) {
            *d = col.iter().map(|&(j, c)| ef[j] * c).sum();
        }
        let mut acc = vec![0.0; k];
        for (d, col) in denom.iter().zip(&cols) {
            for &(j, c) in col {
                acc[j] += c / d;
            }
        }
        let shift = -acc[0].ln();
        let new: Vec<f64> = acc.iter().map(|a| -a.ln() - shift).collect();
        residual = new.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        f = new;
        if !residual.is_finite() {
            return Err(Error::Degenerate("MBAR free energies diverged (a state has no overlap)".into()));
        }
        if residual < tol {
            break;
        }
    }
    if residual >= tol {
        return Err(Error::NotConverged { iterations, residual });
    }
    let ef: Vec<f64> = f.iter().zip(&nk).map(|(fi, ni)| ni * fi.exp()).collect();
    let log_denominators: Vec<f64> = cols
        .iter()
        .enumerate()
        .map(|(s, col)| {
            let m = (0..k).map(|j| reduced[j][s]).fold(f64::INFINITY, f64::min);
            col.iter().map(|&(j, c)| ef[j] * c).sum::<f64>().ln() - m
        })
        .collect();
    let weights = normalized_weights(&log_denominators, None);
    Ok(MbarResult {
        f,
        weights,
        log_denominators,
        iterations,
        residual,
    })
}

/// `exp(-u_n) / D_n`, normalised; `u = None` is the unbiased state.
fn normalized_weights(log_denominators: &[f64], u: Option<&[f64]>) -> Vec<f64> {
    let logw: Vec<f64> = log_denominators
        .iter()
        .enumerate()
        .map(|(n, d)| -u.map_or(0.0, |u| u[n]) - d)
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

impl MbarResult {
    /// Normalised weights of every sample in a state with reduced energies
    /// `reduced` (one per pooled sample).
    pub fn weights_in(&self, reduced: &[f64]) -> Vec<f64> {
        normalized_weights(&self.log_denominators, Some(reduced))
    }
}

/// Reduced energies of every pooled sample under every window's restraint.
pub fn window_reduced_energies(windows: &[UmbrellaWindow], kt: f64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
    let samples: Vec<Vec<f64>> = windows.iter().flat_map(|w| w.samples.iter().cloned()).collect();
    let beta = 1.0 / kt;
    let reduced = windows
        .iter()
        .map(|w| samples.iter().map(|s| beta * w.restraint.energy_at(s)).collect())
        .collect();
    let counts = windows.iter().map(|w| w.samples.len()).collect();
    (reduced, counts, samples)
}

/// MBAR over umbrella windows; windows without samples are skipped.
pub fn mbar_windows(windows: &[UmbrellaWindow], kt: f64, tol: f64, max_iter: usize) -> Result<(MbarResult, Vec<Vec<f64>>)> {
    let used: Vec<UmbrellaWindow> = windows.iter().filter(|w| !w.is_empty()).cloned().collect();
    if used.is_empty() {
        return Err(Error::Degenerate("no umbrella window produced samples".into()));
    }
    let (reduced, counts, samples) = window_reduced_energies(&used, kt);
    Ok((mbar_solve(&reduced, &counts, tol, max_iter)?, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfGrid {
    pub grid: GridSpec,
    /// Free energy per bin in model energy units, minimum over defined bins
    /// 0; `None` where no weight fell.
    pub values: Vec<Option<f64>>,
    pub mass: Vec<f64>,
}

/// `-kT ln(sum of weights in bin)`, shifted so the minimum is 0.
pub fn pmf_from_weights(samples: &[Vec<f64>], weights: &[f64], grid: &GridSpec, kt: f64) -> PmfGrid {
    let mut mass = vec![0.0; grid.total_bins()];
    for (s, &w) in samples.iter().zip(weights) {
        if let Some(b) = grid.bin_index(s) {
            mass[b] += w;
        }
    }
    let raw: Vec<Option<f64>> = mass
        .iter()
        .map(|&m| (m > 0.0).then(|| -kt * m.ln()))
        .collect();
    let lo = raw.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    PmfGrid {
        grid: grid.clone(),
        values: raw.into_iter().map(|v| v.map(|v| v - lo)).collect(),
        mass,
    }
}

impl PmfGrid {
    pub fn defined(&self) -> usize {
        self.values.iter().flatten().count()
    }

    /// `c0..,value,defined,mass`; undefined values are written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.grid.ndim() {
            out.push_str(&format!("c{i},"));
        }
        out.push_str("value,defined,mass\n");
        for (b, v) in self.values.iter().enumerate() {
            for c in self.grid.center(b) {
                out.push_str(&format!("{c:?},"));
            }
            match v {
                Some(v) => out.push_str(&format!("{v:?},1,")),
                None => out.push_str("nan,0,"),
            }
            out.push_str(&format!("{:?}\n", self.mass[b]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Mean,
    Min,
}

/// Mean absolute difference over bins defined in both surfaces, after
/// subtracting each surface's mean (or minimum) over those bins.
pub fn pmf_mae(pmf: &[Option<f64>], reference: &[Option<f64>], alignment: Alignment) -> Result<f64> {
    if pmf.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: pmf.len(),
        });
    }
    let shared: Vec<(f64, f64)> = pmf
        .iter()
        .zip(reference)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    if shared.is_empty() {
        return Err(Error::invalid("surfaces share no defined bins"));
    }
    let n = shared.len() as f64;
    let (oa, ob) = match alignment {
        Alignment::Mean => (
            shared.iter().map(|p| p.0).sum::<f64>() / n,
            shared.iter().map(|p| p.1).sum::<f64>() / n,
        ),
        Alignment::Min => (
            shared.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            shared.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        ),
    };
    Ok(shared.iter().map(|(a, b)| ((a - oa) - (b - ob)).abs()).sum::<f64>() / n)
}

/// Reference values at or below `cap` (others undefined).
pub fn cap_reference(reference: &[f64], cap: f64) -> Vec<Option<f64>> {
    reference.iter().map(|&v| (v <= cap).then_some(v)).collect()
}

/// Fraction of grid bins holding at least one point.
pub fn coverage_fraction<'a>(points: impl IntoIterator<Item = &'a [f64]>, grid: &GridSpec) -> f64 {
    let mut filled = vec![false; grid.total_bins()];
    for p in points {
        if let Some(b) = grid.bin_index(p) {
            filled[b] = true;
        }
    }
    filled.iter().filter(|&&f| f).count() as f64 / filled.len() as f64
}
