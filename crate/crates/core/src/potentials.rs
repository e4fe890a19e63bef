//! Analytic ground-truth potential energy surfaces and a short FIRE relaxation.
//!
//! Three surfaces are provided:
//!
//! * **Müller–Brown**: the standard four-Gaussian surface multiplied by a
//!   configurable scale (default 0.05, giving barriers of a few kT at kT = 1).
//! * **n-D double well**: `h (x0^2 - 1)^2 + k/2 * sum_{i>0} x_i^2`.
//! * **toy dipeptide torus**: a trigonometric polynomial in two angles,
//!
//!   ```text
//!   V(phi, psi) = 4.2 cos(2 phi) + 1.0 cos(phi - 1.6)
//!               + 4.2 cos(2 psi + 1.0) + 1.0 cos(psi + 0.6)
//!               + 0.4 cos(phi - psi)
//!   ```
//!
//!   It has four unequal minima. The global one sits near (-1.57, 1.15), the
//!   others near (-1.57, -2.15), (1.57, -2.09) and (1.57, 1.10) at +0.90,
//!   +2.22 and +2.72 above it. Every basin is separated from the others by at
//!   least 6.8 energy units.

use crate::error::{check_dim, Error, Result};
use crate::grid::GridSpec;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const TWO_PI: f64 = 2.0 * PI;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    let w = x - TWO_PI * ((x + PI) / TWO_PI).floor();
    if w >= PI {
        w - TWO_PI
    } else {
        w
    }
}

/// Minimum-image difference `a - b` on a periodic dimension.
pub fn periodic_delta(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    coords: Vec<f64>,
    periodic: Vec<bool>,
}

impl Configuration {
    pub fn new(coords: Vec<f64>, periodic: Vec<bool>) -> Result<Self> {
        check_dim(coords.len(), periodic.len())?;
        let mut c = Configuration { coords, periodic };
        c.wrap();
        Ok(c)
    }

    pub fn nonperiodic(coords: Vec<f64>) -> Self {
        let periodic = vec![false; coords.len()];
        Configuration { coords, periodic }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn set_coords(&mut self, coords: &[f64]) {
        self.coords.copy_from_slice(coords);
        self.wrap();
    }

    fn wrap(&mut self) {
        for (x, &p) in self.coords.iter_mut().zip(&self.periodic) {
            if p {
                *x = wrap_angle(*x);
            }
        }
    }
}

/// A potential energy surface that can be integrated.
pub trait Pes: Sync {
    fn dim(&self) -> usize;

    fn periodic(&self) -> &[bool];

    /// Bounds of the non-periodic dimensions; entries for periodic dimensions
    /// are ignored.
    fn bounds(&self) -> Option<&[(f64, f64)]>;

    /// Writes `-grad V` into `forces` and returns `V`.
    fn energy_forces(&self, x: &[f64], forces: &mut [f64]) -> f64;

    fn energy(&self, x: &[f64]) -> f64 {
        let mut f = vec![0.0; self.dim()];
        self.energy_forces(x, &mut f)
    }

    /// First coordinate outside the domain, if any.
    fn domain_violation(&self, x: &[f64]) -> Option<Error> {
        let bounds = self.bounds()?;
        for (i, (&v, &(lo, hi))) in x.iter().zip(bounds).enumerate() {
            if self.periodic()[i] {
                continue;
            }
            if !(lo..=hi).contains(&v) {
                return Some(Error::OutOfDomain {
                    index: i,
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    MullerBrown,
    DoubleWellNd,
    ToyDipeptideTorus,
}

impl std::str::FromStr for PotentialKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "muller_brown" => Ok(PotentialKind::MullerBrown),
            "double_well_nd" | "double_well" => Ok(PotentialKind::DoubleWellNd),
            "toy_dipeptide_torus" => Ok(PotentialKind::ToyDipeptideTorus),
            other => Err(Error::Config(format!("unknown potential kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PotentialKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PotentialKind::MullerBrown => "muller_brown",
            PotentialKind::DoubleWellNd => "double_well_nd",
            PotentialKind::ToyDipeptideTorus => "toy_dipeptide_torus",
        })
    }
}

// Müller–Brown: A, a, b, c, x0, y0 per Gaussian term.
const MB_A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MB_QA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MB_QB: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MB_QC: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MB_X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MB_Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

pub const MULLER_BROWN_SCALE: f64 = 0.05;
pub const MULLER_BROWN_BOUNDS: [(f64, f64); 2] = [(-1.5, 1.2), (-0.5, 2.0)];

/// Torus terms `(amplitude, phi multiplier, psi multiplier, phase)` of
/// `amplitude * cos(m phi + n psi + phase)`.
const TORUS_TERMS: [(f64, f64, f64, f64); 5] = [
    (4.2, 2.0, 0.0, 0.0),
    (1.0, 1.0, 0.0, -1.6),
    (4.2, 0.0, 2.0, 1.0),
    (1.0, 0.0, 1.0, 0.6),
    (0.4, 1.0, -1.0, 0.0),
];

/// An analytic reference potential.
///
/// `params` is kind specific: `[scale]` for Müller–Brown, `[height,
/// transverse_k]` for the double well, empty for the torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPotential {
    kind: PotentialKind,
    params: Vec<f64>,
    dim: usize,
    bounds: Vec<(f64, f64)>,
    periodic: Vec<bool>,
}

impl GroundTruthPotential {
    pub fn muller_brown(scale: f64) -> Self {
        GroundTruthPotential {
            kind: PotentialKind::MullerBrown,
            params: vec![scale],
            dim: 2,
            bounds: MULLER_BROWN_BOUNDS.to_vec(),
            periodic: vec![false; 2],
        }
    }

    pub fn double_well(dim: usize, height: f64, transverse_k: f64) -> Self {
        assert!(dim >= 1);
        GroundTruthPotential {
            kind: PotentialKind::DoubleWellNd,
            params: vec![height, transverse_k],
            dim,
            bounds: vec![(-3.0, 3.0); dim],
            periodic: vec![false; dim],
        }
    }

    pub fn toy_dipeptide_torus() -> Self {
        GroundTruthPotential {
            kind: PotentialKind::ToyDipeptideTorus,
            params: Vec::new(),
            dim: 2,
            bounds: vec![(-PI, PI); 2],
            periodic: vec![true; 2],
        }
    }

    /// Default instance of a kind in `dim` dimensions (only the double well
    /// honours `dim`).
    pub fn from_kind(kind: PotentialKind, dim: usize) -> Self {
        match kind {
            PotentialKind::MullerBrown => Self::muller_brown(MULLER_BROWN_SCALE),
            PotentialKind::DoubleWellNd => Self::double_well(dim.max(1), 1.0, 1.0),
            PotentialKind::ToyDipeptideTorus => Self::toy_dipeptide_torus(),
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        check_dim(self.dim, bounds.len())?;
        self.bounds = bounds;
        Ok(self)
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn domain_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn config(&self, coords: Vec<f64>) -> Configuration {
        Configuration::new(coords, self.periodic.clone()).expect("dimension checked by caller")
    }

    /// Energy and forces with dimension and domain checks.
    pub fn evaluate(&self, config: &Configuration) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim, config.dim())?;
        if let Some(e) = self.domain_violation(config.coords()) {
            return Err(e);
        }
        let mut f = vec![0.0; self.dim];
        let e = self.energy_forces(config.coords(), &mut f);
        Ok((e, f))
    }

    fn muller_brown_eval(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        let s = self.params[0];
        let (px, py) = (x[0], x[1]);
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for k in 0..4 {
            let dx = px - MB_X0[k];
            let dy = py - MB_Y0[k];
            let e = MB_A[k] * (MB_QA[k] * dx * dx + MB_QB[k] * dx * dy + MB_QC[k] * dy * dy).exp();
            v += e;
            gx += e * (2.0 * MB_QA[k] * dx + MB_QB[k] * dy);
            gy += e * (MB_QB[k] * dx + 2.0 * MB_QC[k] * dy);
        }
        forces[0] = -s * gx;
        forces[1] = -s * gy;
        s * v
    }

    fn double_well_eval(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        let (h, k) = (self.params[0], self.params[1]);
        let q = x[0] * x[0] - 1.0;
        let mut v = h * q * q;
        forces[0] = -4.0 * h * q * x[0];
        for i in 1..x.len() {
            v += 0.5 * k * x[i] * x[i];
            forces[i] = -k * x[i];
        }
        v
    }

    fn torus_eval(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        let (phi, psi) = (x[0], x[1]);
        let (mut v, mut gp, mut gs) = (0.0, 0.0, 0.0);
        for &(amp, m, n, phase) in &TORUS_TERMS {
            let arg = m * phi + n * psi + phase;
            v += amp * arg.cos();
            let s = -amp * arg.sin();
            gp += s * m;
            gs += s * n;
        }
        forces[0] = -gp;
        forces[1] = -gs;
        v
    }

    /// Local minima located by a grid scan refined with gradient descent,
    /// sorted by energy.
    pub fn find_minima(&self, scan: usize) -> Vec<Vec<f64>> {
        assert!(self.dim <= 2, "minimum search is only implemented for 1-D and 2-D surfaces");
        let axes: Vec<crate::grid::Axis> = (0..self.dim)
            .map(|d| {
                if self.periodic[d] {
                    crate::grid::Axis::angular(scan)
                } else {
                    crate::grid::Axis::new(self.bounds[d].0, self.bounds[d].1, scan)
                }
            })
            .collect();
        let grid = GridSpec::new(axes);
        let values: Vec<f64> = grid.centers().iter().map(|c| self.energy(c)).collect();
        let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
        for flat in 0..grid.total_bins() {
            let idx = grid.unravel(flat);
            let mut is_min = true;
            for d in 0..self.dim {
                for step in [-1i64, 1] {
                    let mut nb = idx.clone();
                    let n = grid.axes[d].bins as i64;
                    let j = idx[d] as i64 + step;
                    if self.periodic[d] {
                        nb[d] = j.rem_euclid(n) as usize;
                    } else if j < 0 || j >= n {
                        continue;
                    } else {
                        nb[d] = j as usize;
                    }
                    let nflat = nb.iter().zip(&grid.axes).fold(0, |acc, (&i, a)| acc * a.bins + i);
                    if values[nflat] <= values[flat] && nflat != flat {
                        is_min = false;
                    }
                }
            }
            if !is_min {
                continue;
            }
            let x = self.descend(&grid.center(flat));
            if found.iter().any(|(_, y)| self.distance(&x, y) < 1e-3) {
                continue;
            }
            found.push((self.energy(&x), x));
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        found.into_iter().map(|(_, x)| x).collect()
    }

    /// Steepest descent to the nearest stationary point.
    pub fn descend(&self, start: &[f64]) -> Vec<f64> {
        let mut x = start.to_vec();
        let mut f = vec![0.0; self.dim];
        let mut e = self.energy_forces(&x, &mut f);
        let mut step = 1e-3;
        for _ in 0..200_000 {
            let gnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-10 {
                break;
            }
            let trial: Vec<f64> = x
                .iter()
                .zip(&f)
                .enumerate()
                .map(|(i, (xi, fi))| {
                    let v = xi + step * fi;
                    if self.periodic[i] {
                        wrap_angle(v)
                    } else {
                        v
                    }
                })
                .collect();
            let mut ft = vec![0.0; self.dim];
            let et = self.energy_forces(&trial, &mut ft);
            if et <= e {
                x = trial;
                f = ft;
                e = et;
                step *= 1.2;
            } else {
                step *= 0.5;
                if step < 1e-16 {
                    break;
                }
            }
        }
        x
    }

    /// Euclidean distance with minimum image on periodic dimensions.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.periodic)
            .map(|((x, y), &p)| {
                let d = if p { periodic_delta(*x, *y) } else { x - y };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Index into `minima` of the basin `x` drains into.
    pub fn basin_of(&self, x: &[f64], minima: &[Vec<f64>]) -> usize {
        let end = self.descend(x);
        minima
            .iter()
            .enumerate()
            .min_by(|a, b| self.distance(&end, a.1).total_cmp(&self.distance(&end, b.1)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

impl Pes for GroundTruthPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    fn bounds(&self) -> Option<&[(f64, f64)]> {
        if self.periodic.iter().all(|&p| p) {
            None
        } else {
            Some(&self.bounds)
        }
    }

    fn energy_forces(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        match self.kind {
            PotentialKind::MullerBrown => self.muller_brown_eval(x, forces),
            PotentialKind::DoubleWellNd => self.double_well_eval(x, forces),
            PotentialKind::ToyDipeptideTorus => self.torus_eval(x, forces),
        }
    }
}

/// FIRE settings. Masses are 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FireParams {
    pub dt_start: f64,
    pub dt_max: f64,
    pub max_step: f64,
    pub n_min: usize,
    pub f_inc: f64,
    pub f_dec: f64,
    pub alpha_start: f64,
    pub f_alpha: f64,
}

impl Default for FireParams {
    fn default() -> Self {
        FireParams {
            dt_start: 0.01,
            dt_max: 0.1,
            max_step: 0.1,
            n_min: 5,
            f_inc: 1.1,
            f_dec: 0.5,
            alpha_start: 0.1,
            f_alpha: 0.99,
        }
    }
}

/// FIRE relaxation for `steps` iterations. A trial move that raises the
/// energy is rejected (velocities reset, time step halved), so the returned
/// energy never exceeds the starting one. A non-finite energy ends the
/// relaxation at the last finite configuration.
pub fn fire_relax(pes: &dyn Pes, config: &Configuration, steps: usize, params: &FireParams) -> Configuration {
    let n = config.dim();
    let periodic = config.periodic().to_vec();
    let mut x = config.coords().to_vec();
    let mut f = vec![0.0; n];
    let mut e = pes.energy_forces(&x, &mut f);
    if !e.is_finite() {
        return config.clone();
    }
    let mut v = vec![0.0; n];
    let mut dt = params.dt_start;
    let mut alpha = params.alpha_start;
    let mut n_pos = 0usize;
    let mut trial = vec![0.0; n];
    let mut ft = vec![0.0; n];

    for _ in 0..steps {
        let power: f64 = f.iter().zip(&v).map(|(a, b)| a * b).sum();
        if power > 0.0 {
            let vnorm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let fnorm = f.iter().map(|a| a * a).sum::<f64>().sqrt();
            if fnorm > 0.0 {
                for (vi, fi) in v.iter_mut().zip(&f) {
                    *vi = (1.0 - alpha) * *vi + alpha * vnorm * fi / fnorm;
                }
            }
            if n_pos > params.n_min {
                dt = (dt * params.f_inc).min(params.dt_max);
                alpha *= params.f_alpha;
            }
            n_pos += 1;
        } else {
            v.iter_mut().for_each(|a| *a = 0.0);
            dt *= params.f_dec;
            alpha = params.alpha_start;
            n_pos = 0;
        }
        for (vi, fi) in v.iter_mut().zip(&f) {
            *vi += dt * fi;
        }
        let step_norm = dt * v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let shrink = if step_norm > params.max_step {
            params.max_step / step_norm
        } else {
            1.0
        };
        for i in 0..n {
            let xi = x[i] + shrink * dt * v[i];
            trial[i] = if periodic[i] { wrap_angle(xi) } else { xi };
        }
        let et = pes.energy_forces(&trial, &mut ft);
        if !et.is_finite() {
            break;
        }
        if et > e {
            v.iter_mut().for_each(|a| *a = 0.0);
            dt *= params.f_dec;
            alpha = params.alpha_start;
            n_pos = 0;
            continue;
        }
        x.copy_from_slice(&trial);
        f.copy_from_slice(&ft);
        e = et;
    }
    let mut out = config.clone();
    out.set_coords(&x);
    out
}

/// Reference free energy per bin of `grid`, whose axes span the coordinates
/// listed in `cv_dims`, at temperature `kt`. Remaining coordinates are
/// integrated out with the trapezoid rule on `quad_points` nodes per
/// dimension (a plain uniform sum on periodic dimensions). The result is
/// shifted so that its minimum is zero.
pub fn reference_pmf(
    potential: &GroundTruthPotential,
    grid: &GridSpec,
    cv_dims: &[usize],
    kt: f64,
    quad_points: usize,
) -> Result<Vec<f64>> {
    check_dim(grid.ndim(), cv_dims.len())?;
    if cv_dims.iter().any(|&d| d >= potential.dim) {
        return Err(Error::invalid("cv dimension out of range"));
    }
    let rest: Vec<usize> = (0..potential.dim).filter(|d| !cv_dims.contains(d)).collect();
    let mut values = Vec::with_capacity(grid.total_bins());
    if rest.is_empty() {
        for c in grid.centers() {
            let mut x = vec![0.0; potential.dim];
            for (k, &d) in cv_dims.iter().enumerate() {
                x[d] = c[k];
            }
            values.push(potential.energy(&x));
        }
    } else {
        // Quadrature nodes and weights per integrated dimension.
        let nodes: Vec<Vec<(f64, f64)>> = rest
            .iter()
            .map(|&d| {
                let (lo, hi) = potential.bounds[d];
                if potential.periodic[d] {
                    let h = TWO_PI / quad_points as f64;
                    (0..quad_points).map(|i| (-PI + i as f64 * h, h)).collect()
                } else {
                    let h = (hi - lo) / (quad_points - 1) as f64;
                    (0..quad_points)
                        .map(|i| {
                            let w = if i == 0 || i == quad_points - 1 { 0.5 * h } else { h };
                            (lo + i as f64 * h, w)
                        })
                        .collect()
                }
            })
            .collect();
        let total: usize = nodes.iter().map(|n| n.len()).product();
        for c in grid.centers() {
            let mut x = vec![0.0; potential.dim];
            for (k, &d) in cv_dims.iter().enumerate() {
                x[d] = c[k];
            }
            // log-sum-exp over the tensor grid
            let mut terms = Vec::with_capacity(total);
            for flat in 0..total {
                let mut rem = flat;
                let mut logw = 0.0;
                for (k, &d) in rest.iter().enumerate().rev() {
                    let (pos, w) = nodes[k][rem % nodes[k].len()];
                    rem /= nodes[k].len();
                    x[d] = pos;
                    logw += w.ln();
                }
                terms.push(logw - potential.energy(&x) / kt);
            }
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
            values.push(-kt * (m + s.ln()));
        }
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(values.into_iter().map(|v| v - min).collect())
}

/// Reference free energy averaged over each bin: every axis is refined by
/// `sub` and the fine values are combined as `-kT ln mean exp(-F/kT)`. This is
/// the quantity a histogram over the bin estimates, which differs from the
/// centre value where the surface is steep.
pub fn reference_pmf_binned(
    potential: &GroundTruthPotential,
    grid: &GridSpec,
    cv_dims: &[usize],
    kt: f64,
    quad_points: usize,
    sub: usize,
) -> Result<Vec<f64>> {
    if sub == 0 {
        return Err(Error::invalid("bin refinement must be positive"));
    }
    let fine = GridSpec::new(
        grid.axes
            .iter()
            .map(|a| crate::grid::Axis {
                bins: a.bins * sub,
                ..a.clone()
            })
            .collect(),
    );
    let values = reference_pmf(potential, &fine, cv_dims, kt, quad_points)?;
    let mut acc = vec![0.0; grid.total_bins()];
    for (flat, v) in values.iter().enumerate() {
        let coarse = fine
            .unravel(flat)
            .iter()
            .zip(&grid.axes)
            .fold(0, |c, (&i, a)| c * a.bins + i / sub);
        acc[coarse] += (-v / kt).exp();
    }
    let per_bin = sub.pow(grid.ndim() as u32) as f64;
    let out: Vec<f64> = acc.iter().map(|&s| -kt * (s / per_bin).ln()).collect();
    let min = out.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(out.into_iter().map(|v| v - min).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use rand::Rng;

    fn fd_check(p: &GroundTruthPotential, x: &[f64]) -> f64 {
        let h = 1e-5;
        let mut f = vec![0.0; p.dim];
        p.energy_forces(x, &mut f);
        let mut num = vec![0.0; p.dim];
        for i in 0..p.dim {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            num[i] = -(p.energy(&xp) - p.energy(&xm)) / (2.0 * h);
        }
        let diff: f64 = f.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
        diff / scale
    }

    #[test]
    fn double_well_trivial_values() {
        let p = GroundTruthPotential::double_well(1, 1.0, 1.0);
        let (e, f) = p.evaluate(&Configuration::nonperiodic(vec![1.0])).unwrap();
        assert_eq!((e, f[0]), (0.0, 0.0));
        let (e, f) = p.evaluate(&Configuration::nonperiodic(vec![0.0])).unwrap();
        assert_eq!(e, 1.0);
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn muller_brown_global_minimum() {
        // Located beforehand by gradient descent + Newton polish at 40 digits.
        let p = GroundTruthPotential::muller_brown(0.05);
        let xmin = [-0.558_223_634_633_024_3, 1.441_725_841_804_668_7];
        let (e, f) = p.evaluate(&Configuration::nonperiodic(xmin.to_vec())).unwrap();
        assert!((e - (-7.334_975_860_497_7)).abs() < 1e-8);
        assert!(f.iter().all(|v| v.abs() < 1e-8));
        let found = p.find_minima(80);
        assert_eq!(found.len(), 3);
        assert!((found[0][0] - xmin[0]).abs() < 1e-6 && (found[0][1] - xmin[1]).abs() < 1e-6);
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        let p = GroundTruthPotential::muller_brown(0.05);
        assert!(matches!(
            p.evaluate(&Configuration::nonperiodic(vec![0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            p.evaluate(&Configuration::nonperiodic(vec![5.0, 0.0])),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn forces_match_finite_differences() {
        let mut rng = crate::rng::seeded(7);
        for p in [
            GroundTruthPotential::muller_brown(0.05),
            GroundTruthPotential::double_well(3, 1.0, 2.0),
            GroundTruthPotential::toy_dipeptide_torus(),
        ] {
            for _ in 0..100 {
                let x: Vec<f64> = p.bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
                assert!(fd_check(&p, &x) < 1e-6, "{:?} at {:?}", p.kind, x);
            }
        }
    }

    #[test]
    fn torus_is_periodic() {
        let p = GroundTruthPotential::toy_dipeptide_torus();
        let mut rng = crate::rng::seeded(3);
        for _ in 0..100 {
            let x = [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
            let e = p.energy(&x);
            for s in [TWO_PI, -TWO_PI] {
                assert!((p.energy(&[x[0] + s, x[1]]) - e).abs() < 1e-12);
                assert!((p.energy(&[x[0], x[1] + s]) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn torus_basin_structure() {
        let p = GroundTruthPotential::toy_dipeptide_torus();
        let minima = p.find_minima(90);
        assert_eq!(minima.len(), 4);
        let e: Vec<f64> = minima.iter().map(|m| p.energy(m)).collect();
        for w in e.windows(2) {
            assert!(w[1] - w[0] > 0.4, "minima must be unequal: {e:?}");
        }
        assert!((minima[0][0] + 1.571).abs() < 0.02 && (minima[0][1] - 1.152).abs() < 0.02);
    }

    #[test]
    fn configuration_wraps_periodic_coordinates() {
        let c = Configuration::new(vec![PI, 4.0, 7.0], vec![true, true, false]).unwrap();
        assert_eq!(c.coords()[0], -PI);
        assert!((c.coords()[1] - (4.0 - TWO_PI)).abs() < 1e-15);
        assert_eq!(c.coords()[2], 7.0);
        assert!((wrap_angle(-PI) + PI).abs() == 0.0);
    }

    #[test]
    fn fire_identity_cases() {
        let p = GroundTruthPotential::double_well(1, 1.0, 1.0);
        let at_min = Configuration::nonperiodic(vec![1.0]);
        assert_eq!(fire_relax(&p, &at_min, 10, &FireParams::default()), at_min);
        let c = Configuration::nonperiodic(vec![0.5]);
        assert_eq!(fire_relax(&p, &c, 0, &FireParams::default()), c);
    }

    #[test]
    fn fire_lowers_energy_like_gradient_descent() {
        let p = GroundTruthPotential::double_well(1, 1.0, 1.0);
        let start = Configuration::nonperiodic(vec![0.5]);
        let e0 = p.energy(&[0.5]);
        let relaxed = fire_relax(&p, &start, 10, &FireParams::default());
        let e_fire = p.energy(relaxed.coords());
        // oracle: 10 small gradient-descent steps
        let mut x = 0.5f64;
        for _ in 0..10 {
            x += 1e-3 * (-4.0 * x * (x * x - 1.0));
        }
        assert!(p.energy(&[x]) < e0);
        assert!(e_fire < e0);
    }

    #[test]
    fn fire_is_monotone_per_step() {
        let p = GroundTruthPotential::muller_brown(0.05);
        let mut c = Configuration::nonperiodic(vec![-0.2, 1.0]);
        let mut e = p.energy(c.coords());
        for _ in 0..30 {
            c = fire_relax(&p, &c, 1, &FireParams::default());
            let en = p.energy(c.coords());
            assert!(en <= e);
            e = en;
        }
    }

    #[test]
    fn reference_pmf_full_cv_is_shifted_potential() {
        let p = GroundTruthPotential::toy_dipeptide_torus();
        let g = GridSpec::new(vec![Axis::angular(24), Axis::angular(24)]);
        let pmf = reference_pmf(&p, &g, &[0, 1], 1.0, 0).unwrap();
        let v: Vec<f64> = g.centers().iter().map(|c| p.energy(c)).collect();
        let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
        for (a, b) in pmf.iter().zip(&v) {
            assert!((a - (b - vmin)).abs() < 1e-12);
        }

        let dw = GroundTruthPotential::double_well(1, 1.0, 1.0);
        let g = GridSpec::new(vec![Axis::new(-2.0, 2.0, 101)]);
        let pmf = reference_pmf(&dw, &g, &[0], 0.25, 0).unwrap();
        assert_eq!(pmf.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
    }

    #[test]
    fn reference_pmf_marginal_matches_dense_quadrature() {
        // Oracle: composite Simpson on 4001 nodes over y.
        let p = GroundTruthPotential::muller_brown(0.05);
        let g = GridSpec::new(vec![Axis::new(-1.5, 1.2, 27)]);
        let kt = 1.0;
        let pmf = reference_pmf(&p, &g, &[0], kt, 801).unwrap();
        let (lo, hi) = MULLER_BROWN_BOUNDS[1];
        let n = 4000;
        let h = (hi - lo) / n as f64;
        let oracle: Vec<f64> = g
            .centers()
            .iter()
            .map(|c| {
                let mut s = 0.0;
                for i in 0..=n {
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    s += w * (-p.energy(&[c[0], lo + i as f64 * h]) / kt).exp();
                }
                -kt * (s * h / 3.0).ln()
            })
            .collect();
        let omin = oracle.iter().cloned().fold(f64::INFINITY, f64::min);
        for (a, b) in pmf.iter().zip(&oracle) {
            assert!((a - (b - omin)).abs() < 1e-4, "{a} vs {}", b - omin);
        }
    }

    #[test]
    fn binned_reference_matches_bin_integral() {
        // Oracle: Simpson integral of exp(-V/kT) across each bin.
        let dw = GroundTruthPotential::double_well(1, 1.0, 1.0);
        let g = GridSpec::new(vec![Axis::new(-2.0, 2.0, 20)]);
        let kt = 0.25;
        let pmf = reference_pmf_binned(&dw, &g, &[0], kt, 0, 200).unwrap();
        let w = g.axes[0].width();
        let n = 2000;
        let h = w / n as f64;
        let oracle: Vec<f64> = (0..20)
            .map(|b| {
                let lo = -2.0 + b as f64 * w;
                let mut s = 0.0;
                for i in 0..=n {
                    let c = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    s += c * (-dw.energy(&[lo + i as f64 * h]) / kt).exp();
                }
                -kt * (s * h / 3.0 / w).ln()
            })
            .collect();
        let omin = oracle.iter().cloned().fold(f64::INFINITY, f64::min);
        for (a, b) in pmf.iter().zip(&oracle) {
            assert!((a - (b - omin)).abs() < 1e-4 * kt.max(b - omin), "{a} vs {}", b - omin);
        }
        let same = reference_pmf_binned(&dw, &g, &[0], kt, 0, 1).unwrap();
        for (a, b) in same.iter().zip(reference_pmf(&dw, &g, &[0], kt, 0).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
