//! Full-covariance Gaussian mixture fitted by EM.

use super::kmeans::kmeans;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Components whose weight falls below this are re-seeded.
pub const DEGENERATE_WEIGHT: f64 = 1e-12;
pub const MAX_RESEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    /// Lower Cholesky factor of the covariance, row-major.
    chol: Vec<f64>,
    /// `ln w - (D ln 2pi + ln det Sigma) / 2`
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: Vec<f64>, chol: Vec<f64>) -> Self {
        let d = mean.len();
        let log_det: f64 = 2.0 * (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>();
        let log_norm = weight.ln() - 0.5 * (d as f64 * LN_2PI + log_det);
        Component {
            weight,
            mean,
            chol,
            log_norm,
        }
    }

    /// Solves `L y = z - mu` in place of `y`; returns `|y|^2`.
    fn whiten(&self, z: &[f64], y: &mut [f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i];
            let mut s = z[i] - self.mean[i];
            for (l, yj) in row.iter().zip(&y[..i]) {
                s -= l * yj;
            }
            let yi = s / self.chol[i * d + i];
            y[i] = yi;
            q += yi * yi;
        }
        q
    }

    /// Overwrites `y` (the whitened vector) with `Sigma^{-1} (z - mu) = L^{-T} y`.
    fn back_substitute(&self, y: &mut [f64]) {
        let d = self.mean.len();
        for i in (0..d).rev() {
            let mut s = y[i];
            for j in i + 1..d {
                s -= self.chol[j * d + i] * y[j];
            }
            y[i] = s / self.chol[i * d + i];
        }
    }

    fn covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        let l = DMatrix::from_row_slice(d, d, &self.chol);
        &l * l.transpose()
    }
}

/// Serialized form: weights, means and Cholesky factors.
#[derive(Serialize, Deserialize)]
struct GmmRecord {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    cholesky: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRecord", into = "GmmRecord")]
pub struct GmmModel {
    dim: usize,
    components: Vec<Component>,
}

impl TryFrom<GmmRecord> for GmmModel {
    type Error = Error;
    fn try_from(r: GmmRecord) -> Result<Self> {
        if r.weights.len() != r.means.len() || r.weights.len() != r.cholesky.len() {
            return Err(Error::invalid("inconsistent mixture record"));
        }
        let components = r
            .weights
            .into_iter()
            .zip(r.means)
            .zip(r.cholesky)
            .map(|((w, m), c)| {
                if m.len() != r.dim || c.len() != r.dim * r.dim {
                    return Err(Error::invalid("mixture component has wrong dimension"));
                }
                Ok(Component::new(w, m, c))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmModel {
            dim: r.dim,
            components,
        })
    }
}

impl From<GmmModel> for GmmRecord {
    fn from(g: GmmModel) -> Self {
        GmmRecord {
            dim: g.dim,
            weights: g.components.iter().map(|c| c.weight).collect(),
            means: g.components.iter().map(|c| c.mean.clone()).collect(),
            cholesky: g.components.iter().map(|c| c.chol.clone()).collect(),
        }
    }
}

impl GmmModel {
    /// Builds a mixture from explicit parameters. Weights are normalised.
    pub fn new(weights: &[f64], means: &[Vec<f64>], covariances: &[DMatrix<f64>]) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::invalid("mixture parameter lists must be non-empty and equal length"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        let dim = means[0].len();
        let mut components = Vec::with_capacity(k);
        for ((&w, m), cov) in weights.iter().zip(means).zip(covariances) {
            if m.len() != dim || cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.len(),
                });
            }
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?;
            let l = chol.l();
            let mut flat = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..=i {
                    flat[i * dim + j] = l[(i, j)];
                }
            }
            components.push(Component::new(w / total, m.clone(), flat));
        }
        Ok(GmmModel { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn covariances(&self) -> Vec<DMatrix<f64>> {
        self.components.iter().map(|c| c.covariance()).collect()
    }

    fn log_joint(&self, zeta: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        for (c, o) in self.components.iter().zip(out.iter_mut()) {
            *o = c.log_norm - 0.5 * c.whiten(zeta, scratch);
        }
    }

    /// `-ln sum_k w_k N(mu_k | mu_k, Sigma_k)`, a lower bound of the NLL:
    /// every component density is largest at its own mean.
    pub fn nll_lower_bound(&self) -> f64 {
        let norms: Vec<f64> = self.components.iter().map(|c| c.log_norm).collect();
        -log_sum_exp(&norms)
    }

    /// `-ln sum_k w_k N(zeta | mu_k, Sigma_k)`, evaluated with log-sum-exp.
    pub fn nll(&self, zeta: &[f64]) -> f64 {
        let mut lj = vec![0.0; self.components.len()];
        let mut scratch = vec![0.0; self.dim];
        self.log_joint(zeta, &mut lj, &mut scratch);
        -log_sum_exp(&lj)
    }

    /// NLL and its gradient with respect to `zeta`,
    /// `sum_k r_k Sigma_k^{-1} (zeta - mu_k)`.
    pub fn nll_and_latent_gradient(&self, zeta: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.components.len();
        let d = self.dim;
        let mut lj = vec![0.0; k];
        let mut whitened = vec![0.0; k * d];
        for (i, c) in self.components.iter().enumerate() {
            let y = &mut whitened[i * d..(i + 1) * d];
            lj[i] = c.log_norm - 0.5 * c.whiten(zeta, y);
        }
        let lse = log_sum_exp(&lj);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (i, c) in self.components.iter().enumerate() {
            let r = (lj[i] - lse).exp();
            if r == 0.0 {
                continue;
            }
            let y = &mut whitened[i * d..(i + 1) * d];
            c.back_substitute(y);
            for (g, v) in grad.iter_mut().zip(y.iter()) {
                *g += r * v;
            }
        }
        -lse
    }

    /// Spatial gradient of the NLL by the chain rule through the latent
    /// Jacobian (`D x dim`, row-major). Returns the NLL.
    pub fn nll_gradient(&self, zeta: &[f64], jacobian: &[f64], grad: &mut [f64]) -> f64 {
        let dim = grad.len();
        let mut gz = vec![0.0; self.dim];
        let nll = self.nll_and_latent_gradient(zeta, &mut gz);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (i, gzi) in gz.iter().enumerate() {
            for (j, g) in grad.iter_mut().enumerate() {
                *g += gzi * jacobian[i * dim + j];
            }
        }
        nll
    }

    /// Mean log-likelihood per sample and responsibilities (`n x K`).
    fn e_step(&self, data: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let k = self.components.len();
        let mut resp = vec![0.0; data.len() * k];
        let mut scratch = vec![0.0; self.dim];
        let mut total = 0.0;
        for (n, z) in data.iter().enumerate() {
            let row = &mut resp[n * k..(n + 1) * k];
            self.log_joint(z, row, &mut scratch);
            let lse = log_sum_exp(row);
            total += lse;
            for r in row.iter_mut() {
                *r = (*r - lse).exp();
            }
        }
        (total / data.len() as f64, resp)
    }

    pub fn mean_log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        self.e_step(data).0
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub components: usize,
    pub seed: u64,
    /// Added to every covariance diagonal in each M-step.
    pub reg: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl EmOptions {
    pub fn new(components: usize, seed: u64, reg: f64) -> Self {
        EmOptions {
            components,
            seed,
            reg,
            tol: 1e-3,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean log-likelihood per sample after each accepted iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub reseeds: usize,
}

/// `reg_scale * trace(sample covariance) / D`.
pub fn relative_regularization(data: &[Vec<f64>], reg_scale: f64) -> f64 {
    let n = data.len() as f64;
    let d = data[0].len();
    let mut trace = 0.0;
    for j in 0..d {
        let mean = data.iter().map(|z| z[j]).sum::<f64>() / n;
        trace += data.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / n;
    }
    reg_scale * trace / d as f64
}

/// EM for a full-covariance mixture, means seeded by k-means.
///
/// Iteration stops when the gain in mean log-likelihood drops below `tol`.
/// Because the covariance regulariser makes the M-step inexact, a step can in
/// principle lower the likelihood; such a step is treated as convergence and
/// discarded, so the recorded likelihood sequence never decreases (except
/// across component re-seeds, which are counted in [`EmFit::reseeds`]).
pub fn em_fit(data: &[Vec<f64>], opts: &EmOptions) -> Result<EmFit> {
    let k = opts.components;
    if data.len() < k || k == 0 {
        return Err(Error::invalid(format!(
            "EM needs at least k = {k} >= 1 samples, got {}",
            data.len()
        )));
    }
    if !(opts.reg > 0.0) {
        return Err(Error::invalid("covariance regularisation must be positive"));
    }
    let d = data[0].len();
    let init = kmeans(data, k, opts.seed)?;
    let mut resp = vec![0.0; data.len() * k];
    for (n, &l) in init.labels.iter().enumerate() {
        resp[n * k + l] = 1.0;
    }
    let mut reseeds = 0;
    let mut model = m_step(data, &resp, k, d, opts.reg, None, &mut reseeds)?;
    let (mut ll, mut resp) = model.e_step(data);
    let mut history = vec![ll];
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let before = reseeds;
        let candidate = m_step(data, &resp, k, d, opts.reg, Some(&model), &mut reseeds)?;
        let (new_ll, new_resp) = candidate.e_step(data);
        let reseeded = reseeds > before;
        if !reseeded && new_ll < ll {
            converged = true;
            break;
        }
        let gain = new_ll - ll;
        model = candidate;
        resp = new_resp;
        ll = new_ll;
        history.push(ll);
        if !reseeded && gain < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        model,
        log_likelihood: history,
        converged,
        reseeds,
    })
}

fn m_step(
    data: &[Vec<f64>],
    resp: &[f64],
    k: usize,
    d: usize,
    reg: f64,
    previous: Option<&GmmModel>,
    reseeds: &mut usize,
) -> Result<GmmModel> {
    let n = data.len();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
        let weight = nk / n as f64;
        let (mean, cov) = if weight < DEGENERATE_WEIGHT {
            *reseeds += 1;
            if *reseeds > MAX_RESEEDS {
                return Err(Error::Degenerate(format!(
                    "mixture component {c} collapsed (weight {weight:e}) after {MAX_RESEEDS} re-seeds"
                )));
            }
            // restart the component at the worst-explained sample with the
            // pooled covariance
            let worst = match previous {
                Some(m) => (0..n)
                    .max_by(|&a, &b| m.nll(&data[a]).total_cmp(&m.nll(&data[b])))
                    .unwrap(),
                None => 0,
            };
            let uniform = vec![1.0 / n as f64; n];
            let (_, mut cov) = weighted_moments(data, &uniform, 1.0, d);
            for i in 0..d {
                cov[(i, i)] += reg;
            }
            weights.push(1.0 / n as f64);
            means.push(data[worst].clone());
            covs.push(cov);
            continue;
        } else {
            let w: Vec<f64> = (0..n).map(|i| resp[i * k + c]).collect();
            weighted_moments(data, &w, nk, d)
        };
        let mut cov = cov;
        for i in 0..d {
            cov[(i, i)] += reg;
        }
        weights.push(weight);
        means.push(mean);
        covs.push(cov);
    }
    GmmModel::new(&weights, &means, &covs)
}

fn weighted_moments(data: &[Vec<f64>], w: &[f64], total: f64, d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut mean = vec![0.0; d];
    for (z, &wi) in data.iter().zip(w) {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += wi * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut centered = DMatrix::<f64>::zeros(d, data.len());
    for (col, (z, &wi)) in data.iter().zip(w).enumerate() {
        let s = wi.sqrt();
        for j in 0..d {
            centered[(j, col)] = s * (z[j] - mean[j]);
        }
    }
    let mut cov = &centered * centered.transpose();
    cov /= total;
    // exact symmetry for the Cholesky factorisation
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}
