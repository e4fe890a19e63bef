//! Linear-in-features surrogate potential.
//!
//! Features are Gaussian bumps on a fixed lattice. On non-periodic dimensions
//! a bump is `exp(-|x - c|^2 / (2 w^2))`; on periodic dimensions the squared
//! distance is replaced by the chord form `2 (1 - cos(x - c))`, which keeps
//! the features smooth across the wrap-around. The energy is `w . phi(x) + b`
//! and the forces are `-J(x)^T w`, both exact. The feature vector `phi(x)` is
//! the latent representation used by the uncertainty model.

use crate::error::{check_dim, Error, Result};
use crate::potentials::{periodic_delta, Configuration, Pes};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Largest coordinate dimension a feature map accepts.
pub const MAX_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    dim: usize,
    /// Row-major `len() x dim`.
    centers: Vec<f64>,
    widths: Vec<f64>,
    periodic: Vec<bool>,
}

impl FeatureMap {
    pub fn new(dim: usize, centers: Vec<f64>, widths: Vec<f64>, periodic: Vec<bool>) -> Result<Self> {
        check_dim(dim, periodic.len())?;
        check_dim(centers.len(), widths.len() * dim)?;
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::invalid(format!("feature maps support 1..={MAX_DIM} dimensions, got {dim}")));
        }
        if widths.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("feature widths must be positive"));
        }
        Ok(FeatureMap {
            dim,
            centers,
            widths,
            periodic,
        })
    }

    /// Uniform lattice with `per_dim` centres along every dimension. Bounded
    /// dimensions place centres on `[lo, hi]` inclusive, periodic ones at
    /// `-pi + i * 2pi / per_dim`. `offset` shifts the lattice by that fraction
    /// of a spacing. Widths are `width_factor` times the largest spacing.
    pub fn lattice(
        bounds: &[(f64, f64)],
        periodic: &[bool],
        per_dim: usize,
        width_factor: f64,
        offset: f64,
    ) -> Result<Self> {
        check_dim(bounds.len(), periodic.len())?;
        if per_dim < 2 {
            return Err(Error::invalid("lattice needs at least 2 centres per dimension"));
        }
        let dim = bounds.len();
        let axes: Vec<(f64, f64)> = bounds
            .iter()
            .zip(periodic)
            .map(|(&(lo, hi), &p)| {
                if p {
                    let h = crate::potentials::TWO_PI / per_dim as f64;
                    (-std::f64::consts::PI + offset * h, h)
                } else {
                    let h = (hi - lo) / (per_dim - 1) as f64;
                    (lo + offset * h, h)
                }
            })
            .collect();
        let spacing = axes.iter().map(|a| a.1).fold(0.0, f64::max);
        let count = per_dim.pow(dim as u32);
        let mut centers = Vec::with_capacity(count * dim);
        for flat in 0..count {
            let mut rem = flat;
            let mut point = vec![0.0; dim];
            for d in (0..dim).rev() {
                point[d] = axes[d].0 + (rem % per_dim) as f64 * axes[d].1;
                rem /= per_dim;
            }
            centers.extend(point);
        }
        Self::new(dim, centers, vec![width_factor * spacing; count], periodic.to_vec())
    }

    /// Lattice of (approximately) `features` centres: `per_dim` is the
    /// nearest integer `dim`-th root.
    pub fn lattice_with_size(
        bounds: &[(f64, f64)],
        periodic: &[bool],
        features: usize,
        width_factor: f64,
        offset: f64,
    ) -> Result<Self> {
        let per_dim = (features as f64).powf(1.0 / bounds.len() as f64).round() as usize;
        Self::lattice(bounds, periodic, per_dim, width_factor, offset)
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn width(&self, i: usize) -> f64 {
        self.widths[i]
    }

    /// Per-dimension `(g, h)` of feature `i` at `x`, where `exponent = -sum q_d / w^2`,
    /// `dq_d/dx_d = g_d` and `d2q_d/dx_d2 = h_d`.
    #[inline]
    fn exponent_terms(&self, i: usize, x: &[f64], g: &mut [f64], h: &mut [f64]) -> f64 {
        let c = self.center(i);
        let mut q = 0.0;
        for d in 0..self.dim {
            if self.periodic[d] {
                let delta = periodic_delta(x[d], c[d]);
                let (s, co) = delta.sin_cos();
                q += 1.0 - co;
                g[d] = s;
                h[d] = co;
            } else {
                let delta = x[d] - c[d];
                q += 0.5 * delta * delta;
                g[d] = delta;
                h[d] = 1.0;
            }
        }
        q
    }

    pub fn features(&self, x: &[f64], out: &mut [f64]) {
        let mut g = vec![0.0; self.dim];
        let mut h = vec![0.0; self.dim];
        for (i, o) in out.iter_mut().enumerate() {
            let w2 = self.widths[i] * self.widths[i];
            *o = (-self.exponent_terms(i, x, &mut g, &mut h) / w2).exp();
        }
    }

    /// Features and their Jacobian (`len() x dim`, row-major).
    pub fn features_jacobian(&self, x: &[f64], phi: &mut [f64], jac: &mut [f64]) {
        let dim = self.dim;
        let mut g = vec![0.0; dim];
        let mut h = vec![0.0; dim];
        for i in 0..self.len() {
            let w2 = self.widths[i] * self.widths[i];
            let p = (-self.exponent_terms(i, x, &mut g, &mut h) / w2).exp();
            phi[i] = p;
            for d in 0..dim {
                jac[i * dim + d] = -p * g[d] / w2;
            }
        }
    }

    /// `sum_i weights_i * Hessian(phi_i)` at `x`, row-major `dim x dim`.
    pub fn weighted_hessian(&self, x: &[f64], weights: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let mut out = vec![0.0; dim * dim];
        let mut g = vec![0.0; dim];
        let mut h = vec![0.0; dim];
        for (i, &wt) in weights.iter().enumerate() {
            let w2 = self.widths[i] * self.widths[i];
            let p = (-self.exponent_terms(i, x, &mut g, &mut h) / w2).exp();
            for a in 0..dim {
                for b in 0..dim {
                    let mut v = g[a] * g[b] / (w2 * w2);
                    if a == b {
                        v -= h[a] / w2;
                    }
                    out[a * dim + b] += wt * p * v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    Generation(u32),
}

impl Provenance {
    pub fn tag(&self) -> String {
        match self {
            Provenance::Initial => "initial".to_string(),
            Provenance::Generation(g) => format!("gen{g}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "initial" {
            return Some(Provenance::Initial);
        }
        s.strip_prefix("gen")?.parse().ok().map(Provenance::Generation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub config: Configuration,
    pub energy: f64,
    pub forces: Vec<f64>,
    pub provenance: Provenance,
}

/// Append-only collection of oracle-labelled configurations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    records: Vec<LabeledRecord>,
}

impl LabeledSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: LabeledRecord) -> Result<()> {
        check_dim(record.config.dim(), record.forces.len())?;
        if let Some(first) = self.records.first() {
            check_dim(first.config.dim(), record.config.dim())?;
        }
        if !record.energy.is_finite() || record.forces.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("labels must be finite"));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = LabeledRecord>) -> Result<()> {
        for r in records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[LabeledRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn configs(&self) -> impl Iterator<Item = &Configuration> {
        self.records.iter().map(|r| &r.config)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// CSV with columns `provenance,x0..,energy,f0..`.
    pub fn to_csv(&self) -> String {
        let dim = self.records.first().map_or(0, |r| r.config.dim());
        let mut s = String::from("provenance");
        for d in 0..dim {
            s.push_str(&format!(",x{d}"));
        }
        s.push_str(",energy");
        for d in 0..dim {
            s.push_str(&format!(",f{d}"));
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.provenance.tag());
            for v in r.config.coords() {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{}", r.energy));
            for v in &r.forces {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, periodic: &[bool]) -> Result<Self> {
        let dim = periodic.len();
        let mut set = LabeledSet::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let bad = |msg: &str| Error::Parse {
                line: ln + 1,
                msg: msg.to_string(),
            };
            if cols.len() != 2 + 2 * dim {
                return Err(bad("wrong column count"));
            }
            let provenance = Provenance::parse(cols[0]).ok_or_else(|| bad("bad provenance"))?;
            let nums: Vec<f64> = cols[1..]
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad number"))?;
            set.push(LabeledRecord {
                config: Configuration::new(nums[..dim].to_vec(), periodic.to_vec())?,
                energy: nums[dim],
                forces: nums[dim + 1..].to_vec(),
                provenance,
            })?;
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub generation: u32,
    pub dataset_size: usize,
    pub ridge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub ridge: f64,
    pub force_weight: f64,
    pub generation: u32,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge: 1e-6,
            force_weight: 1.0,
            generation: 0,
        }
    }
}

/// Output of [`SurrogateModel::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub energy: f64,
    pub forces: Vec<f64>,
    pub zeta: Vec<f64>,
    /// `len() x dim`, row-major.
    pub jacobian: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub feature_map: FeatureMap,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: TrainMetadata,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: SurrogateModel,
}

impl SurrogateModel {
    pub fn zero(feature_map: FeatureMap, bias: f64) -> Self {
        let d = feature_map.len();
        SurrogateModel {
            feature_map,
            weights: vec![0.0; d],
            bias,
            meta: TrainMetadata {
                generation: 0,
                dataset_size: 0,
                ridge: 0.0,
            },
        }
    }

    /// Minimises
    /// `sum (E_pred - E)^2 + w_f sum |F_pred - F|^2 + ridge |weights|^2`
    /// over weights and (unregularised) bias via the normal equations.
    pub fn fit(feature_map: &FeatureMap, data: &LabeledSet, opts: &FitOptions) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("cannot fit on an empty dataset"));
        }
        if !(opts.ridge > 0.0) {
            return Err(Error::invalid("ridge must be positive"));
        }
        let d = feature_map.len();
        let dim = feature_map.dim();
        let n = d + 1;
        let mut normal = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        let mut phi = vec![0.0; d];
        let mut jac = vec![0.0; d * dim];
        let mut row = DVector::<f64>::zeros(n);
        for rec in data.records() {
            check_dim(dim, rec.config.dim())?;
            feature_map.features_jacobian(rec.config.coords(), &mut phi, &mut jac);
            row.as_mut_slice()[..d].copy_from_slice(&phi);
            row[d] = 1.0;
            normal.ger(1.0, &row, &row, 1.0);
            rhs.axpy(rec.energy, &row, 1.0);
            row[d] = 0.0;
            for j in 0..dim {
                for i in 0..d {
                    row[i] = -jac[i * dim + j];
                }
                normal.ger(opts.force_weight, &row, &row, 1.0);
                rhs.axpy(opts.force_weight * rec.forces[j], &row, 1.0);
            }
        }
        for i in 0..d {
            normal[(i, i)] += opts.ridge;
        }
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::Degenerate("normal equations not positive definite".into()))?;
        let theta = chol.solve(&rhs);
        Ok(SurrogateModel {
            feature_map: feature_map.clone(),
            weights: theta.as_slice()[..d].to_vec(),
            bias: theta[d],
            meta: TrainMetadata {
                generation: opts.generation,
                dataset_size: data.len(),
                ridge: opts.ridge,
            },
        })
    }

    /// Value of the fitting objective for the current parameters on `data`.
    pub fn objective(&self, data: &LabeledSet, opts: &FitOptions) -> f64 {
        let mut total = opts.ridge * self.weights.iter().map(|w| w * w).sum::<f64>();
        let mut f = vec![0.0; self.feature_map.dim()];
        for rec in data.records() {
            let e = self.energy_forces(rec.config.coords(), &mut f);
            total += (e - rec.energy).powi(2);
            total += opts.force_weight * f.iter().zip(&rec.forces).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total
    }

    pub fn dim(&self) -> usize {
        self.feature_map.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.feature_map.len()
    }

    pub fn featurize(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.feature_map.len();
        let mut phi = vec![0.0; d];
        let mut jac = vec![0.0; d * self.dim()];
        self.feature_map.features_jacobian(x, &mut phi, &mut jac);
        (phi, jac)
    }

    pub fn latent(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = vec![0.0; self.feature_map.len()];
        self.feature_map.features(x, &mut phi);
        phi
    }

    pub fn predict(&self, config: &Configuration) -> Result<Prediction> {
        check_dim(self.dim(), config.dim())?;
        let (zeta, jacobian) = self.featurize(config.coords());
        let dim = self.dim();
        let energy = self.bias + zeta.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
        let mut forces = vec![0.0; dim];
        for (i, w) in self.weights.iter().enumerate() {
            for d in 0..dim {
                forces[d] -= jacobian[i * dim + d] * w;
            }
        }
        Ok(Prediction {
            energy,
            forces,
            zeta,
            jacobian,
        })
    }

    /// Hessian of the predicted energy, row-major `dim x dim`.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        self.feature_map.weighted_hessian(x, &self.weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck.model)
    }
}

impl Pes for SurrogateModel {
    fn dim(&self) -> usize {
        self.feature_map.dim()
    }

    fn periodic(&self) -> &[bool] {
        self.feature_map.periodic()
    }

    fn bounds(&self) -> Option<&[(f64, f64)]> {
        None
    }

    fn energy_forces(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        let fm = &self.feature_map;
        let dim = fm.dim;
        let mut g = [0.0f64; MAX_DIM];
        let mut h = [0.0f64; MAX_DIM];
        let (g, h) = (&mut g[..dim], &mut h[..dim]);
        forces.iter_mut().for_each(|f| *f = 0.0);
        let mut e = self.bias;
        for (i, &w) in self.weights.iter().enumerate() {
            let w2 = fm.widths[i] * fm.widths[i];
            let p = (-fm.exponent_terms(i, x, g, h) / w2).exp();
            e += w * p;
            let s = w * p / w2;
            for d in 0..dim {
                forces[d] += s * g[d];
            }
        }
        e
    }
}

/// A surrogate restricted to a domain, for integrating on non-periodic
/// systems with the same termination rule as the ground truth.
pub struct BoundedSurrogate<'a> {
    pub model: &'a SurrogateModel,
    pub bounds: Vec<(f64, f64)>,
}

impl Pes for BoundedSurrogate<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn periodic(&self) -> &[bool] {
        self.model.periodic()
    }

    fn bounds(&self) -> Option<&[(f64, f64)]> {
        Some(&self.bounds)
    }

    fn energy_forces(&self, x: &[f64], forces: &mut [f64]) -> f64 {
        self.model.energy_forces(x, forces)
    }
}
