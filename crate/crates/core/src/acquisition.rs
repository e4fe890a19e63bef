//! Choosing new training configurations from biased trajectories.

use crate::error::{Error, Result};
use crate::potentials::{Configuration, GroundTruthPotential};
use crate::rng::Rng;
use crate::surrogate::{LabeledRecord, Provenance};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionPolicy {
    pub u_cutoff: f64,
    pub cutoff_growth: f64,
    pub cosine_threshold: f64,
    pub max_new_per_generation: usize,
    /// Candidates beyond this count are thinned to an evenly spaced subset
    /// before clustering, which is quadratic in memory.
    pub max_candidates: usize,
    pub seed: u64,
}

impl AcquisitionPolicy {
    pub const DEFAULT_COSINE_THRESHOLD: f64 = 0.015;
    pub const DEFAULT_MAX_NEW: usize = 200;
    pub const DEFAULT_MAX_CANDIDATES: usize = 2000;

    pub fn new(u_cutoff: f64, cutoff_growth: f64, seed: u64) -> Result<Self> {
        let p = AcquisitionPolicy {
            u_cutoff,
            cutoff_growth,
            cosine_threshold: Self::DEFAULT_COSINE_THRESHOLD,
            max_new_per_generation: Self::DEFAULT_MAX_NEW,
            max_candidates: Self::DEFAULT_MAX_CANDIDATES,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cosine_threshold > 0.0 && self.cosine_threshold < 2.0) {
            return Err(Error::invalid("cosine threshold must lie in (0, 2)"));
        }
        if !(self.cutoff_growth > 0.0) {
            return Err(Error::invalid("cutoff growth must be positive"));
        }
        if self.max_candidates == 0 {
            return Err(Error::invalid("max_candidates must be positive"));
        }
        Ok(())
    }
}

/// Indices of values strictly above `cutoff`, in order.
pub fn filter_by_uncertainty(u: &[f64], cutoff: f64) -> Vec<usize> {
    u.iter()
        .enumerate()
        .filter(|(_, &v)| v > cutoff)
        .map(|(i, _)| i)
        .collect()
}

/// Symmetric `n x n` matrix of `1 - cos(a, b)`, row-major.
pub fn cosine_distance_matrix(latents: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = latents.len();
    let norms: Vec<f64> = latents
        .iter()
        .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("latent {i} has zero norm")));
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = latents[i].iter().zip(&latents[j]).map(|(a, b)| a * b).sum();
            let v = (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// Agglomerative complete-linkage clustering on a row-major distance matrix.
/// Repeatedly merges the closest pair of clusters (lowest index pair on
/// ties) until the closest pair is farther apart than `threshold`. Returns a
/// label per point; labels are numbered by first appearance.
pub fn complete_linkage_clusters(dist: &[f64], n: usize, threshold: f64) -> Vec<usize> {
    assert_eq!(dist.len(), n * n, "distance matrix must be n x n");
    // Cluster distances live in the upper triangle, keyed by the lowest member
    // index of each cluster. Each active row caches its nearest active
    // partner with a higher key; merges only grow distances, so a cache stays
    // valid unless it pointed at one of the merged clusters.
    let mut d = dist.to_vec();
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nd = vec![f64::INFINITY; n];
    let rescan = |d: &[f64], active: &[bool], i: usize| {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in i + 1..n {
            if active[j] && d[i * n + j] < best.0 {
                best = (d[i * n + j], j);
            }
        }
        best
    };
    for i in 0..n {
        (nd[i], nn[i]) = rescan(&d, &active, i);
    }
    loop {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && best.is_none_or(|(b, _)| nd[i] < b) {
                best = Some((nd[i], i));
            }
        }
        let Some((v, i)) = best else { break };
        if v > threshold {
            break;
        }
        let j = nn[i];
        for k in 0..n {
            if active[k] && k != i && k != j {
                let (ik, jk) = (i.min(k) * n + i.max(k), j.min(k) * n + j.max(k));
                d[ik] = d[ik].max(d[jk]);
            }
        }
        active[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
        for k in 0..n {
            if active[k] && (k == i || nn[k] == i || nn[k] == j) {
                (nd[k], nn[k]) = rescan(&d, &active, k);
            }
        }
    }
    let mut relabel = vec![usize::MAX; n];
    let mut next = 0;
    owner
        .iter()
        .map(|&o| {
            if relabel[o] == usize::MAX {
                relabel[o] = next;
                next += 1;
            }
            relabel[o]
        })
        .collect()
}

/// Members of each cluster, clusters ordered by label.
pub fn cluster_members(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// One uniformly drawn member per cluster. When there are more clusters than
/// `max_new`, the largest clusters are kept (ties by lower label).
pub fn select_representatives(clusters: &[Vec<usize>], max_new: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| clusters[b].len().cmp(&clusters[a].len()).then(a.cmp(&b)));
    order.truncate(max_new);
    order.sort_unstable();
    order
        .into_iter()
        .filter(|&c| !clusters[c].is_empty())
        .map(|c| {
            let m = &clusters[c];
            m[rng.random_range(0..m.len())]
        })
        .collect()
}

/// Ground-truth labels tagged with `provenance`.
pub fn label_with_oracle(
    configs: &[Configuration],
    oracle: &GroundTruthPotential,
    provenance: Provenance,
) -> Result<Vec<LabeledRecord>> {
    configs
        .iter()
        .map(|c| {
            let (energy, forces) = oracle.evaluate(c)?;
            Ok(LabeledRecord {
                config: c.clone(),
                energy,
                forces,
                provenance,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionOutcome {
    pub candidates: usize,
    pub clusters: usize,
    /// Indices into the frame pool.
    pub selected: Vec<usize>,
}

/// Threshold, cluster and pick from a pool of frames with calibrated
/// uncertainties and latent vectors.
pub fn acquire(u: &[f64], latents: &[Vec<f64>], cutoff: f64, policy: &AcquisitionPolicy, rng: &mut Rng) -> Result<AcquisitionOutcome> {
    if u.len() != latents.len() {
        return Err(Error::invalid("uncertainties and latents differ in length"));
    }
    let above = filter_by_uncertainty(u, cutoff);
    let n_above = above.len();
    let candidates = thin(above, policy.max_candidates);
    if candidates.is_empty() {
        return Ok(AcquisitionOutcome {
            candidates: 0,
            clusters: 0,
            selected: Vec::new(),
        });
    }
    let pool: Vec<Vec<f64>> = candidates.iter().map(|&i| latents[i].clone()).collect();
    let dist = cosine_distance_matrix(&pool)?;
    let labels = complete_linkage_clusters(&dist, pool.len(), policy.cosine_threshold);
    let members = cluster_members(&labels);
    let picked = select_representatives(&members, policy.max_new_per_generation, rng);
    Ok(AcquisitionOutcome {
        candidates: n_above,
        clusters: members.len(),
        selected: picked.into_iter().map(|i| candidates[i]).collect(),
    })
}

/// Evenly spaced subset of at most `cap` entries, order preserved.
fn thin(v: Vec<usize>, cap: usize) -> Vec<usize> {
    if v.len() <= cap {
        return v;
    }
    (0..cap).map(|k| v[k * v.len() / cap]).collect()
}
