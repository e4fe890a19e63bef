use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use rand::Rng as _;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub means: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

pub const MAX_LLOYD_ITERATIONS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`MAX_LLOYD_ITERATIONS`] is reached.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::invalid("k-means on empty input"));
    }
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("k-means points of unequal dimension"));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of distinct points ({distinct})"
        )));
    }
    let mut rng = seeded(seed);
    let mut means = plus_plus(points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for it in 0..MAX_LLOYD_ITERATIONS {
        iterations = it + 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = nearest(&means, p);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centre
            if counts[c] > 0 {
                means[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        means,
        labels,
        iterations,
    })
}

fn nearest(means: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in means.iter().enumerate() {
        let d = sq_dist(m, p);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut means = Vec::with_capacity(k);
    means.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &means[0])).collect();
    while means.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain");
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        means.push(points[pick].clone());
        let m = means.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, m));
        }
    }
    means
}
