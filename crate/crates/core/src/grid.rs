use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// One dimension of a regular histogram grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub periodic: bool,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Axis {
            lo,
            hi,
            bins,
            periodic: false,
        }
    }

    /// `[-pi, pi)` with wrap-around.
    pub fn angular(bins: usize) -> Self {
        Axis {
            lo: -PI,
            hi: PI,
            bins,
            periodic: true,
        }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    pub fn index(&self, v: f64) -> Option<usize> {
        let v = if self.periodic {
            crate::potentials::wrap_angle(v)
        } else {
            v
        };
        if !v.is_finite() || v < self.lo || v > self.hi {
            return None;
        }
        let i = ((v - self.lo) / self.width()).floor() as usize;
        Some(i.min(self.bins - 1))
    }
}

/// Row-major product grid; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Self {
        GridSpec { axes }
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn total_bins(&self) -> usize {
        self.axes.iter().map(|a| a.bins).product()
    }

    pub fn bin_index(&self, point: &[f64]) -> Option<usize> {
        if point.len() != self.axes.len() {
            return None;
        }
        let mut flat = 0;
        for (axis, &v) in self.axes.iter().zip(point) {
            flat = flat * axis.bins + axis.index(v)?;
        }
        Some(flat)
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            idx[d] = flat % axis.bins;
            flat /= axis.bins;
        }
        idx
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .into_iter()
            .zip(&self.axes)
            .map(|(i, a)| a.center(i))
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.total_bins()).map(|i| self.center(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ravel_roundtrip() {
        let g = GridSpec::new(vec![Axis::new(0.0, 1.0, 3), Axis::angular(4)]);
        for flat in 0..g.total_bins() {
            assert_eq!(g.bin_index(&g.center(flat)), Some(flat));
        }
    }

    #[test]
    fn upper_edge_falls_in_last_bin() {
        let a = Axis::new(-2.0, 2.0, 101);
        assert_eq!(a.index(2.0), Some(100));
        assert_eq!(a.index(2.0001), None);
        assert_eq!(a.index(-2.0), Some(0));
    }

    #[test]
    fn periodic_axis_wraps() {
        let a = Axis::angular(60);
        assert_eq!(a.index(PI + 0.01), a.index(-PI + 0.01));
    }
}
