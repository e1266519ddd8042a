//! Time grids.

use crate::error::{Error, Result};

/// Tolerance used when matching a time to a grid node.
const NODE_TOL: f64 = 1e-12;

/// A strictly increasing sequence of times `0 = t_0 < ... < t_M = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    /// `steps` equal steps on `[0, horizon]`. The last node is exactly `horizon`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        let dt = horizon / steps as f64;
        let mut points: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        points[steps] = horizon;
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two nodes".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("grid must start at 0, got {}", points[0])));
        }
        for w in points.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "grid must be strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { points })
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }

    /// `t_{i+1} - t_i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Index of the node equal to `t` (up to `1e-12`).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = self.points.partition_point(|&s| s < t - NODE_TOL);
        (pos < self.points.len() && (self.points[pos] - t).abs() <= NODE_TOL).then_some(pos)
    }

    /// Index of the node nearest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let pos = self.points.partition_point(|&s| s < t);
        if pos == 0 {
            return 0;
        }
        if pos >= self.points.len() {
            return self.points.len() - 1;
        }
        if (self.points[pos] - t).abs() < (t - self.points[pos - 1]).abs() {
            pos
        } else {
            pos - 1
        }
    }

    /// Grid with every node multiplied by `factor`.
    pub fn rescale(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidGrid(format!("scale factor must be positive, got {factor}")));
        }
        Self::from_points(self.points.iter().map(|t| t * factor).collect())
    }

    /// Largest step size.
    pub fn mesh(&self) -> f64 {
        self.points.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ends_exactly_at_horizon() {
        let g = TimeGrid::uniform(0.7, 3).unwrap();
        assert_eq!(g.steps(), 3);
        assert_eq!(g.horizon(), 0.7);
        assert_eq!(g.index_of(0.7), Some(3));
        assert!((g.dt(1) - 0.7 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::uniform(0.0, 3).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::from_points(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_points(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn nearest_index_rounds() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.nearest_index(0.3), 1);
        assert_eq!(g.nearest_index(0.4), 2);
        assert_eq!(g.nearest_index(7.0), 4);
        assert_eq!(g.index_of(0.3), None);
    }
}
