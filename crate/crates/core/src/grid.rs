//! Uniform one-dimensional grids and functions sampled on them.

use std::io::{self, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    x_min: f64,
    x_max: f64,
    n: usize,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if n < 3 || !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::InvalidConfig(format!(
                "grid [{x_min}, {x_max}] with {n} nodes"
            )));
        }
        Ok(Self { x_min, x_max, n })
    }

    /// `[-8, 8]` with 1601 nodes.
    pub fn benchmark() -> Self {
        Self {
            x_min: -8.0,
            x_max: 8.0,
            n: 1601,
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.x_max
        } else {
            self.x_min + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.node(i))
    }

    /// Indices of nodes inside `[a, b]`.
    pub fn indices_within(&self, a: f64, b: f64) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&i| {
            let x = self.node(i);
            x >= a - 1e-12 && x <= b + 1e-12
        })
    }
}

/// Values on a [`Grid1D`] with a Lipschitz-consistent extrapolation rule:
/// past either end the function continues linearly with the boundary
/// one-sided slope, clamped to `±slope_clamp`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn {
    grid: Grid1D,
    values: Vec<f64>,
    slope_clamp: f64,
}

impl GridFn {
    pub fn new(grid: Grid1D, values: Vec<f64>, slope_clamp: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidConfig(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function values"));
        }
        if slope_clamp.is_nan() || slope_clamp < 0.0 {
            return Err(Error::InvalidConfig(format!("slope clamp {slope_clamp}")));
        }
        Ok(Self {
            grid,
            values,
            slope_clamp,
        })
    }

    pub fn from_fn(grid: Grid1D, slope_clamp: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.nodes().map(f).collect(), slope_clamp)
    }

    pub fn constant(grid: Grid1D, c: f64, slope_clamp: f64) -> Result<Self> {
        Self::new(grid, vec![c; grid.len()], slope_clamp)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slope_clamp(&self) -> f64 {
        self.slope_clamp
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, values, self.slope_clamp)
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = self
            .grid
            .nodes()
            .zip(&self.values)
            .map(|(x, &v)| f(x, v))
            .collect();
        self.with_values(values)
    }

    fn left_slope(&self) -> f64 {
        let s = (self.values[1] - self.values[0]) / self.grid.step();
        s.clamp(-self.slope_clamp, self.slope_clamp)
    }

    fn right_slope(&self) -> f64 {
        let n = self.values.len();
        let s = (self.values[n - 1] - self.values[n - 2]) / self.grid.step();
        s.clamp(-self.slope_clamp, self.slope_clamp)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let g = &self.grid;
        let n = self.values.len();
        if x <= g.x_min {
            return self.values[0] + self.left_slope() * (x - g.x_min);
        }
        if x >= g.x_max {
            return self.values[n - 1] + self.right_slope() * (x - g.x_max);
        }
        let t = (x - g.x_min) / g.step();
        let i = (t.floor() as usize).min(n - 2);
        let w = t - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    pub fn sup_distance(&self, other: &GridFn) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes a two-column `x,value` CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,value")?;
        for (x, v) in self.grid.nodes().zip(&self.values) {
            writeln!(w, "{},{}", fmt_f64(x), fmt_f64(*v))?;
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Relative L² error `‖a − b‖₂ / ‖b‖₂` over the grid nodes in `[lo, hi]`.
pub fn rel_l2_on(a: &GridFn, b: &GridFn, lo: f64, hi: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in b.grid().indices_within(lo, hi) {
        let d = a.values()[i] - b.values()[i];
        num += d * d;
        den += b.values()[i] * b.values()[i];
    }
    (num / den).sqrt()
}

/// Sup error over the grid nodes in `[lo, hi]`.
pub fn sup_on(a: &GridFn, b: &GridFn, lo: f64, hi: f64) -> f64 {
    b.grid()
        .indices_within(lo, hi)
        .map(|i| (a.values()[i] - b.values()[i]).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes() {
        let g = Grid1D::new(-1.0, 1.0, 5).unwrap();
        assert_eq!(g.step(), 0.5);
        let nodes: Vec<_> = g.nodes().collect();
        assert_eq!(nodes, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(Grid1D::new(0.0, 1.0, 2).is_err());
        assert!(Grid1D::new(1.0, 0.0, 10).is_err());
    }

    #[test]
    fn interpolation_and_clamped_extrapolation() {
        let g = Grid1D::new(0.0, 2.0, 3).unwrap();
        let f = GridFn::new(g, vec![0.0, 1.0, 5.0], 2.0).unwrap();
        assert_eq!(f.eval(0.5), 0.5);
        assert_eq!(f.eval(1.5), 3.0);
        // right slope 4 clamped to 2
        assert_eq!(f.eval(3.0), 7.0);
        // left slope 1 unclamped
        assert_eq!(f.eval(-1.0), -1.0);
        assert_eq!(f.eval(2.0), 5.0);
    }

    #[test]
    fn rejects_non_finite() {
        let g = Grid1D::new(0.0, 1.0, 3).unwrap();
        assert!(GridFn::new(g, vec![0.0, f64::NAN, 1.0], 1.0).is_err());
        assert!(GridFn::new(g, vec![0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let g = Grid1D::new(0.0, 1.0, 3).unwrap();
        let f = GridFn::new(g, vec![1.0, 2.0, 3.0], 1.0).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "x,value");
        assert_eq!(lines[2], "5.0000000000000000e-1,2.0000000000000000e0");
    }
}
