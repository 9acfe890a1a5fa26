//! Uniform space/time grids, piecewise-constant densities and the 1-D
//! finite-difference and transport utilities built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this log argument we clamp, so `ln` stays finite.
pub const LOG_FLOOR: f64 = 1e-300;
/// Cells with `p < MASS_FLOOR * max(p)` are excluded from Fisher-type integrals.
pub const MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub half_width: f64,
    pub n_cells: usize,
}

impl SpatialGrid {
    pub fn new(half_width: f64, n_cells: usize) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidGrid(format!("half_width {half_width} must be positive")));
        }
        if n_cells < 8 {
            return Err(Error::InvalidGrid(format!("n_cells {n_cells} < 8")));
        }
        Ok(Self { half_width, n_cells })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.n_cells as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.x(i)).collect()
    }

    /// Left edge of cell `i` (face `i`); face `n_cells` is the right boundary.
    pub fn face(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidGrid(format!("horizon {horizon} must be positive")));
        }
        if n_steps < 4 {
            return Err(Error::InvalidGrid(format!("n_steps {n_steps} < 4")));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    /// Trapezoid weight of node `k` (in units of Δt).
    pub fn trapezoid(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            0.5
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
}

impl Density {
    /// Wraps raw values and normalizes them to unit mass.
    pub fn new(grid: SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells {
            return Err(Error::InvalidDensity(format!(
                "{} values for {} cells",
                values.len(),
                grid.n_cells
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDensity("values must be finite and non-negative".into()));
        }
        let mut d = Self { grid, values };
        d.normalize()?;
        Ok(d)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidDensity(format!("mass {m} cannot be normalized")));
        }
        for v in &mut self.values {
            *v /= m;
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        let dx = self.grid.dx();
        (0..self.grid.n_cells)
            .map(|i| self.grid.x(i) * self.values[i])
            .sum::<f64>()
            * dx
    }

    /// Variance of the cell-center distribution (no Δx²/12 correction).
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let dx = self.grid.dx();
        (0..self.grid.n_cells)
            .map(|i| (self.grid.x(i) - m).powi(2) * self.values[i])
            .sum::<f64>()
            * dx
    }

    /// ∫ p log p.
    pub fn entropy(&self) -> f64 {
        self.values
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.max(LOG_FLOOR).ln())
            .sum::<f64>()
            * self.grid.dx()
    }

    /// Mass in the outermost `cells` cells on each side.
    pub fn boundary_mass(&self, cells: usize) -> f64 {
        let n = self.grid.n_cells;
        let c = cells.min(n / 2);
        (self.values[..c].iter().sum::<f64>() + self.values[n - c..].iter().sum::<f64>()) * self.grid.dx()
    }

    /// Mask of cells above the relative mass floor.
    pub fn retained(&self) -> Vec<bool> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        self.values.iter().map(|p| *p >= MASS_FLOOR * max && *p > 0.0).collect()
    }

    pub fn log_values(&self) -> Vec<f64> {
        self.values.iter().map(|p| p.max(LOG_FLOOR).ln()).collect()
    }

    /// Cumulative distribution at the right face of each cell.
    pub fn cdf(&self) -> Vec<f64> {
        let dx = self.grid.dx();
        let mut acc = 0.0;
        self.values
            .iter()
            .map(|p| {
                acc += p * dx;
                acc
            })
            .collect()
    }

    /// Inverse of the piecewise-linear CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let dx = self.grid.dx();
        let mut acc = 0.0;
        for (i, p) in self.values.iter().enumerate() {
            let m = p * dx;
            if m > 0.0 && acc + m >= u {
                let frac = ((u - acc) / m).clamp(0.0, 1.0);
                return self.grid.face(i) + frac * dx;
            }
            acc += m;
        }
        self.grid.half_width
    }
}

/// Shorthand constructors used in scenarios and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensitySpec {
    Gaussian { mean: f64, std: f64 },
    Mixture { components: Vec<MixtureComponent> },
    /// Piecewise-constant values on `edges` (len = values.len() + 1); zero outside.
    Histogram { edges: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

fn gaussian_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn density_from_spec(spec: &DensitySpec, grid: SpatialGrid) -> Result<Density> {
    let xs = grid.centers();
    let values = match spec {
        DensitySpec::Gaussian { mean, std } => {
            if !(*std > 0.0) || !mean.is_finite() {
                return Err(Error::InvalidDensity(format!("gaussian std {std} must be positive")));
            }
            xs.iter().map(|x| gaussian_pdf(*x, *mean, *std)).collect()
        }
        DensitySpec::Mixture { components } => {
            if components.is_empty() {
                return Err(Error::InvalidDensity("empty mixture".into()));
            }
            for c in components {
                if !(c.std > 0.0 && c.weight >= 0.0) {
                    return Err(Error::InvalidDensity("mixture needs std > 0 and weight ≥ 0".into()));
                }
            }
            xs.iter()
                .map(|x| components.iter().map(|c| c.weight * gaussian_pdf(*x, c.mean, c.std)).sum())
                .collect()
        }
        DensitySpec::Histogram { edges, values } => {
            if edges.len() != values.len() + 1 || edges.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidDensity("histogram needs increasing edges, one more than values".into()));
            }
            xs.iter()
                .map(|x| match edges.windows(2).position(|w| *x >= w[0] && *x < w[1]) {
                    Some(j) => values[j],
                    None => 0.0,
                })
                .collect()
        }
    };
    Density::new(grid, values)
}

/// Discrete ∂ₓ: central differences inside, one-sided at the two ends.
pub fn grad(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    let mut g = vec![0.0; n];
    if n < 2 {
        return g;
    }
    g[0] = (f[1] - f[0]) / dx;
    g[n - 1] = (f[n - 1] - f[n - 2]) / dx;
    for i in 1..n - 1 {
        g[i] = (f[i + 1] - f[i - 1]) / (2.0 * dx);
    }
    g
}

/// Divergence of a face field (len n+1) onto cells.
pub fn divergence(m: &[f64], dx: f64) -> Vec<f64> {
    m.windows(2).map(|w| (w[1] - w[0]) / dx).collect()
}

/// Face field `m` (len n+1) with `m[0] = 0` and `divergence(m) = source`.
/// The last face carries the (tiny) leftover integral.
pub fn divergence_inverse(source: &[f64], dx: f64) -> Result<Vec<f64>> {
    let total: f64 = source.iter().sum::<f64>() * dx;
    let scale: f64 = source.iter().map(|s| s.abs()).sum::<f64>() * dx;
    if total.abs() > 1e-8 * scale.max(1.0) {
        return Err(Error::NonZeroMass(total));
    }
    let mut m = Vec::with_capacity(source.len() + 1);
    let mut acc = 0.0;
    m.push(0.0);
    for s in source {
        acc += s * dx;
        m.push(acc);
    }
    Ok(m)
}

/// Exact 1-D W₁ between piecewise-constant densities: ∫|F_a − F_b|.
pub fn wasserstein1(a: &Density, b: &Density) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    let dx = a.grid.dx();
    // F_a − F_b is piecewise linear inside each cell.
    let mut fa = 0.0;
    let mut fb = 0.0;
    let mut total = 0.0;
    for i in 0..a.grid.n_cells {
        let d0 = fa - fb;
        fa += a.values[i] * dx;
        fb += b.values[i] * dx;
        let d1 = fa - fb;
        total += abs_linear_integral(d0, d1) * dx;
    }
    Ok(total)
}

/// ∫₀¹ |d0 + (d1 − d0)s| ds.
fn abs_linear_integral(d0: f64, d1: f64) -> f64 {
    if d0 * d1 >= 0.0 {
        0.5 * (d0.abs() + d1.abs())
    } else {
        0.5 * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs())
    }
}

/// Exact 1-D W₂ through the piecewise-linear quantile functions.
pub fn wasserstein2(a: &Density, b: &Density) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    let qa = quantile_knots(a);
    let qb = quantile_knots(b);
    let mut us: Vec<f64> = qa.iter().chain(qb.iter()).map(|k| k.0).collect();
    us.sort_by(|x, y| x.partial_cmp(y).unwrap());
    us.dedup();
    let mut total = 0.0;
    for w in us.windows(2) {
        let (u0, u1) = (w[0], w[1]);
        if u1 <= u0 {
            continue;
        }
        let um = 0.5 * (u0 + u1);
        // Both quantiles are affine on (u0, u1); Simpson is exact for the square.
        let d0 = eval_knots(&qa, u0, um) - eval_knots(&qb, u0, um);
        let d1 = eval_knots(&qa, u1, um) - eval_knots(&qb, u1, um);
        let dm = eval_knots(&qa, um, um) - eval_knots(&qb, um, um);
        total += (u1 - u0) * (d0 * d0 + 4.0 * dm * dm + d1 * d1) / 6.0;
    }
    Ok(total.max(0.0).sqrt())
}

/// (cumulative mass, left x, right x, cell mass) per cell with positive mass.
fn quantile_knots(d: &Density) -> Vec<(f64, f64, f64, f64)> {
    let dx = d.grid.dx();
    let mut acc = 0.0;
    let mut knots = vec![(0.0, f64::NAN, f64::NAN, 0.0)];
    for (i, p) in d.values.iter().enumerate() {
        let m = p * dx;
        if m > 0.0 {
            acc += m;
            knots.push((acc, d.grid.face(i), d.grid.face(i + 1), m));
        }
    }
    let last = knots.len() - 1;
    knots[last].0 = 1.0;
    knots
}

/// Quantile at `u`, using the segment that contains `probe` (so segment
/// endpoints are evaluated on the correct side of a jump).
fn eval_knots(k: &[(f64, f64, f64, f64)], u: f64, probe: f64) -> f64 {
    let j = match k[1..].binary_search_by(|x| x.0.partial_cmp(&probe).unwrap()) {
        Ok(j) | Err(j) => (j + 1).min(k.len() - 1),
    };
    let (hi, xl, xr, _) = k[j];
    let lo = k[j - 1].0;
    let frac = if hi > lo { ((u - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    xl + frac * (xr - xl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalFlow {
    pub time_grid: TimeGrid,
    pub densities: Vec<Density>,
}

impl MarginalFlow {
    pub fn new(time_grid: TimeGrid, densities: Vec<Density>) -> Result<Self> {
        if densities.len() != time_grid.n_nodes() {
            return Err(Error::InvalidGrid(format!(
                "{} slices for {} time nodes",
                densities.len(),
                time_grid.n_nodes()
            )));
        }
        if densities.windows(2).any(|w| w[0].grid != w[1].grid) {
            return Err(Error::GridMismatch);
        }
        Ok(Self { time_grid, densities })
    }

    pub fn constant(time_grid: TimeGrid, mu: &Density) -> Self {
        Self { time_grid, densities: vec![mu.clone(); time_grid.n_nodes()] }
    }

    pub fn grid(&self) -> SpatialGrid {
        self.densities[0].grid
    }

    pub fn first(&self) -> &Density {
        &self.densities[0]
    }

    pub fn last(&self) -> &Density {
        &self.densities[self.densities.len() - 1]
    }

    pub fn reversed(&self) -> Self {
        let mut densities = self.densities.clone();
        densities.reverse();
        Self { time_grid: self.time_grid, densities }
    }
}

/// Values f(t_k, x_i), row-major by time node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub time_grid: TimeGrid,
    pub grid: SpatialGrid,
    pub values: Vec<Vec<f64>>,
}

impl GridField {
    pub fn zeros(time_grid: TimeGrid, grid: SpatialGrid) -> Self {
        Self { time_grid, grid, values: vec![vec![0.0; grid.n_cells]; time_grid.n_nodes()] }
    }

    pub fn reversed(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        Self { time_grid: self.time_grid, grid: self.grid, values }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
    }
}
