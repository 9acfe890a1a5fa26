//! Free energy, equilibrium, Fisher information, velocity/corrector fields,
//! entropic cost, conserved quantity and Schrödinger potentials.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{divergence_inverse, grad, Density, GridField, MarginalFlow, SpatialGrid, TimeGrid};
use crate::potential::{interaction_energy, InteractionPotential, Kernels};

/// F̃(μ) = ∫ p log p + ΣΣ W(xᵢ − xⱼ) pᵢ pⱼ Δx².
pub fn free_energy(w: &InteractionPotential, mu: &Density) -> f64 {
    mu.entropy() + interaction_energy(w, mu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumMeasure {
    pub density: Density,
    pub mean_constraint: f64,
    pub fixed_point_residual: f64,
    /// Lagrange multiplier of the mean constraint.
    pub multiplier: f64,
    pub iterations: usize,
}

pub const EQUILIBRIUM_DAMPING: f64 = 0.5;
pub const EQUILIBRIUM_TOL: f64 = 1e-10;
const EQUILIBRIUM_MAX_ITERS: usize = 10_000;

/// normalize(exp(v + b x)) with b chosen so the mean is `target`.
fn tilt_to_mean(grid: &SpatialGrid, v: &[f64], target: f64) -> (Vec<f64>, f64) {
    let xs = grid.centers();
    let dx = grid.dx();
    let eval = |b: f64| -> (Vec<f64>, f64) {
        let e: Vec<f64> = v.iter().zip(&xs).map(|(v, x)| v + b * x).collect();
        let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = e.iter().map(|e| (e - top).exp()).collect();
        let z: f64 = p.iter().sum::<f64>() * dx;
        p.iter_mut().for_each(|q| *q /= z);
        let mean = p.iter().zip(&xs).map(|(p, x)| p * x).sum::<f64>() * dx;
        (p, mean)
    };
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid).1 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    (eval(b).0, b)
}

/// Minimizer of F̃ at fixed mean, by damped fixed point on μ ∝ exp(−2W∗μ + b x).
pub fn equilibrium(w: &InteractionPotential, mean: f64, grid: SpatialGrid) -> Result<EquilibriumMeasure> {
    if !(w.kappa > 0.0) {
        return Err(Error::NeedsConvexity);
    }
    let k = w.kernels(&grid);
    let xs = grid.centers();
    let start: Vec<f64> = xs.iter().map(|x| -(x - mean).powi(2)).collect();
    let (mut p, _) = tilt_to_mean(&grid, &start, mean);
    let mut b;
    let mut residual = f64::INFINITY;
    for it in 0..EQUILIBRIUM_MAX_ITERS {
        let v: Vec<f64> = k.potential(&p).iter().map(|u| -2.0 * u).collect();
        let (tp, tb) = tilt_to_mean(&grid, &v, mean);
        residual = tp.iter().zip(&p).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()));
        b = tb;
        if residual <= EQUILIBRIUM_TOL {
            return Ok(EquilibriumMeasure {
                density: Density::new(grid, tp)?,
                mean_constraint: mean,
                fixed_point_residual: residual,
                multiplier: b,
                iterations: it + 1,
            });
        }
        for (q, t) in p.iter_mut().zip(&tp) {
            *q = (1.0 - EQUILIBRIUM_DAMPING) * *q + EQUILIBRIUM_DAMPING * t;
        }
    }
    Err(Error::NoConvergence { what: "equilibrium", iters: EQUILIBRIUM_MAX_ITERS, residual })
}

/// F(μ) = F̃(μ) − F̃(μ∞) with μ∞ at the mean of μ.
pub fn relative_free_energy(w: &InteractionPotential, mu: &Density) -> Result<f64> {
    let eq = equilibrium(w, mu.mean(), mu.grid)?;
    Ok(free_energy(w, mu) - free_energy(w, &eq.density))
}

/// ∫ |∇log p + 2∇W∗p|² p over retained cells.
pub fn fisher_information(w: &InteractionPotential, mu: &Density) -> f64 {
    let k = w.kernels(&mu.grid);
    fisher_with(&k, mu)
}

fn fisher_with(k: &Kernels, mu: &Density) -> f64 {
    let dx = mu.grid.dx();
    let score = grad(&mu.log_values(), dx);
    let f = k.force(&mu.values);
    let keep = mu.retained();
    (0..mu.values.len())
        .filter(|i| keep[*i])
        .map(|i| (score[i] + 2.0 * f[i]).powi(2) * mu.values[i])
        .sum::<f64>()
        * dx
}

/// Face momenta M_{k+½} (len n_cells+1) solving ∂ₓM = −(μ_{k+1} − μ_k)/Δt.
pub fn face_momentum(flow: &MarginalFlow) -> Result<Vec<Vec<f64>>> {
    let dx = flow.grid().dx();
    let dt = flow.time_grid.dt();
    flow.densities
        .windows(2)
        .map(|w| {
            let src: Vec<f64> = w[1].values.iter().zip(&w[0].values).map(|(b, a)| -(b - a) / dt).collect();
            divergence_inverse(&src, dx)
        })
        .collect()
}

/// Node-and-cell momentum from face momenta: average the two faces of a
/// cell, then the two neighbouring midpoints (linear extrapolation at t = 0, T).
pub fn node_momentum(faces: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half: Vec<Vec<f64>> = faces.iter().map(|m| m.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()).collect();
    let ns = half.len();
    let nc = half[0].len();
    let mut out = vec![vec![0.0; nc]; ns + 1];
    for i in 0..nc {
        out[0][i] = 1.5 * half[0][i] - 0.5 * half[1][i];
        out[ns][i] = 1.5 * half[ns - 1][i] - 0.5 * half[ns - 2][i];
        for k in 1..ns {
            out[k][i] = 0.5 * (half[k - 1][i] + half[k][i]);
        }
    }
    out
}

/// Tangent velocity w = m/μ recovered from the continuity equation.
pub fn velocity_from_flow(flow: &MarginalFlow) -> Result<GridField> {
    let faces = face_momentum(flow)?;
    Ok(velocity_from_momentum(flow, &faces))
}

pub fn velocity_from_momentum(flow: &MarginalFlow, faces: &[Vec<f64>]) -> GridField {
    let m = node_momentum(faces);
    let values = flow
        .densities
        .iter()
        .zip(&m)
        .map(|(mu, mk)| {
            let keep = mu.retained();
            (0..mk.len()).map(|i| if keep[i] { mk[i] / mu.values[i] } else { 0.0 }).collect()
        })
        .collect();
    GridField { time_grid: flow.time_grid, grid: flow.grid(), values }
}

/// Ψ = w + ½∇log μ + ∇W∗μ on retained cells, zero elsewhere.
pub fn corrector(flow: &MarginalFlow, w: &GridField, pot: &InteractionPotential) -> GridField {
    let k = pot.kernels(&flow.grid());
    let dx = flow.grid().dx();
    let values = flow
        .densities
        .par_iter()
        .zip(&w.values)
        .map(|(mu, wk)| {
            let score = grad(&mu.log_values(), dx);
            let f = k.force(&mu.values);
            let keep = mu.retained();
            (0..wk.len()).map(|i| if keep[i] { wk[i] + 0.5 * score[i] + f[i] } else { 0.0 }).collect()
        })
        .collect();
    GridField { time_grid: flow.time_grid, grid: flow.grid(), values }
}

/// ½ Σ_k τ_k Δt Σ_i Ψ² p Δx (trapezoid in time, midpoint in space).
pub fn entropic_cost(psi: &GridField, flow: &MarginalFlow) -> f64 {
    0.5 * energy_profile(psi, flow)
        .iter()
        .enumerate()
        .map(|(k, e)| flow.time_grid.trapezoid(k) * e)
        .sum::<f64>()
        * flow.time_grid.dt()
}

/// t_k ↦ Σ_i Ψ(t_k, xᵢ)² pᵢ(t_k) Δx.
pub fn energy_profile(psi: &GridField, flow: &MarginalFlow) -> Vec<f64> {
    let dx = flow.grid().dx();
    psi.values
        .iter()
        .zip(&flow.densities)
        .map(|(s, mu)| s.iter().zip(&mu.values).map(|(s, p)| s * s * p).sum::<f64>() * dx)
        .collect()
}

pub fn time_reverse_flow(flow: &MarginalFlow) -> MarginalFlow {
    flow.reversed()
}

pub fn time_reverse_field(field: &GridField) -> GridField {
    field.reversed()
}

/// Ψ̂_{t_k} = −Ψ_{t_{n−k}} + ∇log μ_{t_{n−k}} + 2∇W∗μ_{t_{n−k}}; zero off the retained set.
pub fn backward_corrector(psi: &GridField, flow: &MarginalFlow, pot: &InteractionPotential) -> GridField {
    let k = pot.kernels(&flow.grid());
    let dx = flow.grid().dx();
    let n = flow.time_grid.n_steps;
    let values = (0..=n)
        .into_par_iter()
        .map(|kk| {
            let mu = &flow.densities[n - kk];
            let s = &psi.values[n - kk];
            let score = grad(&mu.log_values(), dx);
            let f = k.force(&mu.values);
            let keep = mu.retained();
            (0..s.len()).map(|i| if keep[i] { -s[i] + score[i] + 2.0 * f[i] } else { 0.0 }).collect()
        })
        .collect();
    GridField { time_grid: flow.time_grid, grid: flow.grid(), values }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservedProfile {
    /// Node indices k in [n/8, 7n/8].
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub spread: f64,
}

/// E(t_k) = Σ_i Ψ(t_k, xᵢ) Ψ̂(t_{n−k}, xᵢ) pᵢ(t_k) Δx on interior nodes.
pub fn conserved_quantity_profile(psi: &GridField, psi_hat: &GridField, flow: &MarginalFlow) -> ConservedProfile {
    let n = flow.time_grid.n_steps;
    let dx = flow.grid().dx();
    let nodes: Vec<usize> = (n / 8..=(7 * n) / 8).collect();
    let values: Vec<f64> = nodes
        .iter()
        .map(|&k| {
            let a = &psi.values[k];
            let b = &psi_hat.values[n - k];
            let p = &flow.densities[k].values;
            (0..p.len()).map(|i| a[i] * b[i] * p[i]).sum::<f64>() * dx
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    ConservedProfile { nodes, values, mean, spread: max - min }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub method: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub continuity_residual: f64,
    pub boundary_residual: f64,
    pub objective_history: Vec<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSolution {
    pub flow: MarginalFlow,
    pub velocity: GridField,
    pub corrector: GridField,
    pub cost: f64,
    pub diagnostics: SolverDiagnostics,
}

impl BridgeSolution {
    /// Derives w, Ψ and C_T from a flow.
    pub fn from_flow(flow: MarginalFlow, pot: &InteractionPotential, diagnostics: SolverDiagnostics) -> Result<Self> {
        let velocity = velocity_from_flow(&flow)?;
        let corrector = corrector(&flow, &velocity, pot);
        let cost = entropic_cost(&corrector, &flow);
        Ok(Self { flow, velocity, corrector, cost, diagnostics })
    }

    pub fn horizon(&self) -> f64 {
        self.flow.time_grid.horizon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchrodingerPotentials {
    pub psi: GridField,
    pub phi: GridField,
    /// Sup-norm residuals of the ψ- and φ-equations on interior nodes.
    pub residual_psi: f64,
    pub residual_phi: f64,
}

/// Bulk mask used for residual sup norms: finite differences in the far
/// tails are dominated by the log floor, so only cells holding a visible
/// fraction of the peak density are scored.
pub(crate) fn bulk_mask(mu: &Density, rel: f64) -> Vec<bool> {
    let max = mu.values.iter().cloned().fold(0.0, f64::max);
    mu.values.iter().map(|p| *p >= rel * max).collect()
}

pub(crate) const BULK_FRACTION: f64 = 1e-3;

/// ψ as the spatial antiderivative of Ψ (zero at the leftmost retained cell),
/// φ = log μ + 2W∗μ − ψ, and residuals of the two coupled HJB equations.
pub fn schrodinger_potentials(sol: &BridgeSolution, pot: &InteractionPotential) -> SchrodingerPotentials {
    let flow = &sol.flow;
    let grid = flow.grid();
    let dx = grid.dx();
    let dt = flow.time_grid.dt();
    let n = flow.time_grid.n_steps;
    let nc = grid.n_cells;
    let k = pot.kernels(&grid);
    let mut psi = GridField::zeros(flow.time_grid, grid);
    let mut phi = GridField::zeros(flow.time_grid, grid);
    for t in 0..=n {
        let mu = &flow.densities[t];
        let keep = mu.retained();
        let s = &sol.corrector.values[t];
        let first = keep.iter().position(|b| *b).unwrap_or(0);
        let mut acc = 0.0;
        for i in 0..nc {
            if i > first {
                acc += 0.5 * (s[i - 1] + s[i]) * dx;
            }
            psi.values[t][i] = if i >= first { acc } else { 0.0 };
        }
        let lp = mu.log_values();
        let v = k.potential(&mu.values);
        for i in 0..nc {
            phi.values[t][i] = lp[i] + 2.0 * v[i] - psi.values[t][i];
        }
    }
    // Gauge: ψ is defined up to c(t); both residuals shift by c′(t), fitted per slice.
    let mut residual_psi: f64 = 0.0;
    let mut residual_phi: f64 = 0.0;
    for t in 1..n - 1 {
        let mu = &flow.densities[t];
        let mask = bulk_mask(mu, BULK_FRACTION);
        let r1 = hjb_terms(&psi.values[t], &psi.values[t + 1], 1.0, &mu.values, &k, dx, dt);
        let r2 = hjb_terms(&phi.values[t], &phi.values[t + 1], -1.0, &mu.values, &k, dx, dt);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 1..nc - 1 {
            if mask[i] {
                num += 0.5 * (r1[i] + r2[i]) * mu.values[i];
                den += mu.values[i];
            }
        }
        let c = if den > 0.0 { num / den } else { 0.0 };
        for i in 1..nc - 1 {
            if mask[i] {
                residual_psi = residual_psi.max((r1[i] - c).abs());
                residual_phi = residual_phi.max((r2[i] - c).abs());
            }
        }
    }
    SchrodingerPotentials { psi, phi, residual_psi, residual_phi }
}

/// sign·∂ₜu + ½∂ₓₓu + ½|∂ₓu|² − [∂ₓu · W′∗μ − W′∗(μ ∂ₓu)], forward difference in time.
fn hjb_terms(u: &[f64], u_next: &[f64], sign: f64, p: &[f64], k: &Kernels, dx: f64, dt: f64) -> Vec<f64> {
    let nc = u.len();
    let du = grad(u, dx);
    let f = k.force(p);
    let pdu: Vec<f64> = p.iter().zip(&du).map(|(p, d)| p * d).collect();
    let g = k.force(&pdu);
    (0..nc)
        .map(|i| {
            if i == 0 || i == nc - 1 {
                return 0.0;
            }
            let lap = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx);
            sign * (u_next[i] - u[i]) / dt + 0.5 * lap + 0.5 * du[i] * du[i] - (du[i] * f[i] - g[i])
        })
        .collect()
}

/// Gaussian heat-flow marginals N(m, s0² + t), handy for tests and examples.
pub fn heat_flow(grid: SpatialGrid, time_grid: TimeGrid, mean: f64, var0: f64) -> Result<MarginalFlow> {
    let xs = grid.centers();
    let densities = (0..=time_grid.n_steps)
        .map(|k| {
            let v = var0 + time_grid.t(k);
            Density::new(grid, xs.iter().map(|x| (-(x - mean).powi(2) / (2.0 * v)).exp()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    MarginalFlow::new(time_grid, densities)
}
