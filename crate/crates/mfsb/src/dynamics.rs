//! Interacting particles, the McKean–Vlasov Fokker–Planck flow, the
//! frozen-drift reference flow and the pathwise Θ map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::PathEnsemble;
use crate::error::{Error, Result};
use crate::grid::{Density, GridField, MarginalFlow, TimeGrid};
use crate::potential::{InteractionPotential, Kernels, PotentialKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Quantiles (i + ½)/N of μ_in.
    #[default]
    Stratified,
    Iid,
}

fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// −(1/N) Σ_l W′(yᵢ − y_l) for all i.
fn mean_field_drift(w: &InteractionPotential, y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    match w.kind {
        PotentialKind::Zero => vec![0.0; y.len()],
        PotentialKind::Quadratic { kappa } => {
            let m = y.iter().sum::<f64>() / n;
            y.iter().map(|yi| -kappa * (yi - m)).collect()
        }
        PotentialKind::GaussianWell { .. } => y
            .par_iter()
            .map(|yi| -y.iter().map(|yl| w.d1(yi - yl)).sum::<f64>() / n)
            .collect(),
    }
}

/// Euler–Maruyama for the N-particle system. Each particle draws from its own
/// ChaCha8 stream keyed by (seed, index), so results do not depend on threads.
pub fn simulate_particles(
    w: &InteractionPotential,
    mu_in: &Density,
    time_grid: TimeGrid,
    n: usize,
    seed: u64,
    init: InitMode,
) -> Result<PathEnsemble> {
    if n < 2 {
        return Err(Error::InvalidDensity(format!("need at least 2 particles, got {n}")));
    }
    let steps = time_grid.n_steps;
    let sd = time_grid.dt().sqrt();
    let draws: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = particle_rng(seed, i);
            let u = match init {
                InitMode::Stratified => (i as f64 + 0.5) / n as f64,
                InitMode::Iid => rng.gen::<f64>(),
            };
            let inc = (0..steps).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            (mu_in.quantile(u), inc)
        })
        .collect();
    let dt = time_grid.dt();
    let mut positions: Vec<Vec<f64>> = draws.iter().map(|(x0, _)| {
        let mut p = Vec::with_capacity(steps + 1);
        p.push(*x0);
        p
    }).collect();
    let mut y: Vec<f64> = draws.iter().map(|d| d.0).collect();
    for k in 0..steps {
        let b = mean_field_drift(w, &y);
        for i in 0..n {
            y[i] = y[i] + b[i] * dt + draws[i].1[k];
            positions[i].push(y[i]);
        }
    }
    Ok(PathEnsemble {
        time_grid,
        positions,
        increments: draws.into_iter().map(|d| d.1).collect(),
        seed,
    })
}

pub const THETA_TOL: f64 = 1e-10;

/// Θ(Q): Picard iteration Y ← ω + ∫₀ᵗ b̄(Y) ds with left-endpoint quadrature,
/// where ω ranges over the paths of `q`.
pub fn tanaka_theta(q: &PathEnsemble, w: &InteractionPotential, tol: f64, max_iters: usize) -> Result<PathEnsemble> {
    let n = q.len();
    let steps = q.time_grid.n_steps;
    let dt = q.time_grid.dt();
    let omega = &q.positions;
    let mut y = omega.clone();
    let mut last = f64::INFINITY;
    for _ in 0..max_iters {
        let mut next = omega.clone();
        let mut acc = vec![0.0; n];
        for k in 0..steps {
            let col: Vec<f64> = y.iter().map(|p| p[k]).collect();
            let b = mean_field_drift(w, &col);
            for i in 0..n {
                acc[i] += b[i] * dt;
                next[i][k + 1] = omega[i][k + 1] + acc[i];
            }
        }
        last = next
            .iter()
            .zip(&y)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max);
        y = next;
        if last <= tol {
            return Ok(PathEnsemble { time_grid: q.time_grid, positions: y, increments: q.increments.clone(), seed: q.seed });
        }
    }
    Err(Error::NoConvergence { what: "theta map", iters: max_iters, residual: last })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FokkerPlanckConfig {
    /// Target Courant number of the drift per substep.
    pub courant: f64,
    pub max_substeps: usize,
}

impl Default for FokkerPlanckConfig {
    fn default() -> Self {
        Self { courant: 0.5, max_substeps: 4096 }
    }
}

/// Bernoulli function z/(eᶻ − 1).
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-10 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// One output step of ∂ₜμ = ½∂ₓₓμ + ∂ₓ(μ ∂ₓΦ/2) with Φ = 2W∗ν frozen:
/// exponentially fitted (Scharfetter–Gummel) fluxes, backward Euler substeps.
/// The discrete Gibbs state exp(−Φ) is an exact zero-flux solution. Columns of
/// the step matrix sum to one, so it doubles as a Markov transition kernel.
#[derive(Debug, Clone)]
pub(crate) struct FpStep {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    substeps: usize,
}

impl FpStep {
    pub(crate) fn new(phi: &[f64], dx: f64, dt: f64, cfg: &FokkerPlanckConfig) -> Result<Self> {
        let n = phi.len();
        let vmax = phi.windows(2).map(|w| ((w[1] - w[0]) / (2.0 * dx)).abs()).fold(0.0, f64::max);
        let needed = ((dt * vmax / dx) / cfg.courant).ceil().max(1.0) as usize;
        if needed > cfg.max_substeps {
            return Err(Error::CflViolation { needed, limit: cfg.max_substeps });
        }
        let h = dt / needed as f64;
        let d = 0.5 / dx;
        // J_{i+½} = a_i μ_i − c_i μ_{i+1}
        let a: Vec<f64> = phi.windows(2).map(|w| d * bernoulli(w[1] - w[0])).collect();
        let c: Vec<f64> = phi.windows(2).map(|w| d * bernoulli(w[0] - w[1])).collect();
        let r = h / dx;
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            if i + 1 < n {
                diag[i] += r * a[i];
                upper[i] = -r * c[i];
            }
            if i > 0 {
                diag[i] += r * c[i - 1];
                lower[i] = -r * a[i - 1];
            }
        }
        Ok(Self { lower, diag, upper, substeps: needed })
    }

    /// Density forward one output step.
    pub(crate) fn apply(&self, mu: &[f64]) -> Vec<f64> {
        let mut x = mu.to_vec();
        for _ in 0..self.substeps {
            x = thomas(&self.lower, &self.diag, &self.upper, &x);
        }
        x
    }

    /// Transpose action (backward Kolmogorov step on functions).
    pub(crate) fn apply_t(&self, g: &[f64]) -> Vec<f64> {
        let n = g.len();
        let lo: Vec<f64> = (0..n).map(|i| if i > 0 { self.upper[i - 1] } else { 0.0 }).collect();
        let up: Vec<f64> = (0..n).map(|i| if i + 1 < n { self.lower[i + 1] } else { 0.0 }).collect();
        let mut x = g.to_vec();
        for _ in 0..self.substeps {
            x = thomas(&lo, &self.diag, &up, &x);
        }
        x
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = upper[0] / diag[0];
    dp[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * cp[i - 1];
        cp[i] = upper[i] / m;
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

pub(crate) fn interaction_phi(k: &Kernels, nu: &[f64]) -> Vec<f64> {
    if k.zero {
        vec![0.0; nu.len()]
    } else {
        k.potential(nu).iter().map(|v| 2.0 * v).collect()
    }
}

fn evolve(
    mu_start: &Density,
    time_grid: TimeGrid,
    cfg: &FokkerPlanckConfig,
    mut driver: impl FnMut(usize, &Density) -> Vec<f64>,
) -> Result<MarginalFlow> {
    let grid = mu_start.grid;
    let dx = grid.dx();
    let mut out = Vec::with_capacity(time_grid.n_nodes());
    out.push(mu_start.clone());
    for step in 0..time_grid.n_steps {
        let cur = &out[step];
        let phi = driver(step, cur);
        let next = FpStep::new(&phi, dx, time_grid.dt(), cfg)?.apply(&cur.values);
        // mass is conserved by the scheme; renormalizing only strips roundoff
        out.push(Density::new(grid, next.into_iter().map(|v| v.max(0.0)).collect())?);
    }
    MarginalFlow::new(time_grid, out)
}

/// Nonlinear Fokker–Planck flow of the McKean–Vlasov dynamics started at μ_in.
/// The interaction potential is refreshed at each output node.
pub fn mkv_flow(w: &InteractionPotential, mu_in: &Density, time_grid: TimeGrid) -> Result<MarginalFlow> {
    mkv_flow_with(w, mu_in, time_grid, &FokkerPlanckConfig::default())
}

pub fn mkv_flow_with(w: &InteractionPotential, mu_in: &Density, time_grid: TimeGrid, cfg: &FokkerPlanckConfig) -> Result<MarginalFlow> {
    let k = w.kernels(&mu_in.grid);
    evolve(mu_in, time_grid, cfg, |_, cur| interaction_phi(&k, &cur.values))
}

/// Linear Fokker–Planck flow with drift −∇W∗(frozen μ_t), started at `mu_start`.
pub fn reference_flow(w: &InteractionPotential, frozen: &MarginalFlow, mu_start: &Density) -> Result<MarginalFlow> {
    reference_flow_with(w, frozen, mu_start, &FokkerPlanckConfig::default())
}

pub fn reference_flow_with(
    w: &InteractionPotential,
    frozen: &MarginalFlow,
    mu_start: &Density,
    cfg: &FokkerPlanckConfig,
) -> Result<MarginalFlow> {
    if frozen.grid() != mu_start.grid {
        return Err(Error::GridMismatch);
    }
    let k = w.kernels(&mu_start.grid);
    evolve(mu_start, frozen.time_grid, cfg, |step, _| interaction_phi(&k, &frozen.densities[step].values))
}

/// Frozen-marginal reference diffusion Γ(P) and its drift −∇W∗μ_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDynamics {
    pub frozen: MarginalFlow,
    pub drift: GridField,
}

impl ReferenceDynamics {
    pub fn new(w: &InteractionPotential, frozen: MarginalFlow) -> Self {
        let k = w.kernels(&frozen.grid());
        let values = frozen.densities.iter().map(|mu| k.force(&mu.values).iter().map(|f| -f).collect()).collect();
        let drift = GridField { time_grid: frozen.time_grid, grid: frozen.grid(), values };
        Self { frozen, drift }
    }

    /// Largest difference quotient of the drift over neighbouring cells.
    pub fn lipschitz_estimate(&self) -> f64 {
        let dx = self.drift.grid.dx();
        self.drift
            .values
            .iter()
            .flat_map(|row| row.windows(2).map(move |w| ((w[1] - w[0]) / dx).abs()))
            .fold(0.0, f64::max)
    }
}
